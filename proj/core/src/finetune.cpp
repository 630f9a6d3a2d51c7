// SPDX-License-Identifier: Apache-2.0
#include "intraq/finetune.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>

#include "intraq/quantize_model.hpp"

namespace intraq::finetune {

void FinetuneConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("finetune config: " + msg); };
  if (!(alpha >= 0.0)) fail("alpha must be >= 0");
  if (epochs < 0) fail("epochs must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(lr > 0.0)) fail("lr must be > 0");
  if (lr_step < 1) fail("lr_step must be >= 1");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) fail("lr_decay must lie in (0, 1]");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
  if (nesterov && momentum == 0.0) fail("nesterov requires momentum > 0");
  if (calibration_epochs < 0) fail("calibration_epochs must be >= 0");
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw InputError("kl divergence of distributions of different length");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = std::max(p[i], kProbFloor);
    const double qi = std::max(q[i], kProbFloor);
    kl += p[i] * (std::log(pi) - std::log(qi));
  }
  return kl;
}

double finetune_loss(std::span<const double> q_probs, std::span<const double> f_probs, std::int64_t label,
                     double alpha) {
  if (label < 0 || label >= static_cast<std::int64_t>(q_probs.size())) throw InputError("label out of range");
  const double ce = -std::log(std::max(q_probs[static_cast<std::size_t>(label)], kProbFloor));
  return alpha == 0.0 ? ce : ce + alpha * kl_divergence(q_probs, f_probs);
}

torch::Tensor finetune_loss_batch(const torch::Tensor& q_logits, const torch::Tensor& f_probs,
                                  const torch::Tensor& labels, double alpha) {
  if (q_logits.sizes() != f_probs.sizes() || q_logits.dim() != 2 || labels.size(0) != q_logits.size(0)) {
    throw InputError("student logits, teacher probs and labels must line up");
  }
  const double log_floor = std::log(kProbFloor);
  const auto log_q = torch::log_softmax(q_logits, 1).clamp_min(log_floor);
  const auto ce = -log_q.gather(1, labels.to(torch::kInt64).unsqueeze(1)).squeeze(1);
  if (alpha == 0.0) return ce.mean();
  const auto q = torch::softmax(q_logits, 1);
  const auto log_f = torch::log(f_probs.to(q_logits.dtype()).clamp_min(kProbFloor));
  const auto kl = (q * (log_q - log_f)).sum(1);
  return (ce + alpha * kl).mean();
}

double lr_at_epoch(const FinetuneConfig& cfg, std::int64_t epoch) {
  return cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(epoch / cfg.lr_step));
}

std::filesystem::path checkpoint_path(const CheckpointPolicy& policy, std::int64_t epoch) {
  return policy.directory / ("q_epoch" + std::to_string(epoch) + "_" + policy.config_hash + ".pt");
}

namespace {

torch::Tensor teacher_probs(model::Classifier& teacher, const torch::Tensor& images, std::int64_t batch) {
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> out;
  for (std::int64_t s = 0; s < images.size(0); s += batch) {
    out.push_back(torch::softmax(teacher->forward(images.slice(0, s, std::min(images.size(0), s + batch))), 1));
  }
  return torch::cat(out);
}

}  // namespace

FinetuneResult finetune(model::Classifier& student, model::Classifier& teacher,
                        const synthesis::SyntheticImageSet& data, const FinetuneConfig& cfg, std::uint64_t seed,
                        const CheckpointPolicy* checkpoints) {
  cfg.validate();
  FinetuneResult result;
  if (cfg.epochs == 0) return result;
  const auto n = data.size();
  if (n == 0) throw InputError("fine-tuning needs a non-empty synthetic set");

  teacher->eval();
  const auto images = data.images.detach().to(torch::kFloat32);
  const auto labels = data.labels.to(torch::kInt64);
  const auto targets = teacher_probs(teacher, images, std::max<std::int64_t>(cfg.batch_size, 256));

  torch::optim::SGD optimizer(student->parameters(), torch::optim::SGDOptions(cfg.lr)
                                                         .momentum(cfg.momentum)
                                                         .nesterov(cfg.nesterov)
                                                         .weight_decay(cfg.weight_decay));
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  auto last_good = model::snapshot_state(*student);

  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(cfg, epoch);
    static_cast<torch::optim::SGDOptions&>(optimizer.param_groups()[0].options()).lr(lr);
    quant::set_activation_observing(student, epoch < cfg.calibration_epochs);
    student->train();

    const auto perm = torch::randperm(n, gen, torch::kInt64);
    double total = 0.0;
    for (std::int64_t s = 0; s < n; s += cfg.batch_size) {
      const auto idx = perm.slice(0, s, std::min(n, s + cfg.batch_size));
      const auto loss = finetune_loss_batch(student->forward(images.index_select(0, idx)),
                                            targets.index_select(0, idx), labels.index_select(0, idx), cfg.alpha);
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        quant::set_activation_observing(student, false);
        model::restore_state(*student, last_good);
        student->eval();
        throw FinetuneAborted(epoch, "non-finite loss");
      }
      optimizer.zero_grad();
      loss.backward();
      optimizer.step();
      total += value * static_cast<double>(idx.size(0));
    }
    last_good = model::snapshot_state(*student);
    result.epoch_loss.push_back(total / static_cast<double>(n));
    result.epoch_lr.push_back(lr);

    const bool last = epoch + 1 == cfg.epochs;
    if (checkpoints && ((epoch + 1) % cfg.lr_step == 0 || last)) {
      quant::set_activation_observing(student, false);
      student->eval();
      auto path = checkpoint_path(*checkpoints, epoch + 1);
      model::save_checkpoint(student, path, {{"config_hash", checkpoints->config_hash},
                                             {"epoch", std::to_string(epoch + 1)}});
      result.checkpoints.push_back(std::move(path));
    }
  }
  quant::set_activation_observing(student, false);
  student->eval();
  return result;
}

double top1_from_logits(const torch::Tensor& logits, const torch::Tensor& labels) {
  if (labels.numel() == 0) throw InputError("accuracy of an empty dataset");
  return logits.argmax(1).eq(labels.to(torch::kInt64)).to(torch::kFloat64).mean().item<double>();
}

double evaluate_top1(model::Classifier& model, const torch::Tensor& images, const torch::Tensor& labels,
                     std::int64_t batch_size) {
  if (!images.defined() || images.size(0) == 0) throw InputError("evaluation dataset is empty");
  if (labels.size(0) != images.size(0)) throw InputError("one label per evaluation image required");
  torch::NoGradGuard guard;
  const bool was_training = model->is_training();
  model->eval();
  std::int64_t correct = 0;
  for (std::int64_t s = 0; s < images.size(0); s += batch_size) {
    const auto e = std::min(images.size(0), s + batch_size);
    const auto logits = model::forward_with_stats(model, images.slice(0, s, e), false).logits;
    correct += logits.argmax(1).eq(labels.slice(0, s, e).to(torch::kInt64)).sum().item<std::int64_t>();
  }
  model->train(was_training);
  return static_cast<double>(correct) / static_cast<double>(images.size(0));
}

}  // namespace intraq::finetune
