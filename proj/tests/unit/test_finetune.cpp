// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "intraq/errors.hpp"
#include "intraq/finetune.hpp"
#include "intraq/quantize_model.hpp"

using namespace intraq;
using namespace intraq::finetune;

namespace {

synthesis::SyntheticImageSet toy_set(std::int64_t n, std::int64_t k, const model::InputShape& s) {
  synthesis::SyntheticImageSet set;
  set.images = torch::randn({n, s.channels, s.height, s.width});
  set.labels = torch::arange(n, torch::kInt64).remainder(k);
  set.soft_targets = torch::ones({n});
  set.rounds.assign(static_cast<std::size_t>(n), 0);
  set.num_classes = k;
  return set;
}

}  // namespace

TEST(FinetuneLoss, VanishesForMatchingOneHot) {
  const std::vector<double> q{0.0, 1.0, 0.0};
  EXPECT_NEAR(finetune_loss(q, q, 1, 20.0), 0.0, 1e-12);
}

TEST(FinetuneLoss, AlphaZeroIsCrossEntropy) {
  const std::vector<double> q{0.2, 0.5, 0.3}, f{0.6, 0.1, 0.3}, g{0.1, 0.1, 0.8};
  EXPECT_EQ(finetune_loss(q, f, 1, 0.0), -std::log(0.5));
  EXPECT_EQ(finetune_loss(q, f, 1, 0.0), finetune_loss(q, g, 1, 0.0));
}

TEST(FinetuneLoss, TwoClassExample) {
  const std::vector<double> q{0.5, 0.5}, f{0.25, 0.75};
  const double kl = 0.5 * std::log(0.5 / 0.25) + 0.5 * std::log(0.5 / 0.75);
  EXPECT_NEAR(kl_divergence(q, f), kl, 1e-15);
  EXPECT_NEAR(finetune_loss(q, f, 0, 20.0), std::log(2.0) + 20.0 * kl, 1e-12);
}

TEST(FinetuneLoss, KlOfIdenticalRowsIsZero) {
  torch::manual_seed(1);
  for (int i = 0; i < 20; ++i) {
    const auto p = torch::softmax(torch::randn({10}, torch::kFloat64) * 3, 0).contiguous();
    const std::span<const double> row(p.data_ptr<double>(), 10);
    EXPECT_NEAR(kl_divergence(row, row), 0.0, 1e-9);
  }
}

TEST(FinetuneLoss, ZeroProbabilitiesAreClamped) {
  const std::vector<double> q{1.0, 0.0}, f{0.0, 1.0};
  const double v = finetune_loss(q, f, 1, 1.0);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, -std::log(1e-12) + (std::log(1.0) - std::log(1e-12)), 1e-6);
}

TEST(FinetuneLoss, BatchIsMeanOfScalars) {
  torch::manual_seed(2);
  const auto logits = torch::randn({4, 3}, torch::kFloat64);
  const auto f = torch::softmax(torch::randn({4, 3}, torch::kFloat64), 1).contiguous();
  const auto labels = torch::tensor({0, 2, 1, 1}, torch::kInt64);
  const auto q = torch::softmax(logits, 1).contiguous();
  double sum = 0;
  for (int i = 0; i < 4; ++i) {
    const std::span<const double> qi(q.data_ptr<double>() + 3 * i, 3), fi(f.data_ptr<double>() + 3 * i, 3);
    sum += finetune_loss(qi, fi, labels[i].item<std::int64_t>(), 20.0);
  }
  EXPECT_NEAR(finetune_loss_batch(logits, f, labels, 20.0).item<double>(), sum / 4, 1e-10);
}

TEST(Schedule, StepDecayOverOneHundredFiftyEpochs) {
  FinetuneConfig cfg;
  cfg.lr = 1e-4;
  for (int e = 0; e < 150; ++e) EXPECT_EQ(lr_at_epoch(cfg, e), e < 100 ? 1e-4 : 1e-4 * 0.1) << e;
}

TEST(Finetune, ZeroEpochsLeavesStudentUnchanged) {
  torch::manual_seed(3);
  auto f = model::make_classifier({"plain_cnn", 10, {3, 16, 16}, 4});
  auto q = quant::build_quantized_model(f, 4, 4);
  const auto before = model::snapshot_state(*q);
  FinetuneConfig cfg;
  cfg.epochs = 0;
  const auto r = finetune::finetune(q, f, toy_set(4, 10, {3, 16, 16}), cfg, 1);
  EXPECT_TRUE(r.epoch_loss.empty());
  for (const auto& [k, v] : model::snapshot_state(*q)) EXPECT_TRUE(torch::equal(v, before.at(k))) << k;
}

TEST(Finetune, EmptySetWithEpochsIsInputError) {
  auto f = model::make_classifier({"plain_cnn", 10, {3, 16, 16}, 4});
  auto q = quant::build_quantized_model(f, 4, 4);
  FinetuneConfig cfg;
  cfg.epochs = 1;
  EXPECT_THROW(finetune::finetune(q, f, synthesis::SyntheticImageSet{}, cfg, 1), InputError);
}

TEST(Finetune, OneStepMatchesHandNesterovUpdate) {
  torch::manual_seed(4);
  model::ArchConfig arch{"mlp", 2, {1, 1, 2}, 2};
  auto teacher = model::make_classifier(arch);
  auto student = model::clone_classifier(teacher);
  {
    torch::NoGradGuard g;
    for (auto& p : student->parameters()) p.add_(torch::randn_like(p) * 0.3);
  }
  const auto data = toy_set(6, 2, arch.input);
  FinetuneConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 6;  // one step covering the whole set
  cfg.lr = 0.05;
  cfg.weight_decay = 0.01;
  cfg.momentum = 0.9;
  cfg.alpha = 2.0;

  // Hand oracle: gradient of mean(CE + alpha * sum q (log q - log f)) then one Nesterov step.
  auto oracle = model::clone_classifier(student);
  const auto f_probs = torch::softmax(teacher->forward(data.images), 1).detach();
  const auto logits = oracle->forward(data.images);
  const auto log_q = torch::log_softmax(logits, 1);
  const auto q = log_q.exp();
  const auto ce = -log_q.gather(1, data.labels.unsqueeze(1)).squeeze(1);
  const auto kl = (q * (log_q - f_probs.log())).sum(1);
  (ce + cfg.alpha * kl).mean().backward();
  std::map<std::string, torch::Tensor> expect;
  for (const auto& p : oracle->named_parameters()) {
    const auto g = p.value().grad() + cfg.weight_decay * p.value().detach();
    const auto buf = g;  // first step: momentum buffer = gradient
    const auto step = g + cfg.momentum * buf;
    expect[p.key()] = p.value().detach() - cfg.lr * step;
  }

  const auto teacher_before = model::snapshot_state(*teacher);
  finetune::finetune(student, teacher, data, cfg, 9);
  for (const auto& p : student->named_parameters()) {
    EXPECT_TRUE(torch::allclose(p.value(), expect.at(p.key()), 1e-5, 1e-7)) << p.key();
  }
  for (const auto& [k, v] : model::snapshot_state(*teacher)) EXPECT_TRUE(torch::equal(v, teacher_before.at(k)));
}

TEST(Finetune, TeacherUntouchedAndRunsAreDeterministic) {
  torch::manual_seed(5);
  auto f = model::make_classifier({"plain_cnn", 10, {3, 16, 16}, 4});
  f->eval();
  const auto f_before = model::snapshot_state(*f);
  const auto data = toy_set(16, 10, {3, 16, 16});
  FinetuneConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.lr = 1e-3;
  cfg.lr_step = 2;
  auto run = [&] {
    auto q = quant::build_quantized_model(f, 4, 4);
    const auto r = finetune::finetune(q, f, data, cfg, 77);
    return std::make_pair(model::snapshot_state(*q), r);
  };
  const auto [a, ra] = run();
  const auto [b, rb] = run();
  for (const auto& [k, v] : a) EXPECT_TRUE(torch::equal(v, b.at(k))) << k;
  EXPECT_EQ(ra.epoch_loss, rb.epoch_loss);
  EXPECT_EQ(ra.epoch_lr, (std::vector<double>{1e-3, 1e-3, 1e-4}));
  for (const auto& [k, v] : model::snapshot_state(*f)) EXPECT_TRUE(torch::equal(v, f_before.at(k))) << k;
}

TEST(Finetune, CalibratesActivationsAndWritesCheckpoints) {
  torch::manual_seed(6);
  auto f = model::make_classifier({"plain_cnn", 10, {3, 16, 16}, 4});
  auto q = quant::build_quantized_model(f, 4, 4);
  const auto dir = std::filesystem::temp_directory_path() / "intraq_test_ft_ckpt";
  std::filesystem::remove_all(dir);
  FinetuneConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.lr_step = 2;
  const CheckpointPolicy policy{dir, "feedbeef"};
  const auto r = finetune::finetune(q, f, toy_set(16, 10, {3, 16, 16}), cfg, 3, &policy);
  for (auto& a : q->activation_quantizers()) EXPECT_TRUE(a->calibrated());
  ASSERT_EQ(r.checkpoints.size(), 2u);
  EXPECT_EQ(r.checkpoints[0].filename(), "q_epoch2_feedbeef.pt");
  EXPECT_EQ(r.checkpoints[1].filename(), "q_epoch3_feedbeef.pt");
  model::CheckpointMeta meta;
  model::load_checkpoint(r.checkpoints[1], &meta);
  EXPECT_EQ(meta.extra.at("config_hash"), "feedbeef");
  EXPECT_EQ(meta.extra.at("epoch"), "3");
}

TEST(Finetune, ActivationRangesFreezeAfterCalibrationEpochs) {
  torch::manual_seed(7);
  auto f = model::make_classifier({"plain_cnn", 10, {3, 16, 16}, 4});
  auto q = quant::build_quantized_model(f, 4, 4);
  FinetuneConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  const auto data = toy_set(16, 10, {3, 16, 16});
  finetune::finetune(q, f, data, cfg, 3);
  std::vector<quant::QuantSpec> after_first;
  for (auto& a : q->activation_quantizers()) after_first.push_back(a->spec());
  cfg.calibration_epochs = 0;
  finetune::finetune(q, f, data, cfg, 4);
  const auto acts = q->activation_quantizers();
  for (std::size_t i = 0; i < acts.size(); ++i) EXPECT_EQ(acts[i]->spec(), after_first[i]);
}

TEST(Evaluate, PerfectAndAdversarialLabels) {
  const auto logits = torch::tensor({{2.0, 0.0}, {0.0, 3.0}, {1.0, -1.0}});
  EXPECT_EQ(top1_from_logits(logits, torch::tensor({0, 1, 0})), 1.0);
  EXPECT_EQ(top1_from_logits(logits, torch::tensor({1, 0, 1})), 0.0);
}

TEST(Evaluate, TenSampleManualCount) {
  torch::manual_seed(8);
  const auto logits = torch::randn({10, 4});
  const auto labels = torch::randint(0, 4, {10}, torch::kInt64);
  int correct = 0;
  for (int i = 0; i < 10; ++i) {
    int best = 0;
    for (int k = 1; k < 4; ++k)
      if (logits[i][k].item<float>() > logits[i][best].item<float>()) best = k;
    correct += best == labels[i].item<std::int64_t>();
  }
  EXPECT_DOUBLE_EQ(top1_from_logits(logits, labels), correct / 10.0);
}

TEST(Evaluate, ModelAccuracyAndEmptySet) {
  torch::manual_seed(9);
  auto m = model::make_classifier({"plain_cnn", 10, {3, 16, 16}, 4});
  m->eval();
  const auto x = torch::randn({12, 3, 16, 16});
  const auto pred = m->forward(x).argmax(1);
  EXPECT_EQ(evaluate_top1(m, x, pred, 5), 1.0);
  EXPECT_EQ(evaluate_top1(m, x, (pred + 1).remainder(10), 5), 0.0);
  EXPECT_THROW(evaluate_top1(m, torch::empty({0, 3, 16, 16}), torch::empty({0}, torch::kInt64)), InputError);
}

TEST(FinetuneConfig, Validation) {
  FinetuneConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.lr = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.epochs = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
}
