// SPDX-License-Identifier: Apache-2.0
#include "intraq/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <iostream>
#include <numbers>
#include <sstream>

#include "intraq/access_log.hpp"
#include "intraq/errors.hpp"
#include "intraq/image_set_io.hpp"
#include "intraq/quantize_model.hpp"
#include "intraq/shapes_dataset.hpp"

namespace intraq::pipeline {

namespace fs = std::filesystem;

void Summary::set(const std::string& key, double value) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", value);
  fields[key] = buf;
}

std::string Summary::text() const {
  std::string out;
  for (const auto& [k, v] : fields) out += k + " = " + v + "\n";
  return out;
}

Summary parse_summary(const std::string& text) {
  Summary s;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    s.fields[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return s;
}

Artifacts::Artifacts(const config::ExperimentConfig& cfg)
    : bn_stats(cfg.output_dir / "bn_stats.tsv"),
      synthetic(cfg.synthetic_path()),
      synthetic_partial(cfg.output_dir / "synthetic.partial.iqset"),
      quantized(cfg.output_dir / "quantized.pt"),
      quantized_partial(cfg.output_dir / "quantized.partial.pt"),
      features(cfg.output_dir / "features.iqfeat"),
      heterogeneity(cfg.output_dir / "heterogeneity.txt"),
      summary(cfg.output_dir / "summary.txt"),
      checkpoints(cfg.output_dir / "checkpoints") {}

namespace {

constexpr std::uint64_t kFinetuneStream = 1;
constexpr std::uint64_t kDiagnoseStream = 2;
constexpr std::uint64_t kPretrainStream = 3;

void log(const std::string& msg) { std::clog << "[intraq] " << msg << std::endl; }

model::Classifier load_reference(const config::ExperimentConfig& cfg) {
  model::CheckpointMeta meta;
  auto f = model::load_checkpoint(cfg.model_checkpoint, &meta);
  if (meta.arch.num_classes != cfg.arch.num_classes) {
    throw ConfigError("checkpoint has " + std::to_string(meta.arch.num_classes) + " classes, config says " +
                      std::to_string(cfg.arch.num_classes));
  }
  f->eval();
  return f;
}

std::int64_t feature_dim(model::Classifier& m) {
  const auto lin = m->linears();
  if (lin.empty()) throw StructuralError("model has no linear classifier");
  return lin.back()->linear->options.in_features();
}

synthesis::SyntheticImageSet subset(const synthesis::SyntheticImageSet& set, const std::vector<std::int64_t>& idx) {
  const auto index = torch::tensor(idx, torch::kInt64);
  synthesis::SyntheticImageSet out;
  out.images = set.images.index_select(0, index);
  out.labels = set.labels.index_select(0, index);
  out.soft_targets = set.soft_targets.index_select(0, index);
  for (auto i : idx) out.rounds.push_back(set.rounds.empty() ? 0 : set.rounds[static_cast<std::size_t>(i)]);
  out.num_classes = set.num_classes;
  return out;
}

template <class Fn>
auto stage(const std::string& name, Fn&& fn) {
  log("stage " + name);
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

}  // namespace

void make_data(const config::ExperimentConfig& cfg) {
  const auto side = cfg.arch.input.height;
  if (cfg.arch.input.width != side || cfg.arch.input.channels != 3 || cfg.arch.num_classes != data::kShapeClasses) {
    throw ConfigError("the shapes dataset is square RGB with 10 classes");
  }
  const auto hash = config::config_hash(cfg);
  io::write_image_set(cfg.train_data, data::make_shapes_dataset(cfg.data.train_size, cfg.data.seed, side), hash);
  io::write_image_set(cfg.val_data, data::make_shapes_dataset(cfg.data.val_size, cfg.data.seed + 1, side), hash);
}

PretrainResult pretrain_reference(const config::ExperimentConfig& cfg, const synthesis::SyntheticImageSet& train,
                                  const synthesis::SyntheticImageSet& val) {
  if (train.size() == 0) throw InputError("pretraining needs at least one labelled image");
  const auto& p = cfg.pretrain;
  torch::manual_seed(cfg.seed);
  PretrainResult out;
  out.model = model::make_classifier(cfg.arch);
  auto& m = out.model;

  auto mean_loss = [&] {
    torch::NoGradGuard guard;
    m->eval();
    double total = 0.0;
    for (std::int64_t s = 0; s < train.size(); s += p.batch_size) {
      const auto e = std::min(train.size(), s + p.batch_size);
      const auto logits = m->forward(train.images.slice(0, s, e));
      total += torch::cross_entropy_loss(logits, train.labels.slice(0, s, e), {}, at::Reduction::Sum).item<double>();
    }
    return total / static_cast<double>(train.size());
  };
  out.epoch_loss.push_back(mean_loss());

  torch::optim::SGD opt(m->parameters(),
                        torch::optim::SGDOptions(p.lr).momentum(p.momentum).weight_decay(p.weight_decay).nesterov(true));
  const std::int64_t steps_per_epoch = (train.size() + p.batch_size - 1) / p.batch_size;
  const double total_steps = static_cast<double>(steps_per_epoch * p.epochs);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(cfg.seed + kPretrainStream);
  std::int64_t step = 0;
  for (std::int64_t epoch = 0; epoch < p.epochs; ++epoch) {
    m->train();
    const auto perm = torch::randperm(train.size(), gen, torch::kInt64);
    for (std::int64_t s = 0; s < train.size(); s += p.batch_size, ++step) {
      const double lr = 0.5 * p.lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total_steps));
      for (auto& g : opt.param_groups()) static_cast<torch::optim::SGDOptions&>(g.options()).lr(lr);
      const auto idx = perm.slice(0, s, std::min(train.size(), s + p.batch_size));
      const auto x = train.images.index_select(0, idx);
      const auto y = train.labels.index_select(0, idx);
      opt.zero_grad();
      const auto loss = torch::cross_entropy_loss(m->forward(x), y);
      loss.backward();
      opt.step();
    }
    out.epoch_loss.push_back(mean_loss());
    log("pretrain epoch " + std::to_string(epoch + 1) + " loss " + std::to_string(out.epoch_loss.back()));
  }
  m->eval();
  out.val_top1 = val.size() > 0 ? finetune::evaluate_top1(m, val.images, val.labels) : 0.0;
  out.below_floor = out.val_top1 < p.accuracy_floor;
  return out;
}

Summary run_pretrain(const config::ExperimentConfig& cfg) {
  cfg.validate();
  const auto train = io::read_image_set(cfg.train_data);
  const auto val = io::read_image_set(cfg.val_data);
  auto result = pretrain_reference(cfg, train, val);
  Summary s;
  s.set("config_hash", config::config_hash(cfg));
  s.set("f_top1", result.val_top1);
  s.set("pretrain_initial_loss", result.epoch_loss.front());
  s.set("pretrain_final_loss", result.epoch_loss.back());
  if (result.below_floor) {
    s.set("warning", "reference accuracy below floor " + std::to_string(cfg.pretrain.accuracy_floor));
    log("warning: reference accuracy " + std::to_string(result.val_top1) + " is below the floor");
  }
  model::save_checkpoint(result.model, cfg.model_checkpoint,
                         {{"config_hash", config::config_hash(cfg)}, {"f_top1", s.fields.at("f_top1")}});
  return s;
}

Summary run_capture_stats(const config::ExperimentConfig& cfg) {
  cfg.validate();
  auto f = load_reference(cfg);
  const auto profile = model::capture_bn_profile(f);
  const auto hash = config::config_hash(cfg);
  std::ostringstream out;
  out << "# config_hash = " << hash << "\n" << "layer\tchannel\trunning_mean\trunning_var\n";
  std::int64_t channels = 0;
  for (const auto& layer : profile.layers) {
    const auto mean = layer.running_mean.to(torch::kFloat64).contiguous();
    const auto var = layer.running_var.to(torch::kFloat64).contiguous();
    for (std::int64_t c = 0; c < mean.numel(); ++c) {
      char buf[96];
      std::snprintf(buf, sizeof(buf), "\t%lld\t%.9g\t%.9g\n", static_cast<long long>(c), mean.data_ptr<double>()[c],
                    var.data_ptr<double>()[c]);
      out << layer.name << buf;
    }
    channels += mean.numel();
  }
  io::write_file(Artifacts(cfg).bn_stats, out.str());
  Summary s;
  s.set("config_hash", hash);
  s.set("bn_layers", std::to_string(profile.layers.size()));
  s.set("bn_channels", std::to_string(channels));
  return s;
}

Summary run_synthesize(const config::ExperimentConfig& cfg) {
  cfg.validate();
  const Artifacts art(cfg);
  const auto hash = config::config_hash(cfg);
  Summary s;
  s.set("config_hash", hash);
  s.set("synthetic_images", std::to_string(cfg.total_synthetic_images));
  if (cfg.total_synthetic_images == 0) return s;

  auto f = load_reference(cfg);
  const auto profile = model::capture_bn_profile(f);
  synthesis::ClassCenterBank bank(cfg.arch.num_classes, feature_dim(f));
  synthesis::Rng rng(cfg.seed);
  torch::manual_seed(cfg.seed);
  synthesis::SyntheticImageSet partial;
  double last_loss = 0.0;
  synthesis::SyntheticImageSet set;
  try {
    set = synthesis::synthesize_set(f, profile, bank, cfg.synthesis, cfg.total_synthetic_images, rng,
                                    [&](std::int64_t round, const synthesis::RoundResult& r) {
                                      partial.append(r.set);
                                      last_loss += r.loss_trace.empty() ? 0.0 : r.loss_trace.back();
                                      log("synthesis round " + std::to_string(round) + " final loss " +
                                          std::to_string(r.loss_trace.empty() ? 0.0 : r.loss_trace.back()));
                                    });
  } catch (...) {
    if (partial.size() > 0) io::write_image_set(art.synthetic_partial, partial, hash);
    throw;
  }
  io::write_image_set(art.synthetic, set, hash);
  const auto rounds = cfg.total_synthetic_images / cfg.synthesis.batch_size;
  s.set("synthesis_final_loss", last_loss / static_cast<double>(rounds));
  return s;
}

Summary run_finetune(const config::ExperimentConfig& cfg) {
  cfg.validate();
  const Artifacts art(cfg);
  const auto hash = config::config_hash(cfg);
  auto f = load_reference(cfg);
  auto q = quant::build_quantized_model(f, cfg.quant.weight_bits, cfg.quant.act_bits, cfg.quant.weight_granularity,
                                        cfg.quant.act_calibration);
  Summary s;
  s.set("config_hash", hash);
  synthesis::SyntheticImageSet set;
  if (cfg.total_synthetic_images > 0) set = io::read_image_set(art.synthetic);
  torch::manual_seed(cfg.seed + kFinetuneStream);
  if (cfg.finetune.epochs > 0) {
    const finetune::CheckpointPolicy policy{art.checkpoints, hash};
    try {
      const auto result = finetune::finetune(q, f, set, cfg.finetune, cfg.seed + kFinetuneStream, &policy);
      s.set("finetune_final_loss", result.epoch_loss.back());
    } catch (const finetune::FinetuneAborted&) {
      model::save_checkpoint(q, art.quantized_partial, {{"config_hash", hash}});
      throw;
    }
  } else if (set.size() > 0) {
    quant::calibrate_activations(q, set.images, cfg.finetune.batch_size);
  }
  bool calibrated = true;
  for (auto& a : q->activation_quantizers()) calibrated = calibrated && (!a->enabled() || a->calibrated());
  s.set("act_calibrated", calibrated ? "true" : "false");
  q->eval();
  model::save_checkpoint(q, art.quantized, {{"config_hash", hash}});
  return s;
}

Summary run_evaluate(const config::ExperimentConfig& cfg) {
  cfg.validate();
  const auto val = io::read_image_set(cfg.val_data);
  if (val.size() == 0) throw InputError("validation set is empty");
  auto q = model::load_checkpoint(Artifacts(cfg).quantized);
  auto f = load_reference(cfg);
  Summary s;
  s.set("config_hash", config::config_hash(cfg));
  s.set("q_top1", finetune::evaluate_top1(q, val.images, val.labels));
  s.set("f_top1", finetune::evaluate_top1(f, val.images, val.labels));
  return s;
}

Summary run_diagnose(const config::ExperimentConfig& cfg) {
  cfg.validate();
  const Artifacts art(cfg);
  const auto hash = config::config_hash(cfg);
  auto f = load_reference(cfg);
  const auto set = io::read_image_set(art.synthetic);
  auto classes = cfg.diagnose.classes;
  if (classes.empty()) {
    for (std::int64_t k = 0; k < cfg.arch.num_classes; ++k) classes.push_back(k);
  }
  std::mt19937_64 rng(cfg.seed + kDiagnoseStream);
  const auto idx = diagnostics::sample_per_class(set.labels, classes, cfg.diagnose.per_class, rng);
  if (idx.empty()) throw InputError("no synthetic image belongs to the diagnosed classes");
  const auto picked = subset(set, idx);
  const auto matrix = diagnostics::export_features(f, picked.images, picked.labels, art.features);
  std::vector<model::FeatureVector> features(static_cast<std::size_t>(matrix.count));
  for (std::int64_t i = 0; i < matrix.count; ++i) {
    const auto* row = matrix.values.data() + i * matrix.dim;
    features[static_cast<std::size_t>(i)] = {std::vector<float>(row, row + matrix.dim),
                                             matrix.labels[static_cast<std::size_t>(i)]};
  }
  const auto report = diagnostics::intra_class_distance(features);
  io::write_file(art.heterogeneity,
                 "config_hash = " + hash + "\n" + diagnostics::format_report(report) + diagnostics::report_table(report));
  Summary s;
  s.set("config_hash", hash);
  s.set("intra_class_mean", report.overall_mean);
  s.set("diagnosed_images", std::to_string(matrix.count));
  return s;
}

Summary run_pipeline(const config::ExperimentConfig& cfg) {
  stage("config", [&] {
    cfg.validate();
    return 0;
  });
  const bool empty = cfg.total_synthetic_images == 0 && cfg.finetune.epochs == 0;
  Summary out;
  out.set("config_hash", config::config_hash(cfg));
  auto merge = [&](const Summary& s, std::initializer_list<const char*> keys) {
    for (const char* k : keys) {
      if (const auto it = s.fields.find(k); it != s.fields.end()) out.set(k, it->second);
    }
  };
  const auto stats = stage("capture-stats", [&] { return run_capture_stats(cfg); });
  const auto synth = stage("synthesize", [&] { return run_synthesize(cfg); });
  const auto tuned = stage("finetune", [&] { return run_finetune(cfg); });
  const auto eval = stage("evaluate", [&] { return run_evaluate(cfg); });
  merge(eval, {"q_top1"});
  if (!empty) {
    merge(eval, {"f_top1"});
    merge(stats, {"bn_layers"});
    merge(synth, {"synthetic_images", "synthesis_final_loss"});
    merge(tuned, {"finetune_final_loss", "act_calibrated"});
    if (cfg.total_synthetic_images > 0) {
      const auto diag = stage("diagnose", [&] { return run_diagnose(cfg); });
      merge(diag, {"intra_class_mean"});
    }
  }
  io::write_file(Artifacts(cfg).summary, out.text());
  return out;
}

}  // namespace intraq::pipeline
