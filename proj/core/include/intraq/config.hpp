// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "intraq/finetune.hpp"
#include "intraq/model.hpp"
#include "intraq/quant.hpp"
#include "intraq/synthesis.hpp"

namespace intraq::config {

struct QuantConfig {
  int weight_bits = 4;
  int act_bits = 4;
  quant::Granularity weight_granularity = quant::Granularity::per_channel;
  quant::CalibrationMode act_calibration = quant::CalibrationMode::ema_minmax;
};

struct PretrainConfig {
  std::int64_t epochs = 10;
  std::int64_t batch_size = 128;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double accuracy_floor = 0.85;
};

struct DataConfig {
  std::int64_t train_size = 10000;
  std::int64_t val_size = 2000;
  std::uint64_t seed = 1234;
};

struct DiagnoseConfig {
  std::vector<std::int64_t> classes{0, 1, 2, 3, 4};
  std::int64_t per_class = 200;
};

/// Every knob of an experiment. Keys in the config file mirror the field
/// paths, e.g. `synthesis.lambda_l` or `finetune.epochs`.
struct ExperimentConfig {
  model::ArchConfig arch;
  std::filesystem::path train_data = "data/train.iqset";
  std::filesystem::path val_data = "data/val.iqset";
  std::filesystem::path model_checkpoint = "runs/reference.pt";
  std::filesystem::path output_dir = "runs/default";
  QuantConfig quant;
  synthesis::SynthesisConfig synthesis;
  finetune::FinetuneConfig finetune;
  PretrainConfig pretrain;
  DataConfig data;
  DiagnoseConfig diagnose;
  std::uint64_t seed = 0;
  std::int64_t total_synthetic_images = 5120;

  /// Where synthesize writes and finetune/diagnose read the synthetic set.
  std::filesystem::path synthetic_path() const { return output_dir / "synthetic.iqset"; }

  void validate() const;
};

/// Applies one `key = value` setting; throws ConfigError on unknown keys.
void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value);

/// Parses keyed text: `key = value` lines, `#` comments, blank lines.
ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {});
ExperimentConfig load_config(const std::filesystem::path& path);

/// All keys in sorted order with their current values.
std::map<std::string, std::string> to_settings(const ExperimentConfig& cfg);
std::string to_text(const ExperimentConfig& cfg);

/// 16 hex digits (FNV-1a 64) of to_text(); identifies the config in artifacts.
std::string config_hash(const ExperimentConfig& cfg);

}  // namespace intraq::config
