// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "intraq/config.hpp"
#include "intraq/diagnostics.hpp"
#include "intraq/finetune.hpp"
#include "intraq/model.hpp"
#include "intraq/synthesis.hpp"

namespace intraq::pipeline {

/// Keyed text record, one `key = value` line per entry, keys sorted.
struct Summary {
  std::map<std::string, std::string> fields;

  void set(const std::string& key, const std::string& value) { fields[key] = value; }
  void set(const std::string& key, double value);
  std::string text() const;
};

Summary parse_summary(const std::string& text);

/// Artifact locations under cfg.output_dir.
struct Artifacts {
  explicit Artifacts(const config::ExperimentConfig& cfg);

  std::filesystem::path bn_stats;
  std::filesystem::path synthetic;
  std::filesystem::path synthetic_partial;
  std::filesystem::path quantized;
  std::filesystem::path quantized_partial;
  std::filesystem::path features;
  std::filesystem::path heterogeneity;
  std::filesystem::path summary;
  std::filesystem::path checkpoints;
};

/// Writes the train and validation splits of the procedural shapes dataset.
void make_data(const config::ExperimentConfig& cfg);

struct PretrainResult {
  model::Classifier model{nullptr};
  double val_top1 = 0.0;
  std::vector<double> epoch_loss;  // eval-mode training loss after each epoch, index 0 = before training
  bool below_floor = false;
};

/// Trains a fresh BN-bearing classifier with SGD (momentum, cosine lr) on
/// labelled images and reports validation accuracy. epochs = 0 returns the
/// seeded random initialization.
PretrainResult pretrain_reference(const config::ExperimentConfig& cfg, const synthesis::SyntheticImageSet& train,
                                  const synthesis::SyntheticImageSet& val);

// Subcommands. Each reads its inputs from the paths in cfg, writes its
// artifacts under cfg.output_dir and returns a summary of what it did.
Summary run_pretrain(const config::ExperimentConfig& cfg);
Summary run_capture_stats(const config::ExperimentConfig& cfg);
Summary run_synthesize(const config::ExperimentConfig& cfg);
Summary run_finetune(const config::ExperimentConfig& cfg);
Summary run_evaluate(const config::ExperimentConfig& cfg);
Summary run_diagnose(const config::ExperimentConfig& cfg);

/// capture-stats -> synthesize -> finetune -> evaluate -> diagnose. A failing
/// stage raises StageError naming it; artifacts written so far are kept.
/// The summary holds accuracies and heterogeneity, never timings, so equal
/// configs give byte-identical summaries.
Summary run_pipeline(const config::ExperimentConfig& cfg);

}  // namespace intraq::pipeline
