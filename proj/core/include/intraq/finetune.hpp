// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "intraq/errors.hpp"
#include "intraq/model.hpp"
#include "intraq/synthesis.hpp"

namespace intraq::finetune {

/// Fine-tuning hyperparameters. Defaults are the ImageNet settings.
struct FinetuneConfig {
  double alpha = 20.0;  // weight of the distillation term
  std::int64_t epochs = 150;
  std::int64_t batch_size = 16;
  double lr = 1e-6;
  std::int64_t lr_step = 100;  // epochs between decays
  double lr_decay = 0.1;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  bool nesterov = true;
  /// Epochs during which activation quantizers keep updating their ranges.
  std::int64_t calibration_epochs = 1;

  void validate() const;
};

inline constexpr double kProbFloor = 1e-12;

/// Sum_i p_i log(p_i / q_i) with both arguments floored at kProbFloor.
double kl_divergence(std::span<const double> p, std::span<const double> q);

/// ce(q, label) + alpha * kl(q || f) for one image.
double finetune_loss(std::span<const double> q_probs, std::span<const double> f_probs, std::int64_t label,
                     double alpha);

/// Batch mean of finetune_loss, differentiable in the student logits.
torch::Tensor finetune_loss_batch(const torch::Tensor& q_logits, const torch::Tensor& f_probs,
                                  const torch::Tensor& labels, double alpha);

/// Step-decayed learning rate of a 0-based epoch.
double lr_at_epoch(const FinetuneConfig& cfg, std::int64_t epoch);

struct CheckpointPolicy {
  std::filesystem::path directory;
  std::string config_hash;
};

std::filesystem::path checkpoint_path(const CheckpointPolicy& policy, std::int64_t epoch);

struct FinetuneResult {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_lr;
  std::vector<std::filesystem::path> checkpoints;
};

/// The student diverged; it has been restored to the last finished epoch.
class FinetuneAborted : public NumericError {
 public:
  FinetuneAborted(std::int64_t epoch, const std::string& what)
      : NumericError("fine-tuning aborted in epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch) {}
  std::int64_t epoch() const noexcept { return epoch_; }

 private:
  std::int64_t epoch_;
};

/// SGD (Nesterov momentum, weight decay, step-decayed lr) on the quantized
/// student with cross-entropy against the set's labels plus distillation from
/// the frozen teacher. The teacher is never updated. When `checkpoints` is
/// given, the student is saved every lr_step epochs and at completion.
FinetuneResult finetune(model::Classifier& student, model::Classifier& teacher,
                        const synthesis::SyntheticImageSet& data, const FinetuneConfig& cfg, std::uint64_t seed,
                        const CheckpointPolicy* checkpoints = nullptr);

double top1_from_logits(const torch::Tensor& logits, const torch::Tensor& labels);

/// Fraction of images whose argmax prediction equals the label (eval mode).
double evaluate_top1(model::Classifier& model, const torch::Tensor& images, const torch::Tensor& labels,
                     std::int64_t batch_size = 256);

}  // namespace intraq::finetune
