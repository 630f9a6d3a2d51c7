// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "intraq/errors.hpp"
#include "intraq/model.hpp"

namespace intraq::synthesis {

using Rng = std::mt19937_64;

struct LossToggles {
  bool bns = true;
  bool mdc = true;
  bool sil = true;
  bool hard_il = false;

  bool operator==(const LossToggles&) const = default;
};

/// Hyperparameters of image synthesis. Defaults are the ImageNet settings.
struct SynthesisConfig {
  double eta = 0.5;        // minimum crop scale (side length fraction)
  double crop_prob = 0.5;  // probability of cropping an image in an iteration
  double lambda_l = 0.3;   // lower cosine-distance margin
  double lambda_u = 0.8;   // upper cosine-distance margin
  double epsilon = 0.9;    // soft targets are drawn from U(epsilon, 1)
  std::int64_t iterations = 1000;
  std::int64_t batch_size = 256;
  double lr = 0.5;
  double lr_decay = 0.1;
  std::int64_t plateau_patience = 50;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  LossToggles toggles;

  bool uses_labels() const noexcept { return toggles.sil || toggles.hard_il || toggles.mdc; }
  /// Throws ConfigError on any violated constraint.
  void validate() const;
};

/// Optimized images plus the per-image prior label and soft target.
struct SyntheticImageSet {
  torch::Tensor images;        // [N, C, H, W] float32, unconstrained
  torch::Tensor labels;        // [N] int64
  torch::Tensor soft_targets;  // [N] float32, in [epsilon, 1]
  std::vector<std::int64_t> rounds;  // generation round of each image
  std::int64_t num_classes = 0;

  std::int64_t size() const { return images.defined() ? images.size(0) : 0; }
  void append(const SyntheticImageSet& other);
  /// Checks labels and soft targets against the invariants; throws InputError.
  void validate(double epsilon = 0.0) const;
};

/// Per-class feature collections with incrementally maintained means.
///
/// Centers are running means updated in double precision on every append;
/// the bank is append-only.
class ClassCenterBank {
 public:
  ClassCenterBank(std::int64_t num_classes, std::int64_t dim);

  void append(const model::FeatureVector& feature);
  void append(const torch::Tensor& features, const torch::Tensor& labels);

  std::int64_t num_classes() const noexcept { return static_cast<std::int64_t>(members_.size()); }
  std::int64_t dim() const noexcept { return dim_; }
  std::size_t count(std::int64_t c) const { return members_.at(static_cast<std::size_t>(c)).size(); }
  std::size_t total() const noexcept;
  const std::vector<model::FeatureVector>& members(std::int64_t c) const {
    return members_.at(static_cast<std::size_t>(c));
  }
  /// Mean of the stored vectors of class c; empty when the class has none.
  const std::vector<double>& center(std::int64_t c) const { return centers_.at(static_cast<std::size_t>(c)); }

  /// [K, D] centers (zeros for empty classes) and a [K] bool mask of
  /// non-empty classes; a frozen view for one synthesis round.
  std::pair<torch::Tensor, torch::Tensor> snapshot() const;

 private:
  std::int64_t dim_;
  std::vector<std::vector<model::FeatureVector>> members_;
  std::vector<std::vector<double>> centers_;
};

struct CropRecord {
  bool applied = false;
  std::int64_t top = 0;
  std::int64_t left = 0;
  std::int64_t height = 0;  // patch size in pixels
  std::int64_t width = 0;
  double scale = 1.0;
};

/// Draws the crop decision for one image of size height x width.
CropRecord sample_crop(std::int64_t height, std::int64_t width, const SynthesisConfig& cfg, Rng& rng);

/// Crops `image` ([C, H, W]) per `record` and resizes the patch back to H x W
/// with bilinear interpolation (no corner alignment). Gradients reach only the
/// pixels inside the patch.
torch::Tensor apply_crop(const torch::Tensor& image, const CropRecord& record);

std::pair<torch::Tensor, CropRecord> local_object_reinforcement(const torch::Tensor& image,
                                                                const SynthesisConfig& cfg, Rng& rng);

/// Sum over BN layers of squared L2 distances between batch and running
/// means and between batch and running variances.
torch::Tensor bns_loss(const model::BatchStats& stats, const model::BNStatsProfile& profile);

double cosine_distance(std::span<const double> a, std::span<const double> b);
/// max(lambda_l - d, 0) + max(d - lambda_u, 0)
double mdc_hinge(double distance, double lambda_l, double lambda_u);
double mdc_loss(const model::FeatureVector& feature, const ClassCenterBank& bank, const SynthesisConfig& cfg);
/// Batch mean of the hinge against frozen centers; images whose class has no
/// center contribute 0.
torch::Tensor mdc_loss_batch(const torch::Tensor& features, const torch::Tensor& labels, const torch::Tensor& centers,
                             const torch::Tensor& has_center, const SynthesisConfig& cfg);

double soft_inception_loss(std::span<const double> probs, std::int64_t label, double soft_target);
torch::Tensor soft_inception_loss_batch(const torch::Tensor& probs, const torch::Tensor& labels,
                                        const torch::Tensor& soft_targets);

inline constexpr double kProbFloor = 1e-12;
double hard_inception_loss(std::span<const double> probs, std::int64_t label);
torch::Tensor hard_inception_loss_batch(const torch::Tensor& probs, const torch::Tensor& labels);

struct GenerationLoss {
  torch::Tensor total;
  double bns = 0.0;
  double mdc = 0.0;
  double sil = 0.0;
  double hard_il = 0.0;
};

/// Unweighted sum of the enabled loss terms on one forward pass.
GenerationLoss generation_loss(const model::ForwardOutput& out, const torch::Tensor& labels,
                               const torch::Tensor& soft_targets, const model::BNStatsProfile& profile,
                               const torch::Tensor& centers, const torch::Tensor& has_center,
                               const SynthesisConfig& cfg);

GenerationLoss generation_loss(model::Classifier& model, const torch::Tensor& views, const torch::Tensor& labels,
                               const torch::Tensor& soft_targets, const model::BNStatsProfile& profile,
                               const ClassCenterBank& bank, const SynthesisConfig& cfg);

/// Multiplies the step size by `decay` once the loss has failed to improve
/// on its best value for more than `patience` consecutive observations.
/// An observation improves when loss < best * (1 - threshold).
class PlateauSchedule {
 public:
  PlateauSchedule(double initial_lr, double decay, std::int64_t patience, double threshold = 1e-4);

  /// Feeds one loss value; returns the step size for the next update.
  double observe(double loss);
  double lr() const noexcept { return lr_; }
  std::int64_t decays() const noexcept { return decays_; }

 private:
  double lr_;
  double decay_;
  std::int64_t patience_;
  double threshold_;
  double best_;
  std::int64_t bad_ = 0;
  std::int64_t decays_ = 0;
};

/// Thrown when the generation loss becomes non-finite; carries a snapshot.
class SynthesisAborted : public NumericError {
 public:
  SynthesisAborted(std::int64_t round, std::int64_t iteration, const std::string& snapshot)
      : NumericError("synthesis round " + std::to_string(round) + " aborted at iteration " +
                     std::to_string(iteration) + ": " + snapshot),
        round_(round),
        iteration_(iteration) {}

  std::int64_t round() const noexcept { return round_; }
  std::int64_t iteration() const noexcept { return iteration_; }

 private:
  std::int64_t round_;
  std::int64_t iteration_;
};

struct RoundResult {
  SyntheticImageSet set;
  std::vector<double> loss_trace;  // generation loss per iteration
  std::vector<double> lr_trace;    // step size used at each iteration
};

/// Class-balanced labels: (offset + i) mod num_classes.
torch::Tensor round_robin_labels(std::int64_t count, std::int64_t num_classes, std::int64_t offset = 0);

/// Optimizes one batch of Gaussian-noise images against the generation loss
/// with Adam and plateau decay, then appends the finished images' uncropped
/// features to `bank`. The bank is read only through a snapshot taken at the
/// start of the round.
///
/// When the config uses no label-driven term, the returned labels are the
/// model's argmax predictions on the finished images.
RoundResult synthesize_round(model::Classifier& model, const model::BNStatsProfile& profile, ClassCenterBank& bank,
                             const SynthesisConfig& cfg, const torch::Tensor& labels, Rng& rng,
                             std::int64_t round_id = 0);

using RoundCallback = std::function<void(std::int64_t round, const RoundResult&)>;

/// Runs total / batch_size rounds with round-robin labels.
SyntheticImageSet synthesize_set(model::Classifier& model, const model::BNStatsProfile& profile,
                                 ClassCenterBank& bank, const SynthesisConfig& cfg, std::int64_t total_images,
                                 Rng& rng, const RoundCallback& on_round = {});

}  // namespace intraq::synthesis
