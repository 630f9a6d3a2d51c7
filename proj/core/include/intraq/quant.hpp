// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace intraq::quant {

enum class Granularity { per_tensor, per_channel };
enum class CalibrationMode { minmax, ema_minmax };

/// Half-width used to open up a degenerate (constant) calibration range.
inline constexpr double kDegenerateHalfWidth = 1e-8;
inline constexpr double kEmaDecay = 0.9;
/// Bit-width that means "leave this tensor in floating point".
inline constexpr int kFullPrecisionBits = 32;

/// Asymmetric uniform quantizer parameters for one tensor.
///
/// Holds one (lower, upper, scale) triple for per-tensor specs and one per
/// output channel (dim 0) for per-channel specs. The scale is always derived
/// from the bounds, s = (u - l) / (2^b - 1).
///
/// Codes are round(clip(x, l, u) / s), rounded half away from zero, and are
/// confined to the 2^b-wide window [round(l / s), round(l / s) + 2^b - 1].
/// The window only bites when u / s lands exactly on a tie; it keeps the
/// level count at 2^b without moving any value by more than s / 2.
class QuantSpec {
 public:
  static QuantSpec per_tensor(int bits, double lower, double upper);
  static QuantSpec per_channel(int bits, std::vector<double> lower, std::vector<double> upper);

  int bits() const noexcept { return bits_; }
  Granularity granularity() const noexcept { return granularity_; }
  std::size_t channels() const noexcept { return lower_.size(); }
  std::int64_t levels() const noexcept { return std::int64_t{1} << bits_; }

  double lower(std::size_t channel = 0) const { return lower_.at(channel); }
  double upper(std::size_t channel = 0) const { return upper_.at(channel); }
  double scale(std::size_t channel = 0) const { return scale_.at(channel); }
  std::int64_t min_code(std::size_t channel = 0) const { return min_code_.at(channel); }
  std::int64_t max_code(std::size_t channel = 0) const { return min_code(channel) + levels() - 1; }

  /// Same bit-width and granularity, new bounds; scale is recomputed.
  QuantSpec with_bounds(std::vector<double> lower, std::vector<double> upper) const;

  bool operator==(const QuantSpec&) const = default;

 private:
  QuantSpec(int bits, Granularity granularity, std::vector<double> lower, std::vector<double> upper);

  int bits_;
  Granularity granularity_;
  std::vector<double> lower_;
  std::vector<double> upper_;
  std::vector<double> scale_;
  std::vector<std::int64_t> min_code_;
};

struct QuantizedTensor {
  torch::Tensor codes;  // int32, same shape as the source tensor
  QuantSpec spec;
  torch::ScalarType source_dtype = torch::kFloat32;
};

double round_half_away(double v);

/// Code of a single value under one channel of `spec`.
std::int64_t quantize_value(double x, const QuantSpec& spec, std::size_t channel = 0);

QuantizedTensor quantize(const torch::Tensor& x, const QuantSpec& spec);
torch::Tensor dequantize(const QuantizedTensor& t);

/// dequantize(quantize(x)) in one pass, with a straight-through gradient:
/// d out / d x = 1 where l <= x <= u and 0 elsewhere.
torch::Tensor fake_quantize(const torch::Tensor& x, const QuantSpec& spec);

/// Per-output-channel minmax spec for a weight tensor (channels on dim 0).
QuantSpec per_channel_minmax(const torch::Tensor& weight, int bits);
QuantSpec per_tensor_minmax(const torch::Tensor& weight, int bits);
QuantSpec weight_minmax(const torch::Tensor& weight, int bits, Granularity granularity);

/// Running (lower, upper) estimate fed one batch at a time.
class RangeTracker {
 public:
  explicit RangeTracker(CalibrationMode mode, double decay = kEmaDecay) : mode_(mode), decay_(decay) {}

  void observe(double batch_min, double batch_max);
  void observe(const torch::Tensor& batch);

  bool empty() const noexcept { return !range_.has_value(); }
  CalibrationMode mode() const noexcept { return mode_; }
  /// Resume from a previously observed range (e.g. restored from a checkpoint).
  void reset(std::pair<double, double> range) { range_ = range; }
  /// Observed range, widened by kDegenerateHalfWidth when it has collapsed.
  std::pair<double, double> range() const;

 private:
  CalibrationMode mode_;
  double decay_;
  std::optional<std::pair<double, double>> range_;
};

/// Fits the bounds of `spec` to a stream of sample batches.
///
/// For per-channel specs every batch must have spec.channels() rows on dim 0
/// and each channel is tracked independently. Throws CalibrationError on an
/// empty stream.
QuantSpec calibrate_bounds(std::span<const torch::Tensor> samples, const QuantSpec& spec,
                           CalibrationMode mode);

/// Per-tensor fake quantizer for layer outputs.
///
/// Disabled (identity) until enable() is called with a low bit-width. While
/// observing, every forward feeds the EMA range tracker; an enabled quantizer
/// that has never observed a batch passes values through unchanged.
class ActivationQuantizerImpl : public torch::nn::Module {
 public:
  ActivationQuantizerImpl();

  torch::Tensor forward(const torch::Tensor& x);

  void enable(int bits);
  int bits() const noexcept { return bits_; }
  bool enabled() const noexcept { return bits_ < kFullPrecisionBits; }
  bool calibrated() const;

  /// Choosing a mode drops any partially tracked range (calibrated state stays).
  void set_calibration(CalibrationMode mode);
  CalibrationMode calibration() const noexcept { return tracker_.mode(); }

  void set_observing(bool on) noexcept { observing_ = on; }
  bool observing() const noexcept { return observing_; }

  /// Current spec; requires calibrated().
  QuantSpec spec() const;

 private:
  int bits_ = kFullPrecisionBits;
  bool observing_ = false;
  RangeTracker tracker_{CalibrationMode::ema_minmax};
  // [lower, upper, calibrated flag]; a buffer so checkpoints carry it.
  torch::Tensor state_;
};
TORCH_MODULE(ActivationQuantizer);

}  // namespace intraq::quant
