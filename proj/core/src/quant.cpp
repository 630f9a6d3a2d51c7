// SPDX-License-Identifier: Apache-2.0
#include "intraq/quant.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "intraq/errors.hpp"

namespace intraq::quant {

namespace {

void check_bounds(double lower, double upper) {
  if (!std::isfinite(lower) || !std::isfinite(upper)) {
    throw ConfigError("quantizer bounds must be finite");
  }
  if (!(upper > lower)) {
    throw ConfigError("quantizer requires upper > lower (got lower=" + std::to_string(lower) +
                      ", upper=" + std::to_string(upper) + ")");
  }
}

template <typename Fn>
void for_each_channel(const torch::Tensor& x, const QuantSpec& spec, Fn&& fn) {
  if (spec.granularity() == Granularity::per_tensor) {
    fn(0, x.reshape({-1}));
    return;
  }
  if (x.dim() == 0 || static_cast<std::size_t>(x.size(0)) != spec.channels()) {
    throw InputError("per-channel spec has " + std::to_string(spec.channels()) +
                     " channels but tensor dim 0 is " + (x.dim() ? std::to_string(x.size(0)) : "scalar"));
  }
  const auto rows = x.reshape({x.size(0), -1});
  for (std::size_t c = 0; c < spec.channels(); ++c) fn(c, rows[static_cast<std::int64_t>(c)]);
}

template <typename T>
void fake_quant_kernel(const T* in, T* out, std::uint8_t* mask, std::int64_t n, const QuantSpec& spec,
                       std::size_t c) {
  const double lo = spec.lower(c);
  const double hi = spec.upper(c);
  const double s = spec.scale(c);
  const double qmin = static_cast<double>(spec.min_code(c));
  const double qmax = static_cast<double>(spec.max_code(c));
  for (std::int64_t i = 0; i < n; ++i) {
    const double v = static_cast<double>(in[i]);
    const double q = std::clamp(round_half_away(std::clamp(v, lo, hi) / s), qmin, qmax);
    out[i] = static_cast<T>(q * s);
    mask[i] = (v >= lo && v <= hi) ? 1 : 0;
  }
}

// Values (no autograd) plus the straight-through mask.
std::pair<torch::Tensor, torch::Tensor> fake_quant_forward(const torch::Tensor& x, const QuantSpec& spec) {
  auto src = x.contiguous();
  auto out = torch::empty_like(src);
  auto mask = torch::empty(src.sizes(), src.options().dtype(torch::kUInt8));
  const std::int64_t per_channel =
      spec.granularity() == Granularity::per_tensor ? src.numel() : (src.dim() ? src.numel() / src.size(0) : 1);
  if (spec.granularity() == Granularity::per_channel &&
      (src.dim() == 0 || static_cast<std::size_t>(src.size(0)) != spec.channels())) {
    throw InputError("per-channel fake quantization: channel count mismatch");
  }
  const std::size_t groups = spec.granularity() == Granularity::per_tensor ? 1 : spec.channels();
  AT_DISPATCH_FLOATING_TYPES(src.scalar_type(), "fake_quantize", [&] {
    const auto* in = src.data_ptr<scalar_t>();
    auto* o = out.data_ptr<scalar_t>();
    auto* m = mask.data_ptr<std::uint8_t>();
    for (std::size_t c = 0; c < groups; ++c) {
      const auto off = static_cast<std::int64_t>(c) * per_channel;
      fake_quant_kernel(in + off, o + off, m + off, per_channel, spec, c);
    }
  });
  return {out, mask};
}

struct FakeQuantSte : public torch::autograd::Function<FakeQuantSte> {
  static torch::Tensor forward(torch::autograd::AutogradContext* ctx, const torch::Tensor& x,
                               const QuantSpec& spec) {
    auto [out, mask] = fake_quant_forward(x, spec);
    ctx->save_for_backward({mask});
    return out;
  }

  static torch::autograd::variable_list backward(torch::autograd::AutogradContext* ctx,
                                                 torch::autograd::variable_list grads) {
    const auto mask = ctx->get_saved_variables()[0];
    return {grads[0] * mask.to(grads[0].scalar_type()), torch::Tensor()};
  }
};

}  // namespace

QuantSpec::QuantSpec(int bits, Granularity granularity, std::vector<double> lower, std::vector<double> upper)
    : bits_(bits), granularity_(granularity), lower_(std::move(lower)), upper_(std::move(upper)) {
  if (bits_ < 2 || bits_ > 16) {
    throw ConfigError("quantizer bit-width must lie in [2, 16], got " + std::to_string(bits_));
  }
  if (lower_.empty() || lower_.size() != upper_.size()) {
    throw ConfigError("quantizer needs one lower and one upper bound per channel");
  }
  scale_.resize(lower_.size());
  min_code_.resize(lower_.size());
  const double steps = static_cast<double>(levels() - 1);
  for (std::size_t c = 0; c < lower_.size(); ++c) {
    check_bounds(lower_[c], upper_[c]);
    scale_[c] = (upper_[c] - lower_[c]) / steps;
    min_code_[c] = static_cast<std::int64_t>(round_half_away(lower_[c] / scale_[c]));
  }
}

QuantSpec QuantSpec::per_tensor(int bits, double lower, double upper) {
  return QuantSpec(bits, Granularity::per_tensor, {lower}, {upper});
}

QuantSpec QuantSpec::per_channel(int bits, std::vector<double> lower, std::vector<double> upper) {
  return QuantSpec(bits, Granularity::per_channel, std::move(lower), std::move(upper));
}

QuantSpec QuantSpec::with_bounds(std::vector<double> lower, std::vector<double> upper) const {
  if (granularity_ == Granularity::per_tensor && lower.size() != 1) {
    throw ConfigError("per-tensor spec takes exactly one bound pair");
  }
  return QuantSpec(bits_, granularity_, std::move(lower), std::move(upper));
}

double round_half_away(double v) { return std::round(v); }

std::int64_t quantize_value(double x, const QuantSpec& spec, std::size_t channel) {
  const double clipped = std::clamp(x, spec.lower(channel), spec.upper(channel));
  const auto q = static_cast<std::int64_t>(round_half_away(clipped / spec.scale(channel)));
  return std::clamp(q, spec.min_code(channel), spec.max_code(channel));
}

QuantizedTensor quantize(const torch::Tensor& x, const QuantSpec& spec) {
  if (!x.is_floating_point()) throw InputError("quantize expects a floating point tensor");
  const auto src = x.detach().to(torch::kFloat64).contiguous();
  auto codes = torch::empty(src.sizes(), torch::dtype(torch::kInt32));
  auto flat_codes = codes.view({-1});
  std::int64_t offset = 0;
  for_each_channel(src, spec, [&](std::size_t c, const torch::Tensor& row) {
    const auto r = row.contiguous();
    const auto* in = r.data_ptr<double>();
    auto* out = flat_codes.data_ptr<std::int32_t>() + offset;
    for (std::int64_t i = 0; i < r.numel(); ++i) out[i] = static_cast<std::int32_t>(quantize_value(in[i], spec, c));
    offset += r.numel();
  });
  return {codes, spec, x.scalar_type()};
}

torch::Tensor dequantize(const QuantizedTensor& t) {
  auto values = torch::empty(t.codes.sizes(), torch::dtype(torch::kFloat64));
  auto flat = values.view({-1});
  const auto codes = t.codes.contiguous();
  std::int64_t offset = 0;
  for_each_channel(codes, t.spec, [&](std::size_t c, const torch::Tensor& row) {
    const auto r = row.contiguous();
    const auto* in = r.data_ptr<std::int32_t>();
    auto* out = flat.data_ptr<double>() + offset;
    const double s = t.spec.scale(c);
    for (std::int64_t i = 0; i < r.numel(); ++i) out[i] = static_cast<double>(in[i]) * s;
    offset += r.numel();
  });
  return values.to(t.source_dtype);
}

torch::Tensor fake_quantize(const torch::Tensor& x, const QuantSpec& spec) {
  if (!x.is_floating_point()) throw InputError("fake_quantize expects a floating point tensor");
  return FakeQuantSte::apply(x, spec);
}

QuantSpec per_channel_minmax(const torch::Tensor& weight, int bits) {
  if (weight.dim() < 1 || weight.size(0) == 0) throw InputError("weight tensor needs at least one channel");
  const auto rows = weight.detach().reshape({weight.size(0), -1}).to(torch::kFloat64);
  const auto mins = std::get<0>(rows.min(1)).contiguous();
  const auto maxs = std::get<0>(rows.max(1)).contiguous();
  std::vector<double> lo(mins.data_ptr<double>(), mins.data_ptr<double>() + mins.numel());
  std::vector<double> hi(maxs.data_ptr<double>(), maxs.data_ptr<double>() + maxs.numel());
  for (std::size_t c = 0; c < lo.size(); ++c) {
    if (!(hi[c] > lo[c])) {
      lo[c] -= kDegenerateHalfWidth;
      hi[c] += kDegenerateHalfWidth;
    }
  }
  return QuantSpec::per_channel(bits, std::move(lo), std::move(hi));
}

QuantSpec per_tensor_minmax(const torch::Tensor& weight, int bits) {
  if (weight.numel() == 0) throw InputError("weight tensor is empty");
  double lo = weight.min().item<double>();
  double hi = weight.max().item<double>();
  if (!(hi > lo)) {
    lo -= kDegenerateHalfWidth;
    hi += kDegenerateHalfWidth;
  }
  return QuantSpec::per_tensor(bits, lo, hi);
}

QuantSpec weight_minmax(const torch::Tensor& weight, int bits, Granularity granularity) {
  return granularity == Granularity::per_channel ? per_channel_minmax(weight, bits) : per_tensor_minmax(weight, bits);
}

void RangeTracker::observe(double batch_min, double batch_max) {
  if (!std::isfinite(batch_min) || !std::isfinite(batch_max)) {
    throw CalibrationError("non-finite value in calibration stream");
  }
  if (!range_ || mode_ == CalibrationMode::minmax) {
    if (!range_) {
      range_ = {batch_min, batch_max};
    } else {
      range_->first = std::min(range_->first, batch_min);
      range_->second = std::max(range_->second, batch_max);
    }
    return;
  }
  range_->first = decay_ * range_->first + (1.0 - decay_) * batch_min;
  range_->second = decay_ * range_->second + (1.0 - decay_) * batch_max;
}

void RangeTracker::observe(const torch::Tensor& batch) {
  if (batch.numel() == 0) throw CalibrationError("empty calibration batch");
  const auto b = batch.detach().to(torch::kFloat64);
  observe(b.min().item<double>(), b.max().item<double>());
}

std::pair<double, double> RangeTracker::range() const {
  if (!range_) throw CalibrationError("no samples observed");
  auto [lo, hi] = *range_;
  if (!(hi > lo)) {
    lo -= kDegenerateHalfWidth;
    hi += kDegenerateHalfWidth;
  }
  return {lo, hi};
}

QuantSpec calibrate_bounds(std::span<const torch::Tensor> samples, const QuantSpec& spec,
                           CalibrationMode mode) {
  if (samples.empty()) throw CalibrationError("empty calibration stream");
  std::vector<RangeTracker> trackers(spec.channels(), RangeTracker(mode));
  for (const auto& batch : samples) {
    if (spec.granularity() == Granularity::per_tensor) {
      trackers[0].observe(batch);
      continue;
    }
    if (batch.dim() == 0 || static_cast<std::size_t>(batch.size(0)) != spec.channels()) {
      throw CalibrationError("calibration batch does not match the spec's channel count");
    }
    for (std::size_t c = 0; c < spec.channels(); ++c) trackers[c].observe(batch[static_cast<std::int64_t>(c)]);
  }
  std::vector<double> lo, hi;
  for (const auto& t : trackers) {
    auto [l, u] = t.range();
    lo.push_back(l);
    hi.push_back(u);
  }
  return spec.with_bounds(std::move(lo), std::move(hi));
}

ActivationQuantizerImpl::ActivationQuantizerImpl() {
  state_ = register_buffer("state", torch::zeros({3}, torch::kFloat64));
}

void ActivationQuantizerImpl::enable(int bits) {
  if (bits != kFullPrecisionBits && (bits < 2 || bits > 16)) {
    throw ConfigError("activation bit-width must be 32 or lie in [2, 16]");
  }
  bits_ = bits;
}

void ActivationQuantizerImpl::set_calibration(CalibrationMode mode) { tracker_ = RangeTracker(mode); }

bool ActivationQuantizerImpl::calibrated() const { return state_[2].item<double>() != 0.0; }

QuantSpec ActivationQuantizerImpl::spec() const {
  if (!calibrated()) throw CalibrationError("activation quantizer has not been calibrated");
  return QuantSpec::per_tensor(bits_, state_[0].item<double>(), state_[1].item<double>());
}

torch::Tensor ActivationQuantizerImpl::forward(const torch::Tensor& x) {
  if (!enabled()) return x;
  if (observing_) {
    if (tracker_.empty() && calibrated()) tracker_.reset({state_[0].item<double>(), state_[1].item<double>()});
    tracker_.observe(x);
    const auto [lo, hi] = tracker_.range();
    torch::NoGradGuard guard;
    state_[0] = lo;
    state_[1] = hi;
    state_[2] = 1.0;
  }
  if (!calibrated()) return x;
  return fake_quantize(x, spec());
}

}  // namespace intraq::quant
