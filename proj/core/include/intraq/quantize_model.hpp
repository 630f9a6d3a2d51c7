// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "intraq/model.hpp"

namespace intraq::quant {

/// Quantized twin of a full-precision classifier.
///
/// Every conv and linear weight is fake-quantized (per output channel by default) with
/// minmax bounds recomputed on each forward; every ReLU output (the
/// post-activation tensors, including those after residual additions) goes
/// through a per-tensor activation quantizer. BN layers stay unfolded. A
/// bit-width of 32 leaves the corresponding tensors untouched.
///
/// Throws UnsupportedLayerError naming the first layer that cannot be
/// quantized.
model::Classifier build_quantized_model(model::Classifier& model, int weight_bits, int act_bits,
                                        Granularity weight_granularity = Granularity::per_channel,
                                        CalibrationMode act_calibration = CalibrationMode::ema_minmax);

void set_activation_observing(model::Classifier& model, bool on);

/// Runs `images` through the model in eval mode with the activation
/// quantizers observing, seeding their EMA ranges.
void calibrate_activations(model::Classifier& model, const torch::Tensor& images, std::int64_t batch_size);

}  // namespace intraq::quant
