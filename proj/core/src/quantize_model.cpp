// SPDX-License-Identifier: Apache-2.0
#include "intraq/quantize_model.hpp"

#include "intraq/errors.hpp"

namespace intraq::quant {

namespace {

void check_bits(int bits, const char* what) {
  if (bits != kFullPrecisionBits && (bits < 2 || bits > 16)) {
    throw ConfigError(std::string(what) + " must be 32 or lie in [2, 16], got " + std::to_string(bits));
  }
}

}  // namespace

model::Classifier build_quantized_model(model::Classifier& model, int weight_bits, int act_bits,
                                        Granularity weight_granularity, CalibrationMode act_calibration) {
  check_bits(weight_bits, "weight_bits");
  check_bits(act_bits, "act_bits");
  for (const auto& layer : model->layers()) {
    if (layer.kind == model::LayerKind::opaque) {
      throw UnsupportedLayerError(layer.name, "no quantization rule for opaque layers");
    }
  }
  auto q = model::clone_classifier(model);
  for (auto& c : q->convs()) {
    c->set_weight_bits(weight_bits);
    c->set_weight_granularity(weight_granularity);
  }
  for (auto& l : q->linears()) {
    l->set_weight_bits(weight_bits);
    l->set_weight_granularity(weight_granularity);
  }
  for (auto& a : q->activation_quantizers()) {
    a->enable(act_bits);
    a->set_calibration(act_calibration);
  }
  return q;
}

void set_activation_observing(model::Classifier& model, bool on) {
  for (auto& a : model->activation_quantizers()) a->set_observing(on);
}

void calibrate_activations(model::Classifier& model, const torch::Tensor& images, std::int64_t batch_size) {
  if (images.size(0) == 0) throw CalibrationError("no images to calibrate activation ranges on");
  if (batch_size < 1) throw ConfigError("calibration batch size must be positive");
  torch::NoGradGuard guard;
  const bool was_training = model->is_training();
  model->eval();
  set_activation_observing(model, true);
  for (std::int64_t start = 0; start < images.size(0); start += batch_size) {
    model->forward(images.slice(0, start, std::min(images.size(0), start + batch_size)));
  }
  set_activation_observing(model, false);
  model->train(was_training);
}

}  // namespace intraq::quant
