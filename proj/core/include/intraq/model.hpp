// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "intraq/quant.hpp"

namespace intraq::model {

enum class LayerKind { conv, batch_norm, relu, residual_block, global_avg_pool, flatten, linear, opaque };

std::string to_string(LayerKind kind);

struct LayerDescriptor {
  LayerKind kind;
  std::string name;
};

struct InputShape {
  std::int64_t channels = 3;
  std::int64_t height = 32;
  std::int64_t width = 32;

  bool operator==(const InputShape&) const = default;
};

/// Named architecture plus the knobs needed to rebuild it from a checkpoint.
struct ArchConfig {
  std::string name = "plain_cnn";  // plain_cnn | res_cnn | mlp (no BN; for toy checks)
  std::int64_t num_classes = 10;
  InputShape input;
  std::int64_t base_width = 16;
};

/// Conv2d whose weight optionally passes through per-channel fake quantization.
class QuantConv2dImpl : public torch::nn::Module {
 public:
  explicit QuantConv2dImpl(const torch::nn::Conv2dOptions& options);

  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor effective_weight();

  void set_weight_bits(int bits);
  int weight_bits() const noexcept { return weight_bits_; }
  void set_weight_granularity(quant::Granularity g) noexcept { granularity_ = g; }
  quant::Granularity weight_granularity() const noexcept { return granularity_; }

  torch::nn::Conv2d conv{nullptr};

 private:
  int weight_bits_ = quant::kFullPrecisionBits;
  quant::Granularity granularity_ = quant::Granularity::per_channel;
};
TORCH_MODULE(QuantConv2d);

class QuantLinearImpl : public torch::nn::Module {
 public:
  QuantLinearImpl(std::int64_t in, std::int64_t out);

  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor effective_weight();

  void set_weight_bits(int bits);
  int weight_bits() const noexcept { return weight_bits_; }
  void set_weight_granularity(quant::Granularity g) noexcept { granularity_ = g; }
  quant::Granularity weight_granularity() const noexcept { return granularity_; }

  torch::nn::Linear linear{nullptr};

 private:
  int weight_bits_ = quant::kFullPrecisionBits;
  quant::Granularity granularity_ = quant::Granularity::per_channel;
};
TORCH_MODULE(QuantLinear);

/// ReLU followed by a (normally disabled) activation fake quantizer.
class ReLUActImpl : public torch::nn::Module {
 public:
  ReLUActImpl();
  torch::Tensor forward(const torch::Tensor& x);

  quant::ActivationQuantizer act{nullptr};
};
TORCH_MODULE(ReLUAct);

/// Per-BN-layer moments of the tensors entering each BN layer, in forward
/// order. Kept differentiable so losses on them reach the input.
struct BatchStats {
  std::vector<torch::Tensor> mean;
  std::vector<torch::Tensor> var;  // biased (population) estimator

  std::size_t size() const noexcept { return mean.size(); }
  void record(const torch::Tensor& bn_input);
};

/// Two 3x3 conv-BN stages with an identity or 1x1 projection shortcut.
class ResidualBlockImpl : public torch::nn::Module {
 public:
  ResidualBlockImpl(std::int64_t in, std::int64_t out, std::int64_t stride);

  torch::Tensor forward(const torch::Tensor& x, BatchStats* stats = nullptr);

  QuantConv2d conv1{nullptr}, conv2{nullptr}, proj{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, proj_bn{nullptr};
  ReLUAct relu1{nullptr}, relu_out{nullptr};
};
TORCH_MODULE(ResidualBlock);

struct ForwardOutput {
  torch::Tensor logits;
  torch::Tensor probs;
  torch::Tensor features;  // input of the final linear layer, [N, D]
  BatchStats stats;
};

/// An ordered stack of layers ending in a linear classifier.
///
/// Besides plain forward() the classifier can tap the input of every BN layer
/// and the penultimate features in the same pass. Named architectures are
/// built by make_classifier(); custom stacks use the add_* builders.
class ClassifierImpl : public torch::nn::Module {
 public:
  ClassifierImpl(InputShape input, std::int64_t num_classes);

  void add_conv(const std::string& name, const torch::nn::Conv2dOptions& options);
  void add_batch_norm(const std::string& name, std::int64_t channels);
  void add_relu(const std::string& name);
  void add_residual_block(const std::string& name, std::int64_t in, std::int64_t out, std::int64_t stride);
  void add_global_avg_pool(const std::string& name);
  void add_flatten(const std::string& name);
  void add_linear(const std::string& name, std::int64_t in, std::int64_t out);
  void add_opaque(const std::string& name, torch::nn::AnyModule module);

  torch::Tensor forward(const torch::Tensor& x);
  ForwardOutput run(const torch::Tensor& x, bool record_stats);

  const std::vector<LayerDescriptor>& layers() const noexcept { return descriptors_; }
  std::int64_t num_classes() const noexcept { return num_classes_; }
  const InputShape& input_shape() const noexcept { return input_; }

  /// BN layers in the order run() records their statistics.
  std::vector<std::pair<std::string, torch::nn::BatchNorm2d>> batch_norms() const;
  std::vector<QuantConv2d> convs() const;
  std::vector<QuantLinear> linears() const;
  std::vector<quant::ActivationQuantizer> activation_quantizers() const;

  /// Set when built by make_classifier(); lets the model be rebuilt.
  const std::optional<ArchConfig>& arch() const noexcept { return arch_; }
  void set_arch(ArchConfig arch) { arch_ = std::move(arch); }

 private:
  using Layer = std::variant<QuantConv2d, torch::nn::BatchNorm2d, ReLUAct, ResidualBlock, std::monostate,
                             QuantLinear, torch::nn::AnyModule>;

  void check_new_name(const std::string& name) const;

  InputShape input_;
  std::int64_t num_classes_;
  std::vector<LayerDescriptor> descriptors_;
  std::vector<Layer> layers_;
  std::optional<ArchConfig> arch_;
};
TORCH_MODULE(Classifier);

/// Frozen running statistics of every BN layer.
struct BNLayerStats {
  std::string name;
  torch::Tensor running_mean;
  torch::Tensor running_var;
  std::int64_t channels() const { return running_mean.numel(); }
};

struct BNStatsProfile {
  std::vector<BNLayerStats> layers;
  std::size_t size() const noexcept { return layers.size(); }
};

/// Label-tagged feature vector of one image.
struct FeatureVector {
  std::vector<float> values;
  std::int64_t source_class = 0;
};

Classifier make_classifier(const ArchConfig& arch);

/// Same architecture, parameters and buffers copied; requires arch().
Classifier clone_classifier(Classifier& model);

/// Reads the stored running statistics; no forward pass. Throws
/// UnsupportedLayerError when the model has no BN layer.
BNStatsProfile capture_bn_profile(Classifier& model);

/// One forward pass returning logits, softmax, BN-input moments and features.
/// Throws InputError when the batch does not match the model's input shape.
ForwardOutput forward_with_stats(Classifier& model, const torch::Tensor& batch, bool record_stats = true);

std::vector<FeatureVector> to_feature_vectors(const torch::Tensor& features, const torch::Tensor& labels);

struct CheckpointMeta {
  ArchConfig arch;
  int weight_bits = quant::kFullPrecisionBits;
  int act_bits = quant::kFullPrecisionBits;
  quant::Granularity weight_granularity = quant::Granularity::per_channel;
  std::map<std::string, std::string> extra;
};

void save_checkpoint(Classifier& model, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& extra = {});
Classifier load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

/// Deep copy of every parameter and buffer, keyed by name.
std::map<std::string, torch::Tensor> snapshot_state(const torch::nn::Module& module);
void restore_state(torch::nn::Module& module, const std::map<std::string, torch::Tensor>& state);

}  // namespace intraq::model
