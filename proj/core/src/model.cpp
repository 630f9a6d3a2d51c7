// SPDX-License-Identifier: Apache-2.0
#include "intraq/model.hpp"

#include <sstream>

#include "intraq/access_log.hpp"
#include "intraq/errors.hpp"

namespace intraq::model {

namespace F = torch::nn::functional;

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::batch_norm: return "batch_norm";
    case LayerKind::relu: return "relu";
    case LayerKind::residual_block: return "residual_block";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::linear: return "linear";
    case LayerKind::opaque: return "opaque";
  }
  return "unknown";
}

QuantConv2dImpl::QuantConv2dImpl(const torch::nn::Conv2dOptions& options) {
  conv = register_module("conv", torch::nn::Conv2d(options));
}

void QuantConv2dImpl::set_weight_bits(int bits) {
  if (bits != quant::kFullPrecisionBits && (bits < 2 || bits > 16)) {
    throw ConfigError("weight bit-width must be 32 or lie in [2, 16]");
  }
  weight_bits_ = bits;
}

torch::Tensor QuantConv2dImpl::effective_weight() {
  const auto& w = conv->weight;
  if (weight_bits_ >= quant::kFullPrecisionBits) return w;
  return quant::fake_quantize(w, quant::weight_minmax(w, weight_bits_, granularity_));
}

torch::Tensor QuantConv2dImpl::forward(const torch::Tensor& x) {
  if (weight_bits_ >= quant::kFullPrecisionBits) return conv->forward(x);
  const auto& o = conv->options;
  return torch::conv2d(x, effective_weight(), conv->bias, o.stride(), std::get<torch::ExpandingArray<2>>(o.padding()),
                       o.dilation(), o.groups());
}

QuantLinearImpl::QuantLinearImpl(std::int64_t in, std::int64_t out) {
  linear = register_module("linear", torch::nn::Linear(in, out));
}

void QuantLinearImpl::set_weight_bits(int bits) {
  if (bits != quant::kFullPrecisionBits && (bits < 2 || bits > 16)) {
    throw ConfigError("weight bit-width must be 32 or lie in [2, 16]");
  }
  weight_bits_ = bits;
}

torch::Tensor QuantLinearImpl::effective_weight() {
  const auto& w = linear->weight;
  if (weight_bits_ >= quant::kFullPrecisionBits) return w;
  return quant::fake_quantize(w, quant::weight_minmax(w, weight_bits_, granularity_));
}

torch::Tensor QuantLinearImpl::forward(const torch::Tensor& x) {
  if (weight_bits_ >= quant::kFullPrecisionBits) return linear->forward(x);
  return F::linear(x, effective_weight(), linear->bias);
}

ReLUActImpl::ReLUActImpl() { act = register_module("act", quant::ActivationQuantizer()); }

torch::Tensor ReLUActImpl::forward(const torch::Tensor& x) { return act->forward(torch::relu(x)); }

void BatchStats::record(const torch::Tensor& bn_input) {
  auto [v, m] = torch::var_mean(bn_input, {0, 2, 3}, /*unbiased=*/false);
  mean.push_back(m);
  var.push_back(v);
}

namespace {

torch::nn::Conv2dOptions conv3x3(std::int64_t in, std::int64_t out, std::int64_t stride) {
  return torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false);
}

}  // namespace

ResidualBlockImpl::ResidualBlockImpl(std::int64_t in, std::int64_t out, std::int64_t stride) {
  conv1 = register_module("conv1", QuantConv2d(conv3x3(in, out, stride)));
  bn1 = register_module("bn1", torch::nn::BatchNorm2d(out));
  relu1 = register_module("relu1", ReLUAct());
  conv2 = register_module("conv2", QuantConv2d(conv3x3(out, out, 1)));
  bn2 = register_module("bn2", torch::nn::BatchNorm2d(out));
  if (stride != 1 || in != out) {
    proj = register_module("proj", QuantConv2d(torch::nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)));
    proj_bn = register_module("proj_bn", torch::nn::BatchNorm2d(out));
  }
  relu_out = register_module("relu_out", ReLUAct());
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x, BatchStats* stats) {
  auto h = conv1->forward(x);
  if (stats) stats->record(h);
  h = relu1->forward(bn1->forward(h));
  h = conv2->forward(h);
  if (stats) stats->record(h);
  h = bn2->forward(h);
  auto shortcut = x;
  if (proj) {
    shortcut = proj->forward(x);
    if (stats) stats->record(shortcut);
    shortcut = proj_bn->forward(shortcut);
  }
  return relu_out->forward(h + shortcut);
}

ClassifierImpl::ClassifierImpl(InputShape input, std::int64_t num_classes)
    : input_(input), num_classes_(num_classes) {
  if (num_classes < 1) throw ConfigError("classifier needs at least one class");
}

void ClassifierImpl::check_new_name(const std::string& name) const {
  for (const auto& d : descriptors_) {
    if (d.name == name) throw ConfigError("duplicate layer name '" + name + "'");
  }
}

void ClassifierImpl::add_conv(const std::string& name, const torch::nn::Conv2dOptions& options) {
  check_new_name(name);
  layers_.emplace_back(register_module(name, QuantConv2d(options)));
  descriptors_.push_back({LayerKind::conv, name});
}

void ClassifierImpl::add_batch_norm(const std::string& name, std::int64_t channels) {
  check_new_name(name);
  layers_.emplace_back(register_module(name, torch::nn::BatchNorm2d(channels)));
  descriptors_.push_back({LayerKind::batch_norm, name});
}

void ClassifierImpl::add_relu(const std::string& name) {
  check_new_name(name);
  layers_.emplace_back(register_module(name, ReLUAct()));
  descriptors_.push_back({LayerKind::relu, name});
}

void ClassifierImpl::add_residual_block(const std::string& name, std::int64_t in, std::int64_t out,
                                        std::int64_t stride) {
  check_new_name(name);
  layers_.emplace_back(register_module(name, ResidualBlock(in, out, stride)));
  descriptors_.push_back({LayerKind::residual_block, name});
}

void ClassifierImpl::add_global_avg_pool(const std::string& name) {
  check_new_name(name);
  layers_.emplace_back(std::monostate{});
  descriptors_.push_back({LayerKind::global_avg_pool, name});
}

void ClassifierImpl::add_flatten(const std::string& name) {
  check_new_name(name);
  layers_.emplace_back(std::monostate{});
  descriptors_.push_back({LayerKind::flatten, name});
}

void ClassifierImpl::add_linear(const std::string& name, std::int64_t in, std::int64_t out) {
  check_new_name(name);
  layers_.emplace_back(register_module(name, QuantLinear(in, out)));
  descriptors_.push_back({LayerKind::linear, name});
}

void ClassifierImpl::add_opaque(const std::string& name, torch::nn::AnyModule module) {
  check_new_name(name);
  register_module(name, module.ptr());
  layers_.emplace_back(std::move(module));
  descriptors_.push_back({LayerKind::opaque, name});
}

ForwardOutput ClassifierImpl::run(const torch::Tensor& x, bool record_stats) {
  if (descriptors_.empty() || descriptors_.back().kind != LayerKind::linear) {
    throw StructuralError("classifier must end with a linear layer");
  }
  ForwardOutput out;
  BatchStats* stats = record_stats ? &out.stats : nullptr;
  auto h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto kind = descriptors_[i].kind;
    if (i + 1 == layers_.size()) out.features = h;
    switch (kind) {
      case LayerKind::conv: h = std::get<QuantConv2d>(layers_[i])->forward(h); break;
      case LayerKind::batch_norm:
        if (stats) stats->record(h);
        h = std::get<torch::nn::BatchNorm2d>(layers_[i])->forward(h);
        break;
      case LayerKind::relu: h = std::get<ReLUAct>(layers_[i])->forward(h); break;
      case LayerKind::residual_block: h = std::get<ResidualBlock>(layers_[i])->forward(h, stats); break;
      case LayerKind::global_avg_pool: h = h.mean({2, 3}); break;
      case LayerKind::flatten: h = h.flatten(1); break;
      case LayerKind::linear: h = std::get<QuantLinear>(layers_[i])->forward(h); break;
      case LayerKind::opaque: h = std::get<torch::nn::AnyModule>(layers_[i]).forward(h); break;
    }
  }
  out.logits = h;
  out.probs = torch::softmax(h, 1);
  return out;
}

torch::Tensor ClassifierImpl::forward(const torch::Tensor& x) { return run(x, false).logits; }

std::vector<std::pair<std::string, torch::nn::BatchNorm2d>> ClassifierImpl::batch_norms() const {
  std::vector<std::pair<std::string, torch::nn::BatchNorm2d>> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& name = descriptors_[i].name;
    if (descriptors_[i].kind == LayerKind::batch_norm) {
      out.emplace_back(name, std::get<torch::nn::BatchNorm2d>(layers_[i]));
    } else if (descriptors_[i].kind == LayerKind::residual_block) {
      const auto& b = std::get<ResidualBlock>(layers_[i]);
      out.emplace_back(name + ".bn1", b->bn1);
      out.emplace_back(name + ".bn2", b->bn2);
      if (b->proj_bn) out.emplace_back(name + ".proj_bn", b->proj_bn);
    }
  }
  return out;
}

std::vector<QuantConv2d> ClassifierImpl::convs() const {
  std::vector<QuantConv2d> out;
  for (const auto& l : layers_) {
    if (auto* c = std::get_if<QuantConv2d>(&l)) out.push_back(*c);
    if (auto* b = std::get_if<ResidualBlock>(&l)) {
      out.push_back((*b)->conv1);
      out.push_back((*b)->conv2);
      if ((*b)->proj) out.push_back((*b)->proj);
    }
  }
  return out;
}

std::vector<QuantLinear> ClassifierImpl::linears() const {
  std::vector<QuantLinear> out;
  for (const auto& l : layers_) {
    if (auto* c = std::get_if<QuantLinear>(&l)) out.push_back(*c);
  }
  return out;
}

std::vector<quant::ActivationQuantizer> ClassifierImpl::activation_quantizers() const {
  std::vector<quant::ActivationQuantizer> out;
  for (const auto& l : layers_) {
    if (auto* r = std::get_if<ReLUAct>(&l)) out.push_back((*r)->act);
    if (auto* b = std::get_if<ResidualBlock>(&l)) {
      out.push_back((*b)->relu1->act);
      out.push_back((*b)->relu_out->act);
    }
  }
  return out;
}

Classifier make_classifier(const ArchConfig& arch) {
  if (arch.base_width < 1) throw ConfigError("base_width must be positive");
  const auto w = arch.base_width;
  Classifier model(arch.input, arch.num_classes);
  if (arch.name == "plain_cnn") {
    model->add_conv("conv1", conv3x3(arch.input.channels, w, 1));
    model->add_batch_norm("bn1", w);
    model->add_relu("relu1");
    model->add_conv("conv2", conv3x3(w, 2 * w, 2));
    model->add_batch_norm("bn2", 2 * w);
    model->add_relu("relu2");
    model->add_conv("conv3", conv3x3(2 * w, 2 * w, 1));
    model->add_batch_norm("bn3", 2 * w);
    model->add_relu("relu3");
    model->add_conv("conv4", conv3x3(2 * w, 4 * w, 2));
    model->add_batch_norm("bn4", 4 * w);
    model->add_relu("relu4");
    model->add_global_avg_pool("pool");
    model->add_linear("fc", 4 * w, arch.num_classes);
  } else if (arch.name == "res_cnn") {
    model->add_conv("conv1", conv3x3(arch.input.channels, w, 1));
    model->add_batch_norm("bn1", w);
    model->add_relu("relu1");
    model->add_residual_block("block1", w, w, 1);
    model->add_residual_block("block2", w, 2 * w, 2);
    model->add_residual_block("block3", 2 * w, 4 * w, 2);
    model->add_global_avg_pool("pool");
    model->add_linear("fc", 4 * w, arch.num_classes);
  } else if (arch.name == "mlp") {
    const auto in = arch.input.channels * arch.input.height * arch.input.width;
    model->add_flatten("flatten");
    model->add_linear("fc1", in, w);
    model->add_relu("relu1");
    model->add_linear("fc2", w, arch.num_classes);
  } else {
    throw ConfigError("unknown arch '" + arch.name + "' (expected plain_cnn, res_cnn or mlp)");
  }
  model->set_arch(arch);
  return model;
}

std::map<std::string, torch::Tensor> snapshot_state(const torch::nn::Module& module) {
  std::map<std::string, torch::Tensor> state;
  for (const auto& p : module.named_parameters()) state[p.key()] = p.value().detach().clone();
  for (const auto& b : module.named_buffers()) state[b.key()] = b.value().detach().clone();
  return state;
}

void restore_state(torch::nn::Module& module, const std::map<std::string, torch::Tensor>& state) {
  torch::NoGradGuard guard;
  auto copy_into = [&](const std::string& key, torch::Tensor& dst) {
    const auto it = state.find(key);
    if (it == state.end()) throw StructuralError("state is missing '" + key + "'");
    dst.copy_(it->second);
  };
  for (auto& p : module.named_parameters()) copy_into(p.key(), p.value());
  for (auto& b : module.named_buffers()) copy_into(b.key(), b.value());
}

Classifier clone_classifier(Classifier& model) {
  if (!model->arch()) throw StructuralError("only models built by make_classifier can be cloned");
  auto copy = make_classifier(*model->arch());
  restore_state(*copy, snapshot_state(*model));
  const auto src_convs = model->convs();
  auto dst_convs = copy->convs();
  for (std::size_t i = 0; i < src_convs.size(); ++i) {
    dst_convs[i]->set_weight_bits(src_convs[i]->weight_bits());
    dst_convs[i]->set_weight_granularity(src_convs[i]->weight_granularity());
  }
  const auto src_lin = model->linears();
  auto dst_lin = copy->linears();
  for (std::size_t i = 0; i < src_lin.size(); ++i) {
    dst_lin[i]->set_weight_bits(src_lin[i]->weight_bits());
    dst_lin[i]->set_weight_granularity(src_lin[i]->weight_granularity());
  }
  const auto src_act = model->activation_quantizers();
  auto dst_act = copy->activation_quantizers();
  for (std::size_t i = 0; i < src_act.size(); ++i) {
    dst_act[i]->enable(src_act[i]->bits());
    dst_act[i]->set_calibration(src_act[i]->calibration());
  }
  copy->train(model->is_training());
  return copy;
}

BNStatsProfile capture_bn_profile(Classifier& model) {
  const auto bns = model->batch_norms();
  if (bns.empty()) throw UnsupportedLayerError("<model>", "model has no batch-norm layer");
  BNStatsProfile profile;
  for (const auto& [name, bn] : bns) {
    profile.layers.push_back({name, bn->running_mean.detach().clone(), bn->running_var.detach().clone()});
  }
  return profile;
}

ForwardOutput forward_with_stats(Classifier& model, const torch::Tensor& batch, bool record_stats) {
  const auto& s = model->input_shape();
  if (batch.dim() != 4 || batch.size(1) != s.channels || batch.size(2) != s.height || batch.size(3) != s.width) {
    std::ostringstream msg;
    msg << "batch shape " << batch.sizes() << " does not match model input [N, " << s.channels << ", " << s.height
        << ", " << s.width << "]";
    throw InputError(msg.str());
  }
  return model->run(batch, record_stats);
}

std::vector<FeatureVector> to_feature_vectors(const torch::Tensor& features, const torch::Tensor& labels) {
  if (features.dim() != 2 || labels.dim() != 1 || features.size(0) != labels.size(0)) {
    throw InputError("features must be [N, D] with one label per row");
  }
  const auto f = features.detach().to(torch::kFloat32).contiguous();
  const auto l = labels.to(torch::kInt64).contiguous();
  std::vector<FeatureVector> out(static_cast<std::size_t>(f.size(0)));
  const auto dim = f.size(1);
  for (std::int64_t i = 0; i < f.size(0); ++i) {
    const float* row = f.data_ptr<float>() + i * dim;
    out[static_cast<std::size_t>(i)] = {std::vector<float>(row, row + dim), l.data_ptr<std::int64_t>()[i]};
  }
  return out;
}

namespace {

constexpr const char* kMetaPrefix = "intraq_meta_";

void write_meta(torch::serialize::OutputArchive& archive, const std::string& key, const std::string& value) {
  archive.write(kMetaPrefix + key, c10::IValue(value));
}

std::string read_meta(torch::serialize::InputArchive& archive, const std::string& key) {
  c10::IValue v;
  if (!archive.try_read(kMetaPrefix + key, v)) throw IoError("checkpoint is missing metadata '" + key + "'");
  return v.toStringRef();
}

int model_weight_bits(Classifier& model) {
  const auto convs = model->convs();
  return convs.empty() ? quant::kFullPrecisionBits : convs.front()->weight_bits();
}

int model_act_bits(Classifier& model) {
  const auto acts = model->activation_quantizers();
  return acts.empty() ? quant::kFullPrecisionBits : acts.front()->bits();
}

}  // namespace

void save_checkpoint(Classifier& model, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& extra) {
  if (!model->arch()) throw StructuralError("only models built by make_classifier can be checkpointed");
  const auto& arch = *model->arch();
  torch::serialize::OutputArchive archive;
  model->save(archive);
  write_meta(archive, "arch", arch.name);
  write_meta(archive, "num_classes", std::to_string(arch.num_classes));
  write_meta(archive, "channels", std::to_string(arch.input.channels));
  write_meta(archive, "height", std::to_string(arch.input.height));
  write_meta(archive, "width", std::to_string(arch.input.width));
  write_meta(archive, "base_width", std::to_string(arch.base_width));
  write_meta(archive, "weight_bits", std::to_string(model_weight_bits(model)));
  write_meta(archive, "act_bits", std::to_string(model_act_bits(model)));
  const auto convs = model->convs();
  const bool per_tensor = !convs.empty() && convs.front()->weight_granularity() == quant::Granularity::per_tensor;
  write_meta(archive, "weight_granularity", per_tensor ? "per_tensor" : "per_channel");
  std::string keys;
  for (const auto& [k, v] : extra) {
    write_meta(archive, "x_" + k, v);
    keys += (keys.empty() ? "" : ",") + k;
  }
  write_meta(archive, "extra_keys", keys);
  std::ostringstream buf;
  archive.save_to(buf);
  io::write_file(path, buf.str());
}

Classifier load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta) {
  std::istringstream in(io::read_file(path));
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(in);
  } catch (const c10::Error& e) {
    throw IoError("'" + path.string() + "' is not a readable checkpoint: " + e.what_without_backtrace());
  }
  CheckpointMeta m;
  m.arch.name = read_meta(archive, "arch");
  m.arch.num_classes = std::stoll(read_meta(archive, "num_classes"));
  m.arch.input = {std::stoll(read_meta(archive, "channels")), std::stoll(read_meta(archive, "height")),
                  std::stoll(read_meta(archive, "width"))};
  m.arch.base_width = std::stoll(read_meta(archive, "base_width"));
  m.weight_bits = std::stoi(read_meta(archive, "weight_bits"));
  m.act_bits = std::stoi(read_meta(archive, "act_bits"));
  if (read_meta(archive, "weight_granularity") == "per_tensor") m.weight_granularity = quant::Granularity::per_tensor;
  std::stringstream keys(read_meta(archive, "extra_keys"));
  for (std::string k; std::getline(keys, k, ',');) {
    if (!k.empty()) m.extra[k] = read_meta(archive, "x_" + k);
  }
  auto model = make_classifier(m.arch);
  for (auto& c : model->convs()) {
    c->set_weight_bits(m.weight_bits);
    c->set_weight_granularity(m.weight_granularity);
  }
  for (auto& l : model->linears()) {
    l->set_weight_bits(m.weight_bits);
    l->set_weight_granularity(m.weight_granularity);
  }
  for (auto& a : model->activation_quantizers()) a->enable(m.act_bits);
  model->load(archive);
  model->eval();
  if (meta) *meta = std::move(m);
  return model;
}

}  // namespace intraq::model
