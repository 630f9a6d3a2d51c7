// SPDX-License-Identifier: Apache-2.0
#include "intraq/synthesis.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace intraq::synthesis {

namespace F = torch::nn::functional;

void SynthesisConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("synthesis config: " + msg); };
  if (!(eta > 0.0 && eta <= 1.0)) fail("eta must lie in (0, 1]");
  if (!(crop_prob >= 0.0 && crop_prob <= 1.0)) fail("crop_prob must lie in [0, 1]");
  if (!(lambda_l >= 0.0)) fail("lambda_l must be >= 0");
  if (!(lambda_u <= 2.0)) fail("lambda_u must be <= 2");
  if (!(lambda_l < lambda_u)) fail("lambda_l must be < lambda_u");
  if (!(epsilon > 0.0 && epsilon <= 1.0)) fail("epsilon must lie in (0, 1]");
  if (iterations < 0) fail("iterations must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(lr > 0.0)) fail("lr must be > 0");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) fail("lr_decay must lie in (0, 1]");
  if (plateau_patience < 0) fail("plateau_patience must be >= 0");
  if (toggles.sil && toggles.hard_il) fail("sil and hard_il are mutually exclusive");
  if (toggles.mdc && !(toggles.sil || toggles.hard_il)) fail("mdc needs a label term (sil or hard_il)");
}

void SyntheticImageSet::append(const SyntheticImageSet& other) {
  if (other.size() == 0) return;
  if (size() == 0) {
    const auto k = num_classes;
    *this = other;
    if (k > 0) num_classes = k;
    return;
  }
  if (other.images.sizes().slice(1) != images.sizes().slice(1)) {
    throw InputError("cannot append synthetic images of a different shape");
  }
  images = torch::cat({images, other.images});
  labels = torch::cat({labels, other.labels});
  soft_targets = torch::cat({soft_targets, other.soft_targets});
  rounds.insert(rounds.end(), other.rounds.begin(), other.rounds.end());
  num_classes = std::max(num_classes, other.num_classes);
}

void SyntheticImageSet::validate(double epsilon) const {
  const auto n = size();
  if (labels.numel() != n || soft_targets.numel() != n || static_cast<std::int64_t>(rounds.size()) != n) {
    throw InputError("synthetic set needs exactly one label, soft target and round id per image");
  }
  if (n == 0) return;
  if (labels.min().item<std::int64_t>() < 0 || labels.max().item<std::int64_t>() >= num_classes) {
    throw InputError("synthetic label outside [0, num_classes)");
  }
  if (soft_targets.min().item<double>() < epsilon - 1e-7 || soft_targets.max().item<double>() > 1.0 + 1e-7) {
    throw InputError("soft target outside [epsilon, 1]");
  }
}

ClassCenterBank::ClassCenterBank(std::int64_t num_classes, std::int64_t dim)
    : dim_(dim),
      members_(static_cast<std::size_t>(num_classes)),
      centers_(static_cast<std::size_t>(num_classes)) {
  if (num_classes < 1 || dim < 1) throw ConfigError("class center bank needs >= 1 class and dim >= 1");
}

void ClassCenterBank::append(const model::FeatureVector& feature) {
  if (static_cast<std::int64_t>(feature.values.size()) != dim_) {
    throw InputError("feature dimension " + std::to_string(feature.values.size()) + " != bank dimension " +
                     std::to_string(dim_));
  }
  if (feature.source_class < 0 || feature.source_class >= num_classes()) {
    throw InputError("feature class outside the bank's range");
  }
  const auto c = static_cast<std::size_t>(feature.source_class);
  auto& center = centers_[c];
  auto& bucket = members_[c];
  bucket.push_back(feature);
  if (center.empty()) center.assign(static_cast<std::size_t>(dim_), 0.0);
  const double n = static_cast<double>(bucket.size());
  for (std::size_t i = 0; i < center.size(); ++i) {
    center[i] += (static_cast<double>(feature.values[i]) - center[i]) / n;
  }
}

void ClassCenterBank::append(const torch::Tensor& features, const torch::Tensor& labels) {
  for (auto& fv : model::to_feature_vectors(features, labels)) append(fv);
}

std::size_t ClassCenterBank::total() const noexcept {
  std::size_t n = 0;
  for (const auto& m : members_) n += m.size();
  return n;
}

std::pair<torch::Tensor, torch::Tensor> ClassCenterBank::snapshot() const {
  auto centers = torch::zeros({num_classes(), dim_}, torch::kFloat64);
  auto mask = torch::zeros({num_classes()}, torch::kBool);
  for (std::int64_t c = 0; c < num_classes(); ++c) {
    const auto& v = centers_[static_cast<std::size_t>(c)];
    if (v.empty()) continue;
    centers[c] = torch::from_blob(const_cast<double*>(v.data()), {dim_}, torch::kFloat64).clone();
    mask[c] = true;
  }
  return {centers.to(torch::kFloat32), mask};
}

CropRecord sample_crop(std::int64_t height, std::int64_t width, const SynthesisConfig& cfg, Rng& rng) {
  if (cfg.eta * static_cast<double>(std::min(height, width)) < 1.0) {
    throw ConfigError("eta * image side is below one pixel");
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  CropRecord rec{false, 0, 0, height, width, 1.0};
  if (!(unit(rng) < cfg.crop_prob)) return rec;
  rec.applied = true;
  rec.scale = cfg.eta >= 1.0 ? 1.0 : std::uniform_real_distribution<double>(cfg.eta, 1.0)(rng);
  rec.height = std::clamp<std::int64_t>(std::llround(rec.scale * static_cast<double>(height)), 1, height);
  rec.width = std::clamp<std::int64_t>(std::llround(rec.scale * static_cast<double>(width)), 1, width);
  rec.top = std::uniform_int_distribution<std::int64_t>(0, height - rec.height)(rng);
  rec.left = std::uniform_int_distribution<std::int64_t>(0, width - rec.width)(rng);
  return rec;
}

torch::Tensor apply_crop(const torch::Tensor& image, const CropRecord& record) {
  if (image.dim() != 3) throw InputError("apply_crop expects a [C, H, W] image");
  const auto h = image.size(1);
  const auto w = image.size(2);
  if (!record.applied) return image;
  if (record.top < 0 || record.left < 0 || record.height < 1 || record.width < 1 || record.top + record.height > h ||
      record.left + record.width > w) {
    throw InputError("crop rectangle lies outside the image");
  }
  if (record.height == h && record.width == w) return image;
  const auto patch = image.slice(1, record.top, record.top + record.height)
                         .slice(2, record.left, record.left + record.width);
  return F::interpolate(patch.unsqueeze(0), F::InterpolateFuncOptions()
                                                .size(std::vector<std::int64_t>{h, w})
                                                .mode(torch::kBilinear)
                                                .align_corners(false))
      .squeeze(0);
}

std::pair<torch::Tensor, CropRecord> local_object_reinforcement(const torch::Tensor& image,
                                                                const SynthesisConfig& cfg, Rng& rng) {
  if (image.dim() != 3) throw InputError("local_object_reinforcement expects a [C, H, W] image");
  const auto rec = sample_crop(image.size(1), image.size(2), cfg, rng);
  return {apply_crop(image, rec), rec};
}

torch::Tensor bns_loss(const model::BatchStats& stats, const model::BNStatsProfile& profile) {
  if (stats.size() != profile.size()) {
    throw StructuralError("batch stats cover " + std::to_string(stats.size()) + " BN layers, profile has " +
                          std::to_string(profile.size()));
  }
  torch::Tensor total;
  for (std::size_t l = 0; l < stats.size(); ++l) {
    const auto& ref = profile.layers[l];
    if (stats.mean[l].numel() != ref.channels() || stats.var[l].numel() != ref.channels()) {
      throw StructuralError("channel mismatch at BN layer '" + ref.name + "'");
    }
    const auto mu = ref.running_mean.to(stats.mean[l].dtype());
    const auto var = ref.running_var.to(stats.var[l].dtype());
    auto term = (stats.mean[l] - mu).pow(2).sum() + (stats.var[l] - var).pow(2).sum();
    total = total.defined() ? total + term : term;
  }
  return total.defined() ? total : torch::zeros({});
}

double cosine_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InputError("cosine distance between vectors of different length");
  const double dot = std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
  const double na = std::sqrt(std::inner_product(a.begin(), a.end(), a.begin(), 0.0));
  const double nb = std::sqrt(std::inner_product(b.begin(), b.end(), b.begin(), 0.0));
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine distance of a zero-norm vector");
  return 1.0 - dot / (na * nb);
}

double mdc_hinge(double distance, double lambda_l, double lambda_u) {
  return std::max(lambda_l - distance, 0.0) + std::max(distance - lambda_u, 0.0);
}

double mdc_loss(const model::FeatureVector& feature, const ClassCenterBank& bank, const SynthesisConfig& cfg) {
  if (feature.source_class < 0 || feature.source_class >= bank.num_classes()) {
    throw InputError("feature class outside the bank's range");
  }
  if (bank.count(feature.source_class) == 0) return 0.0;
  const std::vector<double> f(feature.values.begin(), feature.values.end());
  return mdc_hinge(cosine_distance(f, bank.center(feature.source_class)), cfg.lambda_l, cfg.lambda_u);
}

torch::Tensor mdc_loss_batch(const torch::Tensor& features, const torch::Tensor& labels, const torch::Tensor& centers,
                             const torch::Tensor& has_center, const SynthesisConfig& cfg) {
  if (features.dim() != 2 || centers.dim() != 2 || features.size(1) != centers.size(1)) {
    throw InputError("mdc: features [N, D] and centers [K, D] must share D");
  }
  const auto mask = has_center.index_select(0, labels).to(features.dtype());
  if (mask.sum().item<double>() == 0.0) return torch::zeros({}, features.options());
  const auto c = centers.to(features.dtype()).index_select(0, labels);
  const auto fn = features.norm(2, 1);
  auto cn = c.norm(2, 1);
  {
    torch::NoGradGuard guard;
    if ((fn * mask).eq(0).logical_and(mask.gt(0)).any().item<bool>()) {
      throw NumericError("mdc: zero-norm feature vector");
    }
    if ((cn * mask).eq(0).logical_and(mask.gt(0)).any().item<bool>()) {
      throw NumericError("mdc: zero-norm class center");
    }
  }
  const auto ones = torch::ones_like(fn);
  const auto safe_fn = torch::where(mask.gt(0), fn, ones);
  cn = torch::where(mask.gt(0), cn, ones);
  const auto d = 1.0 - (features * c).sum(1) / (safe_fn * cn);
  const auto hinge = torch::relu(cfg.lambda_l - d) + torch::relu(d - cfg.lambda_u);
  return (hinge * mask).mean();
}

double soft_inception_loss(std::span<const double> probs, std::int64_t label, double soft_target) {
  if (label < 0 || label >= static_cast<std::int64_t>(probs.size())) throw InputError("label out of range");
  const double diff = probs[static_cast<std::size_t>(label)] - soft_target;
  return diff * diff;
}

namespace {

torch::Tensor label_probs(const torch::Tensor& probs, const torch::Tensor& labels) {
  if (probs.dim() != 2 || labels.dim() != 1 || probs.size(0) != labels.size(0)) {
    throw InputError("probs must be [N, K] with one label per row");
  }
  if (labels.numel() > 0 &&
      (labels.min().item<std::int64_t>() < 0 || labels.max().item<std::int64_t>() >= probs.size(1))) {
    throw InputError("label out of range");
  }
  return probs.gather(1, labels.to(torch::kInt64).unsqueeze(1)).squeeze(1);
}

}  // namespace

torch::Tensor soft_inception_loss_batch(const torch::Tensor& probs, const torch::Tensor& labels,
                                        const torch::Tensor& soft_targets) {
  return (label_probs(probs, labels) - soft_targets.to(probs.dtype())).pow(2).mean();
}

double hard_inception_loss(std::span<const double> probs, std::int64_t label) {
  if (label < 0 || label >= static_cast<std::int64_t>(probs.size())) throw InputError("label out of range");
  return -std::log(std::max(probs[static_cast<std::size_t>(label)], kProbFloor));
}

torch::Tensor hard_inception_loss_batch(const torch::Tensor& probs, const torch::Tensor& labels) {
  return -torch::log(label_probs(probs, labels).clamp_min(kProbFloor)).mean();
}

GenerationLoss generation_loss(const model::ForwardOutput& out, const torch::Tensor& labels,
                               const torch::Tensor& soft_targets, const model::BNStatsProfile& profile,
                               const torch::Tensor& centers, const torch::Tensor& has_center,
                               const SynthesisConfig& cfg) {
  GenerationLoss loss;
  std::vector<torch::Tensor> terms;
  if (cfg.toggles.bns) {
    terms.push_back(bns_loss(out.stats, profile));
    loss.bns = terms.back().item<double>();
  }
  if (cfg.toggles.mdc) {
    terms.push_back(mdc_loss_batch(out.features, labels, centers, has_center, cfg));
    loss.mdc = terms.back().item<double>();
  }
  if (cfg.toggles.sil) {
    terms.push_back(soft_inception_loss_batch(out.probs, labels, soft_targets));
    loss.sil = terms.back().item<double>();
  }
  if (cfg.toggles.hard_il) {
    terms.push_back(hard_inception_loss_batch(out.probs, labels));
    loss.hard_il = terms.back().item<double>();
  }
  loss.total = torch::zeros({}, out.logits.options());
  for (const auto& t : terms) loss.total = loss.total + t;
  return loss;
}

GenerationLoss generation_loss(model::Classifier& model, const torch::Tensor& views, const torch::Tensor& labels,
                               const torch::Tensor& soft_targets, const model::BNStatsProfile& profile,
                               const ClassCenterBank& bank, const SynthesisConfig& cfg) {
  const auto out = model::forward_with_stats(model, views, cfg.toggles.bns);
  const auto [centers, has_center] = bank.snapshot();
  return generation_loss(out, labels, soft_targets, profile, centers, has_center, cfg);
}

PlateauSchedule::PlateauSchedule(double initial_lr, double decay, std::int64_t patience, double threshold)
    : lr_(initial_lr),
      decay_(decay),
      patience_(patience),
      threshold_(threshold),
      best_(std::numeric_limits<double>::infinity()) {}

double PlateauSchedule::observe(double loss) {
  if (loss < best_ * (1.0 - threshold_)) {
    best_ = loss;
    bad_ = 0;
  } else if (++bad_ > patience_) {
    lr_ *= decay_;
    ++decays_;
    bad_ = 0;
  }
  return lr_;
}

torch::Tensor round_robin_labels(std::int64_t count, std::int64_t num_classes, std::int64_t offset) {
  if (num_classes < 1) throw ConfigError("num_classes must be positive");
  return (torch::arange(count, torch::kInt64) + offset).remainder(num_classes);
}

namespace {

// Keeps the frozen model's parameters out of the autograd graph for a round.
class FreezeParameters {
 public:
  explicit FreezeParameters(torch::nn::Module& m) {
    for (auto& p : m.parameters()) {
      saved_.emplace_back(p, p.requires_grad());
      p.set_requires_grad(false);
    }
  }
  ~FreezeParameters() {
    for (auto& [p, flag] : saved_) p.set_requires_grad(flag);
  }
  FreezeParameters(const FreezeParameters&) = delete;
  FreezeParameters& operator=(const FreezeParameters&) = delete;

 private:
  std::vector<std::pair<torch::Tensor, bool>> saved_;
};

std::string snapshot_of(const GenerationLoss& l, double lr) {
  std::ostringstream s;
  s << "bns=" << l.bns << " mdc=" << l.mdc << " sil=" << l.sil << " hard_il=" << l.hard_il << " lr=" << lr;
  return s.str();
}

}  // namespace

RoundResult synthesize_round(model::Classifier& model, const model::BNStatsProfile& profile, ClassCenterBank& bank,
                             const SynthesisConfig& cfg, const torch::Tensor& labels, Rng& rng,
                             std::int64_t round_id) {
  cfg.validate();
  if (labels.dim() != 1 || labels.numel() == 0) throw InputError("synthesize_round needs a non-empty label vector");
  const auto k = model->num_classes();
  if (labels.min().item<std::int64_t>() < 0 || labels.max().item<std::int64_t>() >= k) {
    throw InputError("synthesis label outside [0, num_classes)");
  }
  if (bank.num_classes() != k) throw StructuralError("class center bank and model disagree on class count");
  const auto& shape = model->input_shape();
  if (cfg.eta * static_cast<double>(std::min(shape.height, shape.width)) < 1.0) {
    throw ConfigError("eta * image side is below one pixel");
  }
  model->eval();
  FreezeParameters frozen(*model);

  const auto n = labels.size(0);
  const auto y = labels.to(torch::kInt64);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(rng());
  auto images = torch::randn({n, shape.channels, shape.height, shape.width}, gen, torch::kFloat32);
  images.set_requires_grad(true);

  std::vector<float> soft(static_cast<std::size_t>(n), 1.0f);
  if (cfg.epsilon < 1.0) {
    std::uniform_real_distribution<double> target(cfg.epsilon, 1.0);
    for (auto& t : soft) t = static_cast<float>(target(rng));
  }
  const auto soft_targets = torch::tensor(soft, torch::kFloat32);

  const auto [centers, has_center] = bank.snapshot();
  torch::optim::Adam optimizer({images},
                               torch::optim::AdamOptions(cfg.lr).betas({cfg.adam_beta1, cfg.adam_beta2}));
  PlateauSchedule schedule(cfg.lr, cfg.lr_decay, cfg.plateau_patience);

  RoundResult result;
  result.loss_trace.reserve(static_cast<std::size_t>(cfg.iterations));
  for (std::int64_t it = 0; it < cfg.iterations; ++it) {
    torch::Tensor views = images;
    if (cfg.crop_prob > 0.0) {
      std::vector<torch::Tensor> per_image;
      per_image.reserve(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) per_image.push_back(local_object_reinforcement(images[i], cfg, rng).first);
      views = torch::stack(per_image);
    }
    const auto out = model::forward_with_stats(model, views, cfg.toggles.bns);
    const auto loss = generation_loss(out, y, soft_targets, profile, centers, has_center, cfg);
    const double value = loss.total.item<double>();
    if (!std::isfinite(value)) throw SynthesisAborted(round_id, it, snapshot_of(loss, schedule.lr()));
    result.loss_trace.push_back(value);
    result.lr_trace.push_back(schedule.lr());

    optimizer.zero_grad();
    if (loss.total.requires_grad()) {
      loss.total.backward();
      optimizer.step();
    }
    const double next_lr = schedule.observe(value);
    static_cast<torch::optim::AdamOptions&>(optimizer.param_groups()[0].options()).lr(next_lr);
  }

  auto finished = images.detach().clone();
  torch::Tensor final_labels = y.clone();
  {
    torch::NoGradGuard guard;
    const auto out = model->run(finished, false);
    if (!torch::isfinite(out.features).all().item<bool>()) {
      throw SynthesisAborted(round_id, cfg.iterations, "non-finite features on finished images");
    }
    if (!cfg.uses_labels()) final_labels = out.logits.argmax(1);
    bank.append(out.features, final_labels);
  }

  result.set.images = finished;
  result.set.labels = final_labels;
  result.set.soft_targets = soft_targets;
  result.set.rounds.assign(static_cast<std::size_t>(n), round_id);
  result.set.num_classes = k;
  return result;
}

SyntheticImageSet synthesize_set(model::Classifier& model, const model::BNStatsProfile& profile,
                                 ClassCenterBank& bank, const SynthesisConfig& cfg, std::int64_t total_images,
                                 Rng& rng, const RoundCallback& on_round) {
  cfg.validate();
  if (total_images < 0 || total_images % cfg.batch_size != 0) {
    throw ConfigError("total synthetic images must be a non-negative multiple of the synthesis batch size");
  }
  SyntheticImageSet all;
  all.num_classes = model->num_classes();
  const auto rounds = total_images / cfg.batch_size;
  for (std::int64_t r = 0; r < rounds; ++r) {
    const auto labels = round_robin_labels(cfg.batch_size, model->num_classes(), r * cfg.batch_size);
    auto res = synthesize_round(model, profile, bank, cfg, labels, rng, r);
    if (on_round) on_round(r, res);
    all.append(res.set);
  }
  return all;
}

}  // namespace intraq::synthesis
