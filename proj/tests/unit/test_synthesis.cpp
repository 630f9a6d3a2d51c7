// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "intraq/errors.hpp"
#include "intraq/model.hpp"
#include "intraq/synthesis.hpp"

using namespace intraq;
using namespace intraq::synthesis;

namespace {

model::FeatureVector fv(std::vector<float> v, std::int64_t c) { return {std::move(v), c}; }

// conv -> BN -> relu -> pool -> linear on a C x H x W input.
model::Classifier toy_net(std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t classes) {
  model::Classifier m(model::InputShape{c, h, w}, classes);
  m->add_conv("conv", torch::nn::Conv2dOptions(c, 3, 3).padding(1));
  m->add_batch_norm("bn", 3);
  m->add_relu("relu");
  m->add_global_avg_pool("pool");
  m->add_linear("fc", 3, classes);
  return m;
}

model::BNStatsProfile shifted_profile(model::Classifier& m, double shift) {
  auto p = model::capture_bn_profile(m);
  for (auto& l : p.layers) {
    l.running_mean = l.running_mean + shift;
    l.running_var = l.running_var * (1.0 + shift);
  }
  return p;
}

SynthesisConfig small_cfg() {
  SynthesisConfig cfg;
  cfg.iterations = 5;
  cfg.batch_size = 4;
  return cfg;
}

}  // namespace

TEST(SynthesisConfig, ValidationRules) {
  SynthesisConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  auto bad = cfg;
  bad.lambda_l = 0.9;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.epsilon = 1.5;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.eta = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.toggles.hard_il = true;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.toggles.sil = false;
  EXPECT_THROW(bad.validate(), ConfigError);  // mdc without a label term
}

TEST(Lor, ZeroProbabilityIsIdentity) {
  SynthesisConfig cfg;
  cfg.crop_prob = 0.0;
  Rng rng(1);
  const auto img = torch::randn({3, 8, 8}, torch::kFloat64).requires_grad_(true);
  auto [view, rec] = local_object_reinforcement(img, cfg, rng);
  EXPECT_FALSE(rec.applied);
  EXPECT_TRUE(torch::equal(view, img));
  view.sum().backward();
  EXPECT_TRUE(torch::equal(img.grad(), torch::ones_like(img)));
}

TEST(Lor, FullScaleCropIsIdentity) {
  const auto img = torch::randn({3, 8, 8}, torch::kFloat64);
  CropRecord rec{true, 0, 0, 8, 8, 1.0};
  EXPECT_TRUE(torch::allclose(apply_crop(img, rec), img, 0.0, 1e-12));
}

TEST(Lor, CropStaysInsideAndScaleInRange) {
  SynthesisConfig cfg;
  cfg.crop_prob = 1.0;
  cfg.eta = 0.3;
  Rng rng(2);
  for (int i = 0; i < 2000; ++i) {
    const auto r = sample_crop(32, 32, cfg, rng);
    ASSERT_TRUE(r.applied);
    EXPECT_GE(r.scale, 0.3);
    EXPECT_LE(r.scale, 1.0);
    EXPECT_GE(r.top, 0);
    EXPECT_GE(r.left, 0);
    EXPECT_LE(r.top + r.height, 32);
    EXPECT_LE(r.left + r.width, 32);
    EXPECT_GE(r.height, 1);
  }
}

TEST(Lor, SubPixelEtaIsConfigError) {
  SynthesisConfig cfg;
  cfg.eta = 0.1;
  Rng rng(3);
  EXPECT_THROW(sample_crop(8, 8, cfg, rng), ConfigError);
}

TEST(Lor, GradientIsLocalToTheCrop) {
  const CropRecord rec{true, 0, 0, 4, 4, 0.5};
  const auto weights = torch::rand({1, 8, 8}, torch::kFloat64) + 0.5;
  auto loss_of = [&](const torch::Tensor& img) { return (apply_crop(img, rec) * weights).sum(); };
  const auto img = torch::randn({1, 8, 8}, torch::kFloat64);
  const double h = 1e-6;
  auto fd = [&](int y, int x) {
    auto p = img.clone(), m = img.clone();
    p[0][y][x] += h;
    m[0][y][x] -= h;
    return (loss_of(p).item<double>() - loss_of(m).item<double>()) / (2 * h);
  };
  EXPECT_LE(std::abs(fd(7, 7)), 1e-6);
  EXPECT_GT(std::abs(fd(0, 0)), 1e-3);

  auto x = img.clone().requires_grad_(true);
  loss_of(x).backward();
  const auto g = x.grad();
  for (int y = 0; y < 8; ++y) {
    for (int xx = 0; xx < 8; ++xx) {
      const double gv = g[0][y][xx].item<double>();
      if (y >= 4 || xx >= 4) EXPECT_EQ(gv, 0.0);
      else EXPECT_NEAR(gv, fd(y, xx), 1e-4 * std::max(1.0, std::abs(gv)));
    }
  }
}

TEST(BnsLoss, ZeroOnMatchingStats) {
  model::BatchStats stats;
  stats.mean = {torch::tensor({0.1, 0.2})};
  stats.var = {torch::tensor({1.0, 2.0})};
  model::BNStatsProfile p{{{"bn", torch::tensor({0.1, 0.2}), torch::tensor({1.0, 2.0})}}};
  EXPECT_EQ(bns_loss(stats, p).item<double>(), 0.0);
}

TEST(BnsLoss, MeanOffsetByOneOnFourChannels) {
  model::BatchStats stats;
  stats.mean = {torch::ones({4}, torch::kFloat64)};
  stats.var = {torch::full({4}, 2.0, torch::kFloat64)};
  model::BNStatsProfile p{{{"bn", torch::zeros({4}, torch::kFloat64), torch::full({4}, 2.0, torch::kFloat64)}}};
  EXPECT_DOUBLE_EQ(bns_loss(stats, p).item<double>(), 4.0);
}

TEST(BnsLoss, AdditiveOverLayersAndNonNegative) {
  torch::manual_seed(4);
  model::BatchStats both, first, second;
  model::BNStatsProfile pb, p1, p2;
  for (int l = 0; l < 2; ++l) {
    const auto m = torch::randn({3}, torch::kFloat64), v = torch::rand({3}, torch::kFloat64);
    const auto rm = torch::randn({3}, torch::kFloat64), rv = torch::rand({3}, torch::kFloat64);
    both.mean.push_back(m);
    both.var.push_back(v);
    pb.layers.push_back({"l", rm, rv});
    auto& s = l == 0 ? first : second;
    auto& p = l == 0 ? p1 : p2;
    s.mean.push_back(m);
    s.var.push_back(v);
    p.layers.push_back({"l", rm, rv});
  }
  const double total = bns_loss(both, pb).item<double>();
  EXPECT_NEAR(total, bns_loss(first, p1).item<double>() + bns_loss(second, p2).item<double>(), 1e-12);
  EXPECT_GT(total, 0.0);
}

TEST(BnsLoss, LayerMismatchIsStructuralError) {
  model::BatchStats stats;
  stats.mean = {torch::zeros({4})};
  stats.var = {torch::ones({4})};
  model::BNStatsProfile two{{{"a", torch::zeros({4}), torch::ones({4})}, {"b", torch::zeros({4}), torch::ones({4})}}};
  EXPECT_THROW(bns_loss(stats, two), StructuralError);
  model::BNStatsProfile wide{{{"a", torch::zeros({5}), torch::ones({5})}}};
  EXPECT_THROW(bns_loss(stats, wide), StructuralError);
}

TEST(Mdc, HingeExamples) {
  EXPECT_EQ(mdc_hinge(0.5, 0.3, 0.8), 0.0);
  EXPECT_NEAR(mdc_hinge(0.1, 0.3, 0.8), 0.2, 1e-15);
  EXPECT_NEAR(mdc_hinge(0.95, 0.3, 0.8), 0.15, 1e-15);
}

TEST(Mdc, LossAgainstBank) {
  SynthesisConfig cfg;
  ClassCenterBank bank(2, 2);
  // Empty class: no constraint yet.
  EXPECT_EQ(mdc_loss(fv({1.0f, 0.0f}, 0), bank, cfg), 0.0);
  bank.append(fv({1.0f, 0.0f}, 0));
  // Identical direction: d = 0, below lambda_l.
  EXPECT_NEAR(mdc_loss(fv({2.0f, 0.0f}, 0), bank, cfg), 0.3, 1e-12);
  // Orthogonal: d = 1, above lambda_u.
  EXPECT_NEAR(mdc_loss(fv({0.0f, 3.0f}, 0), bank, cfg), 0.2, 1e-12);
  EXPECT_THROW(mdc_loss(fv({0.0f, 0.0f}, 0), bank, cfg), NumericError);
  bank.append(fv({1.0f, 0.0f}, 1));
  bank.append(fv({-1.0f, 0.0f}, 1));  // center of class 1 is the zero vector
  EXPECT_THROW(mdc_loss(fv({1.0f, 0.0f}, 1), bank, cfg), NumericError);
}

TEST(Mdc, BatchMatchesScalarMean) {
  torch::manual_seed(5);
  SynthesisConfig cfg;
  ClassCenterBank bank(3, 4);
  for (int i = 0; i < 6; ++i) {
    const auto v = torch::randn({4});
    bank.append(fv({v[0].item<float>(), v[1].item<float>(), v[2].item<float>(), v[3].item<float>()}, i % 2));
  }
  const auto feats = torch::randn({5, 4});
  const auto labels = torch::tensor({0, 1, 2, 0, 1}, torch::kInt64);
  const auto [centers, has] = bank.snapshot();
  const double batch = mdc_loss_batch(feats, labels, centers, has, cfg).item<double>();
  double sum = 0;
  for (int i = 0; i < 5; ++i) {
    std::vector<float> v(4);
    for (int j = 0; j < 4; ++j) v[j] = feats[i][j].item<float>();
    sum += mdc_loss(fv(v, labels[i].item<std::int64_t>()), bank, cfg);
  }
  EXPECT_NEAR(batch, sum / 5, 1e-6);
}

TEST(Mdc, IncrementalCenterEqualsRecomputation) {
  std::mt19937_64 rng(6);
  std::normal_distribution<float> n(0.0f, 3.0f);
  ClassCenterBank bank(2, 8);
  std::vector<std::vector<double>> sums(2, std::vector<double>(8, 0.0));
  std::vector<int> counts(2, 0);
  for (int i = 0; i < 500; ++i) {
    std::vector<float> v(8);
    for (auto& x : v) x = n(rng) + 10.0f;
    const int c = i % 3 == 0 ? 1 : 0;
    for (int j = 0; j < 8; ++j) sums[c][j] += v[j];
    ++counts[c];
    bank.append(fv(v, c));
  }
  for (int c = 0; c < 2; ++c) {
    EXPECT_EQ(bank.count(c), static_cast<std::size_t>(counts[c]));
    for (int j = 0; j < 8; ++j) {
      const double full = sums[c][j] / counts[c];
      EXPECT_LE(std::abs(bank.center(c)[j] - full), 1e-9 * std::abs(full));
    }
  }
}

TEST(Sil, Examples) {
  const std::vector<double> exact{0.1, 0.9};
  EXPECT_EQ(soft_inception_loss(exact, 1, 0.9), 0.0);
  const std::vector<double> p{0.3, 0.7};
  EXPECT_NEAR(soft_inception_loss(p, 1, 0.9), 0.04, 1e-15);
  EXPECT_THROW(soft_inception_loss(p, 2, 0.9), InputError);
}

TEST(Sil, BatchIsMeanOfScalars) {
  const auto probs = torch::tensor({{0.2, 0.8}, {0.6, 0.4}, {0.5, 0.5}}, torch::kFloat64);
  const auto labels = torch::tensor({1, 0, 1}, torch::kInt64);
  const auto t = torch::tensor({0.9, 0.95, 1.0}, torch::kFloat64);
  const double expect = (std::pow(0.8 - 0.9, 2) + std::pow(0.6 - 0.95, 2) + std::pow(0.5 - 1.0, 2)) / 3;
  EXPECT_NEAR(soft_inception_loss_batch(probs, labels, t).item<double>(), expect, 1e-12);
}

TEST(HardIl, Examples) {
  const std::vector<double> one{0.0, 1.0};
  EXPECT_EQ(hard_inception_loss(one, 1), 0.0);
  const std::vector<double> inv_e{1.0 - std::exp(-1.0), std::exp(-1.0)};
  EXPECT_NEAR(hard_inception_loss(inv_e, 1), 1.0, 1e-12);
  const std::vector<double> uniform(10, 0.1);
  EXPECT_NEAR(hard_inception_loss(uniform, 3), std::log(10.0), 1e-12);
  EXPECT_NEAR(hard_inception_loss(one, 0), -std::log(kProbFloor), 1e-9);
}

TEST(GenerationLoss, BnsOnlyMatchingStatsIsZero) {
  torch::manual_seed(7);
  auto m = toy_net(3, 4, 4, 2);
  m->eval();
  const auto x = torch::randn({4, 3, 4, 4});
  const auto out = model::forward_with_stats(m, x);
  model::BNStatsProfile p{{{"bn", out.stats.mean[0].detach(), out.stats.var[0].detach()}}};
  SynthesisConfig cfg;
  cfg.toggles = {true, false, false, false};
  const auto [c, h] = ClassCenterBank(2, 3).snapshot();
  const auto l = generation_loss(out, torch::zeros({4}, torch::kInt64), torch::ones({4}), p, c, h, cfg);
  EXPECT_EQ(l.total.item<double>(), 0.0);
}

TEST(GenerationLoss, TotalIsSumOfTermsAndGradientsAdd) {
  torch::manual_seed(8);
  auto m = toy_net(1, 2, 2, 2);
  m->to(torch::kFloat64);
  m->eval();
  const auto profile = shifted_profile(m, 0.4);
  ClassCenterBank bank(2, 3);
  bank.append(fv({0.3f, 1.0f, 0.2f}, 0));
  bank.append(fv({1.0f, 0.1f, 0.5f}, 1));
  auto [centers, has] = bank.snapshot();
  centers = centers.to(torch::kFloat64);
  const auto labels = torch::tensor({0, 1}, torch::kInt64);
  const auto targets = torch::tensor({0.95, 0.9}, torch::kFloat64);
  const auto base = torch::randn({2, 1, 2, 2}, torch::kFloat64);

  auto eval = [&](LossToggles t, const torch::Tensor& img) {
    SynthesisConfig cfg;
    cfg.lambda_l = 0.5;
    cfg.lambda_u = 0.6;
    cfg.toggles = t;
    const auto out = model::forward_with_stats(m, img, t.bns);
    return generation_loss(out, labels, targets, profile, centers, has, cfg);
  };
  auto grad_of = [&](LossToggles t) {
    auto img = base.clone().requires_grad_(true);
    auto l = eval(t, img);
    l.total.backward();
    return std::make_pair(l, img.grad().clone());
  };
  const auto [total, g_total] = grad_of({true, true, true, false});
  EXPECT_NEAR(total.total.item<double>(), total.bns + total.mdc + total.sil, 1e-12);
  const auto [lb, gb] = grad_of({true, false, false, false});
  const auto [ls, gs] = grad_of({false, false, true, false});
  // The mdc term is only defined alongside a label term; isolate it by difference.
  const auto [lms, gms] = grad_of({false, true, true, false});
  const auto gm = gms - gs;
  EXPECT_TRUE(torch::allclose(g_total, gb + gm + gs, 1e-9, 1e-12));

  // Finite differences of the total on the 4-pixel image.
  const double h = 1e-6;
  for (int i = 0; i < 2; ++i) {
    for (int p = 0; p < 4; ++p) {
      auto plus = base.clone(), minus = base.clone();
      plus[i][0][p / 2][p % 2] += h;
      minus[i][0][p / 2][p % 2] -= h;
      const double fd = (eval({true, true, true, false}, plus).total.item<double>() -
                         eval({true, true, true, false}, minus).total.item<double>()) /
                        (2 * h);
      const double g = g_total[i][0][p / 2][p % 2].item<double>();
      EXPECT_NEAR(g, fd, 1e-4 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(GenerationLoss, KnownComponentsAdd) {
  // Scalar components 0.2 (bns), 0.1 (mdc), 0.04 (sil) sum to 0.34.
  model::BatchStats stats;
  stats.mean = {torch::tensor({std::sqrt(0.2)}, torch::kFloat64)};
  stats.var = {torch::tensor({1.0}, torch::kFloat64)};
  model::BNStatsProfile profile{{{"bn", torch::zeros({1}, torch::kFloat64), torch::ones({1}, torch::kFloat64)}}};
  model::ForwardOutput out;
  out.stats = stats;
  out.probs = torch::tensor({{0.3, 0.7}}, torch::kFloat64);
  out.logits = out.probs.log();
  out.features = torch::tensor({{1.0, 0.0}}, torch::kFloat64);
  // d(feature, center) = 1 - cos(theta); choose theta so that d = 0.9 and lambda_u = 0.8.
  const double cos_t = 0.1;
  const auto centers = torch::tensor({{cos_t, std::sqrt(1 - cos_t * cos_t)}, {1.0, 0.0}}, torch::kFloat64);
  const auto has = torch::tensor({true, false});
  SynthesisConfig cfg;
  cfg.lambda_l = 0.3;
  cfg.lambda_u = 0.8;
  const auto l = generation_loss(out, torch::tensor({0}, torch::kInt64),
                                 torch::tensor({0.5}, torch::kFloat64), profile, centers, has, cfg);
  // label 0: p = 0.3, target 0.5 -> 0.04
  EXPECT_NEAR(l.bns, 0.2, 1e-12);
  EXPECT_NEAR(l.mdc, 0.1, 1e-12);
  EXPECT_NEAR(l.sil, 0.04, 1e-12);
  EXPECT_NEAR(l.total.item<double>(), 0.34, 1e-12);
}

TEST(Plateau, ConstantTraceDecaysEveryThirdStepAfterFirst) {
  PlateauSchedule s(1.0, 0.1, 2);
  std::vector<int> decay_at;
  double lr = s.lr();
  for (int i = 0; i < 10; ++i) {
    const double next = s.observe(5.0);
    if (next != lr) decay_at.push_back(i);
    lr = next;
  }
  EXPECT_EQ(decay_at, (std::vector<int>{3, 6, 9}));
  EXPECT_DOUBLE_EQ(s.lr(), 1e-3);
  EXPECT_EQ(s.decays(), 3);
}

TEST(Plateau, ImprovementResetsPatience) {
  PlateauSchedule s(0.5, 0.1, 1);
  EXPECT_DOUBLE_EQ(s.observe(10.0), 0.5);
  EXPECT_DOUBLE_EQ(s.observe(9.0), 0.5);
  EXPECT_DOUBLE_EQ(s.observe(9.5), 0.5);
  EXPECT_DOUBLE_EQ(s.observe(9.0), 0.05);  // 9.0 does not beat 9.0 * (1 - 1e-4)
  EXPECT_DOUBLE_EQ(s.observe(8.0), 0.05);
}

TEST(SynthesizeRound, ZeroIterationsReturnsGaussianInit) {
  torch::manual_seed(9);
  auto m = toy_net(3, 8, 8, 3);
  m->eval();
  const auto profile = model::capture_bn_profile(m);
  ClassCenterBank bank(3, 3);
  auto cfg = small_cfg();
  cfg.iterations = 0;
  Rng rng(10);
  const auto labels = round_robin_labels(4, 3);
  const auto r = synthesize_round(m, profile, bank, cfg, labels, rng);
  Rng replay(10);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(replay());
  const auto expect = torch::randn({4, 3, 8, 8}, gen, torch::kFloat32);
  EXPECT_TRUE(torch::equal(r.set.images, expect));
  EXPECT_EQ(bank.total(), 4u);
  EXPECT_TRUE(torch::equal(r.set.labels, labels));
  EXPECT_NO_THROW(r.set.validate(cfg.epsilon));
}

TEST(SynthesizeRound, ReproducibleAndDoesNotTouchModel) {
  torch::manual_seed(11);
  auto m = toy_net(3, 8, 8, 3);
  m->eval();
  const auto before = model::snapshot_state(*m);
  const auto profile = shifted_profile(m, 0.5);
  auto cfg = small_cfg();
  cfg.crop_prob = 0.5;
  auto run = [&] {
    ClassCenterBank bank(3, 3);
    bank.append(fv({1.0f, 0.5f, 0.2f}, 0));
    Rng rng(12);
    return synthesize_round(m, profile, bank, cfg, round_robin_labels(4, 3), rng);
  };
  const auto a = run();
  const auto b = run();
  EXPECT_TRUE(torch::equal(a.set.images, b.set.images));
  EXPECT_TRUE(torch::equal(a.set.soft_targets, b.set.soft_targets));
  EXPECT_EQ(a.loss_trace, b.loss_trace);
  for (const auto& [k, v] : model::snapshot_state(*m)) EXPECT_TRUE(torch::equal(v, before.at(k))) << k;
  EXPECT_FALSE(m->is_training());
}

TEST(SynthesizeRound, LossImprovesOverTheRun) {
  torch::manual_seed(13);
  auto m = model::make_classifier({"plain_cnn", 10, {3, 16, 16}, 4});
  m->train();
  {
    torch::NoGradGuard g;
    for (int i = 0; i < 5; ++i) m->forward(torch::rand({16, 3, 16, 16}) * 2);
  }
  m->eval();
  const auto profile = model::capture_bn_profile(m);
  ClassCenterBank bank(10, 16);
  SynthesisConfig cfg;
  cfg.iterations = 40;
  cfg.batch_size = 8;
  Rng rng(14);
  const auto r = synthesize_round(m, profile, bank, cfg, round_robin_labels(8, 10), rng);
  ASSERT_EQ(r.loss_trace.size(), 40u);
  const double best = *std::min_element(r.loss_trace.begin(), r.loss_trace.end());
  EXPECT_LT(best, r.loss_trace.front());
  EXPECT_LT(r.loss_trace.back(), r.loss_trace.front());
}

TEST(SynthesizeRound, SoftTargetsAreFixedPerImage) {
  torch::manual_seed(15);
  auto m = toy_net(3, 8, 8, 3);
  m->eval();
  const auto profile = model::capture_bn_profile(m);
  auto cfg = small_cfg();
  cfg.iterations = 0;
  ClassCenterBank b1(3, 3), b2(3, 3);
  Rng r1(16), r2(16);
  const auto a = synthesize_round(m, profile, b1, cfg, round_robin_labels(4, 3), r1);
  cfg.iterations = 7;
  const auto b = synthesize_round(m, profile, b2, cfg, round_robin_labels(4, 3), r2);
  EXPECT_TRUE(torch::equal(a.set.soft_targets, b.set.soft_targets));
  EXPECT_TRUE((a.set.soft_targets >= cfg.epsilon).all().item<bool>());
}

TEST(SynthesizeRound, UnlabelledModeUsesModelPredictions) {
  torch::manual_seed(17);
  auto m = toy_net(3, 8, 8, 3);
  m->eval();
  const auto profile = model::capture_bn_profile(m);
  auto cfg = small_cfg();
  cfg.toggles = {true, false, false, false};
  ClassCenterBank bank(3, 3);
  Rng rng(18);
  const auto r = synthesize_round(m, profile, bank, cfg, round_robin_labels(4, 3), rng);
  EXPECT_TRUE(torch::equal(r.set.labels, m->forward(r.set.images).argmax(1)));
}

TEST(SynthesizeRound, BadInputs) {
  auto m = toy_net(3, 8, 8, 3);
  const auto profile = model::capture_bn_profile(m);
  auto cfg = small_cfg();
  ClassCenterBank bank(3, 3);
  Rng rng(19);
  EXPECT_THROW(synthesize_round(m, profile, bank, cfg, torch::tensor({0, 5}, torch::kInt64), rng), InputError);
  ClassCenterBank wrong(4, 3);
  EXPECT_THROW(synthesize_round(m, profile, wrong, cfg, round_robin_labels(2, 3), rng), StructuralError);
}

TEST(SynthesizeSet, RoundRobinLabelsAndRounds) {
  torch::manual_seed(20);
  auto m = toy_net(3, 8, 8, 3);
  m->eval();
  const auto profile = model::capture_bn_profile(m);
  auto cfg = small_cfg();
  cfg.iterations = 2;
  ClassCenterBank bank(3, 3);
  Rng rng(21);
  std::vector<std::int64_t> seen;
  const auto set = synthesize_set(m, profile, bank, cfg, 8, rng, [&](std::int64_t r, const RoundResult&) {
    seen.push_back(r);
  });
  EXPECT_EQ(seen, (std::vector<std::int64_t>{0, 1}));
  EXPECT_EQ(set.size(), 8);
  EXPECT_TRUE(torch::equal(set.labels, round_robin_labels(8, 3)));
  EXPECT_EQ(set.rounds, (std::vector<std::int64_t>{0, 0, 0, 0, 1, 1, 1, 1}));
  EXPECT_EQ(bank.total(), 8u);
  EXPECT_THROW(synthesize_set(m, profile, bank, cfg, 6, rng), ConfigError);
}
