// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>
#include <torch/torch.h>

#include "intraq/model.hpp"
#include "intraq/quant.hpp"
#include "intraq/synthesis.hpp"

using namespace intraq;

static void BM_FakeQuantize(benchmark::State& state) {
  torch::manual_seed(0);
  const auto x = torch::randn({256, 16, 32, 32});
  const auto spec = quant::QuantSpec::per_tensor(static_cast<int>(state.range(0)), -2.0, 2.0);
  for (auto _ : state) benchmark::DoNotOptimize(quant::fake_quantize(x, spec));
  state.SetItemsProcessed(state.iterations() * x.numel());
}
BENCHMARK(BM_FakeQuantize)->Arg(2)->Arg(4)->Arg(8);

static void BM_PerChannelWeight(benchmark::State& state) {
  torch::manual_seed(0);
  const auto w = torch::randn({64, 64, 3, 3});
  for (auto _ : state) {
    const auto spec = quant::per_channel_minmax(w, 4);
    benchmark::DoNotOptimize(quant::fake_quantize(w, spec));
  }
}
BENCHMARK(BM_PerChannelWeight);

static void BM_ApplyCrop(benchmark::State& state) {
  torch::manual_seed(0);
  const auto img = torch::randn({3, 32, 32});
  synthesis::CropRecord rec{true, 4, 6, 16, 16, 0.5};
  for (auto _ : state) benchmark::DoNotOptimize(synthesis::apply_crop(img, rec));
}
BENCHMARK(BM_ApplyCrop);

static void BM_GenerationForward(benchmark::State& state) {
  torch::manual_seed(0);
  model::ArchConfig arch;
  arch.base_width = 16;
  auto f = model::make_classifier(arch);
  f->eval();
  const auto profile = model::capture_bn_profile(f);
  const auto batch = torch::randn({state.range(0), 3, 32, 32});
  for (auto _ : state) {
    auto out = model::forward_with_stats(f, batch);
    benchmark::DoNotOptimize(synthesis::bns_loss(out.stats, profile));
  }
}
BENCHMARK(BM_GenerationForward)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
