// Serial reference kernels against their OpenMP counterparts.

#include <benchmark/benchmark.h>

#include <vector>

#include "miencap/kernels.hpp"
#include "miencap/neural.hpp"
#include "miencap/retrieval.hpp"
#include "miencap/synth.hpp"

using namespace miencap;

namespace {

std::vector<double> random_vector(size_t n, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) {
    x = rng.uniform(-1.0, 1.0);
  }
  return v;
}

Execution mode(const benchmark::State& state) {
  return state.range(0) ? Execution::parallel : Execution::serial;
}

void BM_DenseForward(benchmark::State& state) {
  const size_t in = 352, out = 256, batch = static_cast<size_t>(state.range(1));
  const auto w = random_vector(in * out, 1), b = random_vector(out, 2), x = random_vector(in * batch, 3);
  std::vector<double> y(out * batch);
  for (auto _ : state) {
    kernels::dense_forward(w, b, in, out, x, batch, y, mode(state));
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations() * in * out * batch));
}
BENCHMARK(BM_DenseForward)->ArgsProduct({{0, 1}, {10, 64}});

void BM_DenseGradients(benchmark::State& state) {
  const size_t in = 352, out = 256, batch = static_cast<size_t>(state.range(1));
  const auto d = random_vector(out * batch, 4), x = random_vector(in * batch, 5);
  std::vector<double> gw(in * out), gb(out);
  for (auto _ : state) {
    kernels::dense_accumulate_gradients(d, x, batch, in, out, gw, gb, mode(state));
    benchmark::DoNotOptimize(gw.data());
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations() * in * out * batch));
}
BENCHMARK(BM_DenseGradients)->ArgsProduct({{0, 1}, {10, 64}});

void BM_DenseBackprop(benchmark::State& state) {
  const size_t in = 256, out = 256, batch = static_cast<size_t>(state.range(1));
  const auto w = random_vector(in * out, 6), d = random_vector(out * batch, 7);
  std::vector<double> g(in * batch);
  for (auto _ : state) {
    kernels::dense_backpropagate(w, in, out, d, batch, g, mode(state));
    benchmark::DoNotOptimize(g.data());
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations() * in * out * batch));
}
BENCHMARK(BM_DenseBackprop)->ArgsProduct({{0, 1}, {10, 64}});

void BM_TrainEpoch(benchmark::State& state) {
  const synth::PiecewiseLinearMap map(100, 80, 11);
  const auto data = map.sample(1000, 12);
  const size_t hidden[] = {128, 128};
  const auto model = make_mlp(100, hidden, 80, 13);
  TrainConfig config;
  config.epochs = 1;
  for (auto _ : state) {
    auto result = sgd_train(model, data, config, LossKind::squared_error, mode(state));
    benchmark::DoNotOptimize(result.loss_curve.data());
  }
}
BENCHMARK(BM_TrainEpoch)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_PairDatabase(benchmark::State& state) {
  auto faces_db = [](const char* prefix, double style, uint64_t seed) {
    std::vector<LandmarkRecord> lm;
    std::vector<EmotionRecord> em;
    for (auto& f : synth::make_faces(1000, prefix, style, seed)) {
      lm.push_back(f.landmarks);
      em.push_back(f.emotion);
    }
    return build_database(lm, em, default_mean_face(), default_semantic_map(), prefix);
  };
  const auto source = faces_db("h", 1.0, 1);
  const auto target = faces_db("c", 1.8, 2);
  for (auto _ : state) {
    auto pairs = build_pair_database(source, target, kDefaultTopK, mode(state));
    benchmark::DoNotOptimize(pairs.data());
  }
}
BENCHMARK(BM_PairDatabase)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
