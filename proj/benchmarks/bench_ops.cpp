#include <benchmark/benchmark.h>

#include <vector>

#include "poisonforge/defenses.hpp"
#include "poisonforge/evaluation.hpp"
#include "poisonforge/models.hpp"
#include "poisonforge/ops.hpp"
#include "poisonforge/random.hpp"

namespace pf = poisonforge;
namespace ops = poisonforge::ops;

static void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  pf::Rng rng(1);
  const auto a = rng.normal_tensor({n, n});
  const auto b = rng.normal_tensor({n, n});
  for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

static void BM_Conv2dForward(benchmark::State& state) {
  pf::Rng rng(2);
  const auto x = rng.normal_tensor({64, 1, 28, 28});
  const auto w = rng.normal_tensor({6, 1, 5, 5});
  const auto bias = rng.normal_tensor({6});
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, w, bias));
}
BENCHMARK(BM_Conv2dForward);

static void BM_Conv2dBackward(benchmark::State& state) {
  pf::Rng rng(3);
  const auto x = rng.normal_tensor({64, 6, 12, 12});
  auto w = rng.normal_tensor({16, 6, 5, 5});
  w.set_requires_grad(true);
  const pf::Tensor none;
  for (auto _ : state) {
    pf::Tape tape;
    tape.backward(ops::sum(ops::conv2d(x, w, none)));
    w.clear_grad();
  }
}
BENCHMARK(BM_Conv2dBackward);

// One optimizer-free training step of the classifier on a 64-image batch.
static void BM_ClassifierStep(benchmark::State& state) {
  pf::Rng rng(4);
  pf::ClassifierModel model({}, rng);
  const auto x = rng.uniform_tensor({64, 1, 28, 28}, 0.0, 1.0);
  std::vector<int> labels(64);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 10);
  for (auto _ : state) {
    pf::Tape tape;
    tape.backward(ops::softmax_cross_entropy(model.forward(x), labels));
    for (auto& p : model.parameters()) p.clear_grad();
  }
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_ClassifierStep);

static void BM_Dbscan(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  pf::Rng rng(5);
  std::vector<double> points(n * 8);
  for (auto& v : points) v = rng.normal();
  for (auto _ : state) benchmark::DoNotOptimize(pf::dbscan_cluster(points, 8, 1.5, 5));
}
BENCHMARK(BM_Dbscan)->Arg(500)->Arg(2000);

static void BM_Dhash(benchmark::State& state) {
  pf::Rng rng(6);
  std::vector<float> img(784);
  for (auto& v : img) v = static_cast<float>(rng.uniform());
  for (auto _ : state) benchmark::DoNotOptimize(pf::dhash64(img, 28, 28));
}
BENCHMARK(BM_Dhash);
BENCHMARK_MAIN();
