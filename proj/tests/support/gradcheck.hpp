#pragma once

// Central-difference gradient checks for every op kind, in double precision.
// Shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "poisonforge/ops.hpp"
#include "poisonforge/tensor.hpp"

namespace pftest {

using DTensor = poisonforge::BasicTensor<double>;
using DTape = poisonforge::BasicTape<double>;
namespace ops = poisonforge::ops;

struct GradCheckResult {
  std::string op;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
};

// Inputs are leaves; `fn` builds the op output from them. The scalar probed is
// <out, w> for a fixed random w, so every output element contributes.
inline GradCheckResult grad_check(const std::string& name, std::vector<DTensor> inputs,
                                  const std::function<DTensor(const std::vector<DTensor>&)>& fn,
                                  std::size_t samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  for (auto& x : inputs) x.set_requires_grad(true);

  DTensor weights;
  auto scalar = [&](const std::vector<DTensor>& in) {
    DTensor out = fn(in);
    DTensor row = ops::reshape(out, {1, out.numel()});
    if (!weights.defined()) {
      std::vector<double> w(out.numel());
      for (auto& v : w) v = normal(rng);
      weights = DTensor({out.numel(), 1}, std::move(w));
    }
    return ops::matmul(row, weights);
  };

  std::vector<std::vector<double>> analytic(inputs.size());
  {
    DTape tape;
    DTensor loss = scalar(inputs);
    tape.backward(loss);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      analytic[k].assign(inputs[k].grad().begin(), inputs[k].grad().end());
    }
  }
  for (auto& x : inputs) x.clear_grad();

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) coords.emplace_back(k, i);
  std::shuffle(coords.begin(), coords.end(), rng);
  if (coords.size() > samples) coords.resize(samples);

  GradCheckResult result{name, coords.size(), 0.0};
  const double h = 1e-6;
  for (auto [k, i] : coords) {
    auto v = inputs[k].mutable_values();
    const double saved = v[i];
    v[i] = saved + h;
    const double up = scalar(inputs).item();
    v[i] = saved - h;
    const double down = scalar(inputs).item();
    v[i] = saved;
    const double numeric = (up - down) / (2 * h);
    const double a = analytic[k][i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-3});
    result.max_rel_error = std::max(result.max_rel_error, std::abs(a - numeric) / denom);
  }
  return result;
}

// Values in [lo, hi] kept at least `gap` away from every point in `kinks`.
inline DTensor random_tensor(poisonforge::Shape shape, std::mt19937_64& rng, double lo = -1.0,
                             double hi = 1.0, std::vector<double> kinks = {}, double gap = 0.05) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(poisonforge::shape_numel(shape));
  for (auto& x : v) {
    do x = u(rng);
    while (std::any_of(kinks.begin(), kinks.end(), [&](double k) { return std::abs(x - k) < gap; }));
  }
  return DTensor(std::move(shape), std::move(v));
}

// One check per op kind, each over `samples` random parameters.
inline std::vector<GradCheckResult> check_all_ops(std::size_t samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheckResult> out;
  auto run = [&](const std::string& name, std::vector<DTensor> in,
                 std::function<DTensor(const std::vector<DTensor>&)> fn) {
    out.push_back(grad_check(name, std::move(in), fn, samples, rng()));
  };
  using V = std::vector<DTensor>;

  run("matmul", {random_tensor({7, 9}, rng), random_tensor({9, 6}, rng)},
      [](const V& x) { return ops::matmul(x[0], x[1]); });
  run("bias_add", {random_tensor({8, 13}, rng), random_tensor({13}, rng)},
      [](const V& x) { return ops::bias_add(x[0], x[1]); });
  run("conv2d", {random_tensor({2, 3, 7, 7}, rng), random_tensor({4, 3, 3, 3}, rng),
                 random_tensor({4}, rng)},
      [](const V& x) { return ops::conv2d(x[0], x[1], x[2], {1, 1}); });
  run("conv2d_stride2", {random_tensor({2, 2, 8, 8}, rng), random_tensor({3, 2, 3, 3}, rng),
                         random_tensor({3}, rng)},
      [](const V& x) { return ops::conv2d(x[0], x[1], x[2], {2, 0}); });
  run("conv_transpose2d", {random_tensor({2, 3, 4, 4}, rng), random_tensor({3, 2, 4, 4}, rng),
                           random_tensor({2}, rng)},
      [](const V& x) { return ops::conv_transpose2d(x[0], x[1], x[2], {2, 1}); });
  {
    // Distinct values so every pooling window has a unique maximum.
    std::vector<double> v(2 * 3 * 6 * 6);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.01 * static_cast<double>(i);
    std::shuffle(v.begin(), v.end(), rng);
    run("maxpool2d", {DTensor({2, 3, 6, 6}, v)},
        [](const V& x) { return ops::maxpool2d(x[0], 2, 2); });
  }
  run("relu", {random_tensor({5, 20}, rng, -1, 1, {0.0})},
      [](const V& x) { return ops::relu(x[0]); });
  run("sigmoid", {random_tensor({5, 20}, rng, -3, 3)},
      [](const V& x) { return ops::sigmoid(x[0]); });
  run("tanh", {random_tensor({5, 20}, rng, -2, 2)}, [](const V& x) { return ops::tanh(x[0]); });
  run("add", {random_tensor({6, 17}, rng), random_tensor({6, 17}, rng)},
      [](const V& x) { return ops::add(x[0], x[1]); });
  run("add_broadcast", {random_tensor({6, 17}, rng), random_tensor({1}, rng)},
      [](const V& x) { return ops::add(x[0], x[1]); });
  run("sub", {random_tensor({6, 17}, rng), random_tensor({6, 17}, rng)},
      [](const V& x) { return ops::sub(x[0], x[1]); });
  run("scale", {random_tensor({6, 17}, rng)}, [](const V& x) { return ops::scale(x[0], -2.5); });
  run("clip", {random_tensor({6, 17}, rng, -1, 1, {-0.5, 0.5})},
      [](const V& x) { return ops::clip(x[0], -0.5, 0.5); });
  run("concat", {random_tensor({3, 2, 4}, rng), random_tensor({3, 5, 4}, rng)},
      [](const V& x) { return ops::concat(V{x[0], x[1]}, 1); });
  run("flatten", {random_tensor({3, 2, 4, 5}, rng)}, [](const V& x) { return ops::flatten(x[0]); });
  run("reshape", {random_tensor({6, 20}, rng)},
      [](const V& x) { return ops::reshape(x[0], {4, 5, 6}); });
  run("sum", {random_tensor({9, 13}, rng)}, [](const V& x) { return ops::sum(x[0]); });
  run("mean", {random_tensor({9, 13}, rng)}, [](const V& x) { return ops::mean(x[0]); });
  {
    DTensor a = random_tensor({6, 19}, rng);
    std::vector<double> shifted(a.values().begin(), a.values().end());
    std::uniform_real_distribution<double> off(0.1, 0.5);
    std::bernoulli_distribution sign;
    for (auto& v : shifted) v += sign(rng) ? off(rng) : -off(rng);
    DTensor b({6, 19}, shifted);
    run("l1_loss", {a, b}, [](const V& x) { return ops::l1_loss(x[0], x[1]); });
    run("l1_loss_mean", {a.clone(), b.clone()},
        [](const V& x) { return ops::l1_loss(x[0], x[1], ops::Reduction::mean); });
  }
  run("l2_loss", {random_tensor({6, 19}, rng), random_tensor({6, 19}, rng)},
      [](const V& x) { return ops::l2_loss(x[0], x[1]); });
  run("l2_loss_mean", {random_tensor({6, 19}, rng), random_tensor({6, 19}, rng)},
      [](const V& x) { return ops::l2_loss(x[0], x[1], ops::Reduction::mean); });
  {
    // Targets are constants; only the probabilities are differentiated.
    DTensor targets = random_tensor({40, 3}, rng, 0, 1);
    run("bce_loss", {random_tensor({40, 3}, rng, 0.05, 0.95)},
        [targets](const V& x) { return ops::bce_loss(x[0], targets); });
  }
  {
    std::vector<int> labels(12);
    for (auto& l : labels) l = static_cast<int>(rng() % 10);
    run("softmax_cross_entropy", {random_tensor({12, 10}, rng, -3, 3)},
        [labels](const V& x) { return ops::softmax_cross_entropy(x[0], labels); });
  }
  return out;
}

}  // namespace pftest
