#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "poisonforge/errors.hpp"
#include "poisonforge/tensor.hpp"

namespace poisonforge {

template <class T>
struct OptimizerState {
  double learning_rate = 1e-3;
  // One buffer per parameter, same length as the parameter. SGD leaves both empty.
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  std::size_t step_count = 0;
};

namespace detail {

template <class T>
void check_gradients(const std::vector<BasicTensor<T>>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) {
      throw AutodiffError("optimizer: parameter " + std::to_string(i) + " has no gradient");
    }
    for (T g : params[i].grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("optimizer: parameter " + std::to_string(i) +
                           " has a non-finite gradient");
      }
    }
  }
}

template <class T>
void ensure_buffers(std::vector<std::vector<T>>& buffers,
                    const std::vector<BasicTensor<T>>& params) {
  if (buffers.empty()) {
    for (const auto& p : params) buffers.emplace_back(p.numel(), T(0));
    return;
  }
  if (buffers.size() != params.size()) {
    throw AutodiffError("optimizer: parameter list changed between steps");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (buffers[i].size() != params[i].numel()) {
      throw AutodiffError("optimizer: parameter " + std::to_string(i) + " changed shape");
    }
  }
}

}  // namespace detail

/// Plain gradient descent: w <- w - lr * g, then grads are cleared.
template <class T>
class BasicSgd {
 public:
  explicit BasicSgd(double learning_rate) { state_.learning_rate = learning_rate; }

  void step(std::vector<BasicTensor<T>>& params) {
    detail::check_gradients(params);
    const T lr = static_cast<T>(state_.learning_rate);
    for (auto& p : params) {
      auto w = p.mutable_values();
      const auto g = p.grad();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
      p.clear_grad();
    }
    ++state_.step_count;
  }

  const OptimizerState<T>& state() const noexcept { return state_; }

 private:
  OptimizerState<T> state_;
};

/// Adam with bias correction. Grads are cleared after each step.
template <class T>
class BasicAdam {
 public:
  explicit BasicAdam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
                     double epsilon = 1e-8)
      : beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
    state_.learning_rate = learning_rate;
  }

  void step(std::vector<BasicTensor<T>>& params) {
    detail::check_gradients(params);
    detail::ensure_buffers(state_.first_moment, params);
    detail::ensure_buffers(state_.second_moment, params);
    ++state_.step_count;
    const double t = static_cast<double>(state_.step_count);
    const double lr_t = state_.learning_rate * std::sqrt(1.0 - std::pow(beta2_, t)) /
                        (1.0 - std::pow(beta1_, t));
    const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
    const T lr = static_cast<T>(lr_t), eps = static_cast<T>(epsilon_);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto w = params[k].mutable_values();
      const auto g = params[k].grad();
      auto& m = state_.first_moment[k];
      auto& v = state_.second_moment[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
        w[i] -= lr * m[i] / (std::sqrt(v[i]) + eps);
      }
      params[k].clear_grad();
    }
  }

  const OptimizerState<T>& state() const noexcept { return state_; }

 private:
  OptimizerState<T> state_;
  double beta1_, beta2_, epsilon_;
};

using Sgd = BasicSgd<float>;
using Adam = BasicAdam<float>;

// Drops accumulated gradients without stepping.
template <class T>
void zero_grads(std::vector<BasicTensor<T>>& params) {
  for (auto& p : params) p.clear_grad();
}

}  // namespace poisonforge
