#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "poisonforge/tensor.hpp"

// Differentiable operations. Each op validates shapes, rejects non-finite
// outputs, and records itself on the active tape when an input requires grad.
namespace poisonforge::ops {

enum class Reduction { sum, mean };

struct Conv2dAttrs {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// [M,K] x [K,N] -> [M,N]
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// x [N,F] + bias [F] broadcast over rows.
template <class T>
BasicTensor<T> bias_add(const BasicTensor<T>& x, const BasicTensor<T>& bias);

// x [N,C,H,W], weight [O,C,kh,kw], optional bias [O] -> [N,O,OH,OW]
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, Conv2dAttrs attrs = {});

// Adjoint of conv2d: x [N,C,H,W], weight [C,O,kh,kw], optional bias [O]
// -> [N,O,(H-1)*stride-2*padding+kh, ...]
template <class T>
BasicTensor<T> conv_transpose2d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                                const BasicTensor<T>& bias, Conv2dAttrs attrs = {});

template <class T>
BasicTensor<T> maxpool2d(const BasicTensor<T>& x, std::size_t kernel, std::size_t stride);

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> tanh(const BasicTensor<T>& x);

// Elementwise; b may also be a single-element tensor broadcast over a.
template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor);

// Clamp to [lo, hi]; gradient passes only where lo < x < hi.
template <class T>
BasicTensor<T> clip(const BasicTensor<T>& x, T lo, T hi);

template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis);
template <class T>
BasicTensor<T> flatten(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x);

// sum|a-b| or mean|a-b|
template <class T>
BasicTensor<T> l1_loss(const BasicTensor<T>& a, const BasicTensor<T>& b,
                       Reduction reduction = Reduction::sum);
// sum (a-b)^2 or mean (a-b)^2
template <class T>
BasicTensor<T> l2_loss(const BasicTensor<T>& a, const BasicTensor<T>& b,
                       Reduction reduction = Reduction::sum);

// Binary cross-entropy on probabilities in (0,1), averaged over elements.
// Probabilities are clamped to [1e-7, 1-1e-7] before the log.
template <class T>
BasicTensor<T> bce_loss(const BasicTensor<T>& probs, const BasicTensor<T>& targets);

// Mean over rows of -log softmax(logits)[label].
template <class T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits,
                                     std::span<const int> labels);

// Row-wise softmax of a [N,C] tensor. Not recorded.
template <class T>
std::vector<T> softmax_rows(const BasicTensor<T>& logits);

// Row-wise argmax of a [N,C] tensor. Not recorded.
template <class T>
std::vector<int> argmax_rows(const BasicTensor<T>& logits);

}  // namespace poisonforge::ops
