#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace poisonforge {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
};

}  // namespace detail

/// Dense row-major tensor handle. Copies share storage; use clone() for a
/// deep copy. Values are treated as immutable once an op has produced them;
/// only leaves (parameters, inputs) are written in place.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const T> values() const;
  std::span<T> mutable_values();
  T item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);

  bool has_grad() const;
  std::span<const T> grad() const;
  // Allocates a zero gradient buffer on first use.
  std::span<T> mutable_grad() const;
  void clear_grad() const;

  // Same values, fresh node with no history and no grad requirement.
  BasicTensor detach() const;
  BasicTensor clone() const;

  bool same_node(const BasicTensor& other) const noexcept {
    return node_ == other.node_;
  }

 private:
  detail::TensorNode<T>& node() const;

  std::shared_ptr<detail::TensorNode<T>> node_;
};

/// Records differentiable operations executed while it is the active tape
/// of the current thread. Construction activates it, destruction restores the
/// previously active tape.
template <class T>
class BasicTape {
 public:
  BasicTape();
  ~BasicTape();
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  static BasicTape* active() noexcept;

  void record(std::vector<BasicTensor<T>> inputs, BasicTensor<T> output,
              std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse, accumulating
  // into the grad buffers of every reachable requires_grad tensor.
  void backward(const BasicTensor<T>& loss);

  std::size_t size() const noexcept { return records_.size(); }
  void clear() noexcept { records_.clear(); }

 private:
  struct Record {
    std::vector<BasicTensor<T>> inputs;
    BasicTensor<T> output;
    std::function<void()> backward;
  };

  std::vector<Record> records_;
  BasicTape* previous_ = nullptr;
  bool suspended_ = false;

  template <class>
  friend class BasicNoGrad;
};

/// Suspends recording on the active tape for the lifetime of the guard.
template <class T>
class BasicNoGrad {
 public:
  BasicNoGrad();
  ~BasicNoGrad();
  BasicNoGrad(const BasicNoGrad&) = delete;
  BasicNoGrad& operator=(const BasicNoGrad&) = delete;

 private:
  BasicTape<T>* tape_;
  bool was_suspended_ = false;
};

// True when an op on these inputs must be recorded.
template <class T>
bool should_record(std::initializer_list<const BasicTensor<T>*> inputs);

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;
extern template class BasicTape<float>;
extern template class BasicTape<double>;
extern template class BasicNoGrad<float>;
extern template class BasicNoGrad<double>;

using Tensor = BasicTensor<float>;
using Tape = BasicTape<float>;
using NoGrad = BasicNoGrad<float>;

}  // namespace poisonforge
