#include "poisonforge/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "poisonforge/errors.hpp"

namespace poisonforge {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values, bool requires_grad)
    : node_(std::make_shared<detail::TensorNode<T>>()) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_to_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_to_string(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  node_->shape = std::move(shape);
  node_->values = std::move(values);
  node_->requires_grad = requires_grad;
}

template <class T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return BasicTensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <class T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return BasicTensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <class T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return BasicTensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <class T>
detail::TensorNode<T>& BasicTensor<T>::node() const {
  if (!node_) throw AutodiffError("tensor: use of an undefined tensor");
  return *node_;
}

template <class T>
const Shape& BasicTensor<T>::shape() const {
  return node().shape;
}

template <class T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  const auto& s = node().shape;
  if (axis >= s.size()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " +
                     shape_to_string(s));
  }
  return s[axis];
}

template <class T>
std::size_t BasicTensor<T>::numel() const {
  return node().values.size();
}

template <class T>
std::span<const T> BasicTensor<T>::values() const {
  return node().values;
}

template <class T>
std::span<T> BasicTensor<T>::mutable_values() {
  return node().values;
}

template <class T>
T BasicTensor<T>::item() const {
  if (numel() != 1) {
    throw ShapeError("tensor: item() on non-scalar " + shape_to_string(shape()));
  }
  return node().values[0];
}

template <class T>
bool BasicTensor<T>::requires_grad() const {
  return node().requires_grad;
}

template <class T>
void BasicTensor<T>::set_requires_grad(bool flag) {
  node().requires_grad = flag;
}

template <class T>
bool BasicTensor<T>::has_grad() const {
  return !node().grad.empty();
}

template <class T>
std::span<const T> BasicTensor<T>::grad() const {
  return node().grad;
}

template <class T>
std::span<T> BasicTensor<T>::mutable_grad() const {
  auto& n = node();
  if (n.grad.empty()) n.grad.assign(n.values.size(), T(0));
  return n.grad;
}

template <class T>
void BasicTensor<T>::clear_grad() const {
  auto& n = node();
  n.grad.clear();
  n.grad.shrink_to_fit();
}

template <class T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(node().shape, node().values, false);
}

template <class T>
BasicTensor<T> BasicTensor<T>::clone() const {
  BasicTensor out(node().shape, node().values, node().requires_grad);
  out.node_->grad = node().grad;
  return out;
}

namespace {

template <class T>
BasicTape<T>*& active_tape() {
  static thread_local BasicTape<T>* tape = nullptr;
  return tape;
}

}  // namespace

template <class T>
BasicTape<T>::BasicTape() : previous_(active_tape<T>()) {
  active_tape<T>() = this;
}

template <class T>
BasicTape<T>::~BasicTape() {
  if (active_tape<T>() == this) active_tape<T>() = previous_;
}

template <class T>
BasicTape<T>* BasicTape<T>::active() noexcept {
  BasicTape* tape = active_tape<T>();
  if (tape && tape->suspended_) return nullptr;
  return tape;
}

template <class T>
void BasicTape<T>::record(std::vector<BasicTensor<T>> inputs, BasicTensor<T> output,
                          std::function<void()> backward) {
  records_.push_back(Record{std::move(inputs), std::move(output), std::move(backward)});
}

template <class T>
void BasicTape<T>::backward(const BasicTensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw AutodiffError("backward: loss must be a scalar tensor, got " +
                        (loss.defined() ? shape_to_string(loss.shape()) : std::string("undefined")));
  }
  if (records_.empty()) throw AutodiffError("backward: tape is empty");
  BasicTensor<T> seed = loss;
  if (!seed.requires_grad()) {
    throw AutodiffError("backward: loss does not depend on any tensor that requires grad");
  }
  seed.mutable_grad()[0] += T(1);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (!it->output.has_grad()) continue;  // not reachable from loss
    it->backward();
    for (const auto& input : it->inputs) {
      if (!input.has_grad()) continue;
      for (T g : input.grad()) {
        if (!std::isfinite(g)) throw NumericError("backward: non-finite gradient");
      }
    }
  }
}

template <class T>
BasicNoGrad<T>::BasicNoGrad() : tape_(active_tape<T>()) {
  if (tape_) {
    was_suspended_ = tape_->suspended_;
    tape_->suspended_ = true;
  }
}

template <class T>
BasicNoGrad<T>::~BasicNoGrad() {
  if (tape_) tape_->suspended_ = was_suspended_;
}

template <class T>
bool should_record(std::initializer_list<const BasicTensor<T>*> inputs) {
  if (BasicTape<T>::active() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const BasicTensor<T>* t) {
    return t != nullptr && t->defined() && t->requires_grad();
  });
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template class BasicTape<float>;
template class BasicTape<double>;
template class BasicNoGrad<float>;
template class BasicNoGrad<double>;
template bool should_record<float>(std::initializer_list<const BasicTensor<float>*>);
template bool should_record<double>(std::initializer_list<const BasicTensor<double>*>);

}  // namespace poisonforge
