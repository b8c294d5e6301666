#include "rtdlab/autodiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace rtdlab::ad {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

ShapeError::ShapeError(const std::string& op, const std::string& detail)
    : std::invalid_argument("shape mismatch in " + op + ": " + detail) {}

template <typename T>
std::span<T> TensorImpl<T>::ensure_grad() {
  if (grad.empty()) grad.assign(values.size(), T(0));
  return grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : impl_(std::make_shared<TensorImpl<T>>()) {
  if (numel(shape) != values.size()) {
    throw ShapeError("tensor", "shape " + shape_str(shape) + " holds " +
                                   std::to_string(numel(shape)) + " values, got " +
                                   std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->values = std::move(values);
  set_requires_grad(requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
std::span<T> Tensor<T>::data() {
  if (!impl_->is_leaf()) {
    throw AutodiffError("data(): op outputs are immutable; only leaves may be written");
  }
  return impl_->values;
}

template <typename T>
T Tensor<T>::item() const {
  if (impl_->values.size() != 1) {
    throw ShapeError("item", "expected one value, shape " + shape_str(impl_->shape));
  }
  return impl_->values[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (on && impl_->is_leaf()) {
    impl_->ensure_grad();
  } else if (!on) {
    impl_->grad.clear();
  }
}

template <typename T>
std::vector<T> Tensor<T>::grad_or_zero() const {
  if (impl_->grad.empty()) return std::vector<T>(impl_->values.size(), T(0));
  return impl_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detached_copy() const {
  return Tensor(impl_->shape, impl_->values, false);
}

template <typename T>
void Tensor<T>::backward() const {
  Tape<T>::current().backward(*this);
}

template <typename T>
Tape<T>& Tape<T>::current() {
  thread_local Tape<T> tape;
  return tape;
}

template <typename T>
void Tape<T>::record(const char* op, std::vector<std::shared_ptr<TensorImpl<T>>> inputs,
                     const std::shared_ptr<TensorImpl<T>>& output, BackwardFn backward) {
  output->node = static_cast<std::int64_t>(nodes_.size());
  output->tape_epoch = epoch_;
  output->requires_grad = true;
  nodes_.push_back(Node{op, std::move(inputs), output, std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  auto& root = loss.impl();
  if (root.values.size() != 1) {
    throw AutodiffError("backward: loss must be scalar, got shape " + shape_str(root.shape));
  }
  if (root.node < 0 || root.tape_epoch != epoch_ ||
      static_cast<std::size_t>(root.node) >= nodes_.size() ||
      nodes_[root.node].output.get() != &root) {
    throw AutodiffError("backward: loss is detached from the tape");
  }
  // Intermediate gradients belong to a single sweep; leaves accumulate.
  for (auto& n : nodes_) n.output->grad.clear();
  root.ensure_grad()[0] = T(1);
  for (auto i = static_cast<std::int64_t>(root.node); i >= 0; --i) {
    auto& n = nodes_[static_cast<std::size_t>(i)];
    if (n.output->grad.empty()) continue;  // not reachable from the loss
    n.backward(n);
  }
  for (auto& n : nodes_) n.output->grad.clear();
}

template <typename T>
void Tape<T>::clear() {
  nodes_.clear();
  ++epoch_;
}

namespace {
thread_local bool training_flag = false;
thread_local bool grad_flag = true;
}  // namespace

bool grad_enabled() { return grad_flag; }
void set_grad_enabled(bool on) { grad_flag = on; }

bool is_training() { return training_flag; }
void set_training(bool on) { training_flag = on; }

template struct TensorImpl<float>;
template struct TensorImpl<double>;
template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace rtdlab::ad
