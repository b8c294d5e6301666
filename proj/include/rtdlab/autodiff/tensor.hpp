// Tensor values, gradient buffers and the reverse-mode tape.
//
// A Tensor<T> is a cheap handle onto shared storage. Values are immutable
// once an op has produced them; only leaves (parameters, inputs) may be
// written through `data()`. Gradients accumulate until `zero_grad()`.
//
// Every op whose inputs require grad appends one node to the calling
// thread's Tape<T>. Nodes are appended after their inputs exist, so the
// tape is topologically ordered by construction and backward is a single
// reverse sweep.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rtdlab::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const std::string& detail);
};

class AutodiffError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty means "no gradient yet"
  bool requires_grad = false;
  std::int64_t node = -1;         // producing tape node, -1 for leaves
  std::uint64_t tape_epoch = 0;   // tape generation the node index refers to

  bool is_leaf() const { return node < 0; }
  std::span<T> ensure_grad();
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t size() const { return impl_->values.size(); }

  std::span<const T> values() const { return impl_->values; }
  // Mutable access is only legal on leaves; op outputs are immutable.
  std::span<T> data();
  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on);
  bool is_leaf() const { return impl_->is_leaf(); }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> grad_mut() { return impl_->ensure_grad(); }
  // Gradient values, zeros when no gradient has been accumulated.
  std::vector<T> grad_or_zero() const;
  void zero_grad();

  // Deep copy of values with no tape identity and no gradient.
  Tensor detached_copy() const;

  void backward() const;

  TensorImpl<T>& impl() const { return *impl_; }
  const std::shared_ptr<TensorImpl<T>>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

template <typename T>
class Tape {
 public:
  struct Node;
  using BackwardFn = std::function<void(Node&)>;

  struct Node {
    const char* op = "";
    std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
    std::shared_ptr<TensorImpl<T>> output;
    BackwardFn backward;

    std::span<const T> out_grad() const { return output->grad; }
    // Gradient buffer of input i, or an empty span when it needs none.
    std::span<T> in_grad(std::size_t i) {
      auto& in = *inputs[i];
      return in.requires_grad ? in.ensure_grad() : std::span<T>{};
    }
  };

  // One tape per thread and scalar type.
  static Tape& current();

  // Records `output` as produced by `op` from `inputs`.
  void record(const char* op, std::vector<std::shared_ptr<TensorImpl<T>>> inputs,
              const std::shared_ptr<TensorImpl<T>>& output, BackwardFn backward);

  void backward(const Tensor<T>& loss);
  void clear();

  std::size_t size() const { return nodes_.size(); }
  std::uint64_t epoch() const { return epoch_; }
  const Node& node(std::size_t i) const { return nodes_.at(i); }

 private:
  std::vector<Node> nodes_;
  std::uint64_t epoch_ = 1;
};

template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>::current().backward(loss);
}

// Thread-wide training flag; dropout is the identity when it is off.
bool is_training();
void set_training(bool on);

class TrainingModeGuard {
 public:
  explicit TrainingModeGuard(bool on) : previous_(is_training()) { set_training(on); }
  ~TrainingModeGuard() { set_training(previous_); }
  TrainingModeGuard(const TrainingModeGuard&) = delete;
  TrainingModeGuard& operator=(const TrainingModeGuard&) = delete;

 private:
  bool previous_;
};

// Thread-wide switch for tape recording; evaluation code turns it off.
bool grad_enabled();
void set_grad_enabled(bool on);

class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace rtdlab::ad
