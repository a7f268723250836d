#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "coupalign/errors.hpp"

namespace coupalign {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
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
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first written
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

template <class T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

/// Dense row-major tensor handle. Copies share the underlying node, so a
/// parameter held by a module and by a ParamStore is the same storage.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    for (std::size_t e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (coupalign::numel(shape) != data.size()) {
      throw DimensionError("tensor of shape " + shape_str(shape) + " given " +
                           std::to_string(data.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = coupalign::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const std::size_t n = coupalign::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  /// Direct write access; only for leaves (parameters, buffers, inputs).
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  /// Deep copy without graph linkage.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  const NodePtr<T>& node() const { return node_; }

 private:
  NodePtr<T> node_;
};

template <class T>
bool all_finite(std::span<const T> xs) {
  return std::all_of(xs.begin(), xs.end(), [](T v) { return std::isfinite(v); });
}

/// Ordered record of differentiable operations. Entries are appended in
/// execution order, so inputs always precede the ops that consume them and a
/// reverse sweep is a valid topological order for backpropagation.
template <class T>
class Tape {
 public:
  struct Entry {
    const char* op;
    std::vector<NodePtr<T>> inputs;
    NodePtr<T> output;
    std::function<void()> backward;
  };

  void record(const char* op, std::vector<NodePtr<T>> inputs, NodePtr<T> output,
              std::function<void()> backward) {
    entries_.push_back(Entry{op, std::move(inputs), std::move(output), std::move(backward)});
  }

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  void clear() { entries_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and replays every entry in reverse. Gradients
  /// accumulate into leaves; the tape is consumed.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (entries_.empty()) throw ContractError("backward() on an empty tape");
    loss.node()->ensure_grad();
    loss.node()->grad[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output->grad.empty()) continue;
      it->backward();
      for (const auto& in : it->inputs) {
        if (in->requires_grad && !in->grad.empty() && !all_finite<T>(in->grad)) {
          entries_.clear();
          throw NumericError(std::string("non-finite gradient produced by op '") + it->op + "'");
        }
      }
    }
    entries_.clear();
  }

 private:
  std::vector<Entry> entries_;
};

template <class T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

/// Makes `tape` the recording target for this thread for the scope's lifetime.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(active_tape<T>()) { active_tape<T>() = &tape; }
  ~TapeScope() { active_tape<T>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording (evaluation passes).
template <class T>
class NoGradScope {
 public:
  NoGradScope() : previous_(active_tape<T>()) { active_tape<T>() = nullptr; }
  ~NoGradScope() { active_tape<T>() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Runs backpropagation on the active tape.
template <class T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = active_tape<T>();
  if (!tape) throw ContractError("backward() called with no active tape");
  tape->backward(loss);
}

namespace detail {

template <class T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (!active_tape<T>()) return false;
  for (const Tensor<T>* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

/// Returns the grad buffer of `node` if it participates in differentiation.
template <class T>
T* grad_sink(const NodePtr<T>& node) {
  if (!node->requires_grad) return nullptr;
  node->ensure_grad();
  return node->grad.data();
}

template <class T>
void record(const char* op, Tensor<T>& out, std::vector<NodePtr<T>> inputs,
            std::function<void()> backward) {
  out.set_requires_grad(true);
  active_tape<T>()->record(op, std::move(inputs), out.node(), std::move(backward));
}

}  // namespace detail
}  // namespace coupalign
