#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "crania/errors.hpp"

namespace crania {

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct TensorImpl {
  std::vector<std::int64_t> shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;

  // Producing node on the recording tape, if any.
  const void* tape = nullptr;
  int tape_node = -1;

  // Per-backward-pass adjoint scratch, stamped by pass id.
  std::vector<T> adj;
  std::uint64_t adj_pass = 0;
  std::uint64_t flush_pass = 0;
};

inline std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) n *= d;
  return n;
}

/// Backward-pass ids are globally unique so the per-tensor adjoint stamps
/// can never collide between tapes that share tensors (parameters do).
inline std::uint64_t next_pass_id() {
  static std::uint64_t counter = 0;
  return ++counter;
}

}  // namespace detail

/// Dense n-dimensional array with shared-handle semantics. Row-major with the
/// last axis fastest; a rank-0 tensor is a scalar. Gradients live alongside
/// the values and accumulate across backward passes until zeroed.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::int64_t> shape, T fill = T(0)) {
    for (std::int64_t d : shape)
      if (d <= 0) throw numeric_error("Tensor: dimensions must be positive");
    impl_ = std::make_shared<detail::TensorImpl<T>>();
    impl_->shape = std::move(shape);
    impl_->values.assign(static_cast<std::size_t>(detail::shape_numel(impl_->shape)),
                         fill);
  }

  static Tensor from_values(std::vector<std::int64_t> shape,
                            std::vector<T> values) {
    Tensor t(shape);
    if (values.size() != t.values().size())
      throw numeric_error("Tensor::from_values: value count does not match shape");
    t.impl_->values = std::move(values);
    return t;
  }

  static Tensor scalar(T value) {
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl<T>>();
    t.impl_->values.assign(1, value);
    return t;
  }

  bool defined() const { return impl_ != nullptr; }

  const std::vector<std::int64_t>& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const {
    return static_cast<std::int64_t>(impl_->values.size());
  }

  std::vector<T>& values() { return impl_->values; }
  const std::vector<T>& values() const { return impl_->values; }

  T item() const {
    if (numel() != 1) throw numeric_error("Tensor::item: not a scalar");
    return impl_->values[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }

  /// Gradient buffer, zero-initialized on first access.
  std::vector<T>& grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), T(0));
    return impl_->grad;
  }
  const std::vector<T>& grad_view() const { return impl_->grad; }

  void zero_grad() { impl_->grad.assign(impl_->values.size(), T(0)); }

  int tape_node() const { return impl_->tape_node; }

  bool same_shape(const Tensor& other) const {
    return impl_->shape == other.impl_->shape;
  }

  detail::TensorImpl<T>* impl() const { return impl_.get(); }

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

/// Records each differentiable operation in execution order, which is a
/// topological order of the data flow. backward() replays the records in
/// reverse, accumulating adjoints into a per-pass scratch buffer, then
/// flushes the pass adjoints into the persistent .grad of every
/// requires_grad tensor. Single-threaded by contract: one training step
/// builds and consumes one tape.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  int record(const char* name, std::vector<Tensor<T>> inputs,
             const Tensor<T>& output, BackwardFn fn) {
    int id = static_cast<int>(nodes_.size());
    output.impl()->tape = this;
    output.impl()->tape_node = id;
    nodes_.push_back(Node{std::move(inputs), output, std::move(fn), name});
    return id;
  }

  std::size_t node_count() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

  /// True when the tensor's adjoint was touched in the current pass.
  bool touched(const Tensor<T>& t) const {
    return t.impl()->adj_pass == pass_;
  }

  /// Adjoint scratch for the current pass, zeroed on first touch.
  std::vector<T>& adj(const Tensor<T>& t) {
    auto* impl = t.impl();
    if (impl->adj_pass != pass_) {
      impl->adj.assign(impl->values.size(), T(0));
      impl->adj_pass = pass_;
    }
    return impl->adj;
  }

  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw numeric_error("backward: loss must be a scalar tensor");
    if (loss.impl()->tape != this || loss.impl()->tape_node < 0)
      throw numeric_error("backward: loss is not on this tape");
    pass_ = detail::next_pass_id();
    adj(loss)[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!touched(it->output)) continue;  // no gradient reaches this node
      it->fn(*this);
    }
    for (auto& node : nodes_) {
      flush(node.output);
      for (auto& in : node.inputs) flush(in);
    }
  }

 private:
  struct Node {
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    BackwardFn fn;
    const char* name;
  };

  void flush(Tensor<T>& t) {
    auto* impl = t.impl();
    if (!impl->requires_grad) return;
    if (impl->adj_pass != pass_ || impl->flush_pass == pass_) return;
    impl->flush_pass = pass_;
    auto& g = t.grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += impl->adj[i];
  }

  std::vector<Node> nodes_;
  // Fresh id at construction so stale stamps on shared tensors never match.
  std::uint64_t pass_ = detail::next_pass_id();
};

/// True when gradient bookkeeping should run for an op with these inputs.
template <typename T>
inline bool grad_needed(Tape<T>* tape, std::initializer_list<const Tensor<T>*> ins) {
  if (!tape) return false;
  for (const Tensor<T>* t : ins)
    if ((*t).requires_grad()) return true;
  return false;
}

}  // namespace crania
