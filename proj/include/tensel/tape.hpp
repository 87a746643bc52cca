#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tensel/rng.hpp"
#include "tensel/tensor.hpp"

namespace tensel {

/// Named learnable tensor with a gradient accumulator of identical dims.
template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> value;
  Tensor<Scalar> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<Scalar> v)
      : name(std::move(n)), value(std::move(v)), grad(value.dims()) {}

  void zero_grad() { grad.set_zero(); }
  std::int64_t size() const { return value.size(); }

  /// He-style uniform init over the flat buffer, fan_in supplied by the layer.
  static Parameter he_uniform(std::string n, Dims d, std::int64_t fan_in,
                              Rng& rng) {
    Parameter p(std::move(n), Tensor<Scalar>(d));
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (std::int64_t i = 0; i < p.value.size(); ++i)
      p.value[i] = static_cast<Scalar>(rng.uniform(-limit, limit));
    return p;
  }

  static Parameter zeros(std::string n, Dims d) {
    return Parameter(std::move(n), Tensor<Scalar>(d));
  }
};

template <typename Scalar>
class Tape;

/// Handle to a tape node. Cheap to copy; valid while its tape lives.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int idx = -1;

  const Tensor<Scalar>& value() const { return tape->value(*this); }
  const Dims& dims() const { return tape->value(*this).dims(); }
};

/// Define-by-run record of primitive executions.
///
/// Every primitive appends one node holding the forward value, a zeroed
/// gradient buffer and a backward closure. backward(root) seeds d(root)=1,
/// replays closures in exact reverse execution order, then flushes leaf
/// gradients into their bound Parameters. The tape is rebuilt each forward
/// pass and must be owned by a single thread.
template <typename Scalar>
class Tape {
 public:
  using V = Var<Scalar>;
  using BackwardFn = std::function<void(Tape&)>;

  /// Constant leaf (inputs, rendered targets). Gradients are tracked but go
  /// nowhere unless the leaf is bound to a Parameter.
  V leaf(Tensor<Scalar> value) {
    return push(std::move(value), nullptr);
  }

  /// Leaf bound to a Parameter; backward() accumulates into p.grad.
  V param(Parameter<Scalar>& p) {
    V v = push(p.value, nullptr);
    bindings_.emplace_back(&p, v.idx);
    return v;
  }

  /// Appends a node produced by a primitive. The closure may capture node
  /// indices (never references: the node vector reallocates).
  V push(Tensor<Scalar> value, BackwardFn backward) {
    const Dims d = value.dims();
    nodes_.push_back(
        Node{std::move(value), Tensor<Scalar>::zeros(d), std::move(backward)});
    return V{this, static_cast<int>(nodes_.size() - 1)};
  }

  const Tensor<Scalar>& value(V v) const { return nodes_[v.idx].value; }
  Tensor<Scalar>& grad(V v) { return nodes_[v.idx].grad; }
  const Tensor<Scalar>& grad(V v) const { return nodes_[v.idx].grad; }

  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar root. Parameters touched by this tape must
  /// have been zeroed (or hold prior accumulation on purpose).
  void backward(V root) {
    require(root.tape == this, "backward: var from another tape");
    if (nodes_[root.idx].value.size() != 1)
      throw ShapeError("backward root must be scalar, got " +
                       nodes_[root.idx].value.dims().str());
    nodes_[root.idx].grad[0] = Scalar(1);
    for (int i = root.idx; i >= 0; --i) {
      if (nodes_[i].backward) nodes_[i].backward(*this);
    }
    for (auto& [p, idx] : bindings_) p->grad.array() += nodes_[idx].grad.array();
  }

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::vector<std::pair<Parameter<Scalar>*, int>> bindings_;
};

using Tape64 = Tape<double>;
using Var64 = Var<double>;
using Param64 = Parameter<double>;

}  // namespace tensel
