#pragma once

#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "tsdpo/graph.hpp"
#include "tsdpo/tensor.hpp"

namespace tsdpo {

/// Non-owning name -> tensor view used to bind graph inputs. Bound tensors
/// must outlive every Trace produced from the binding.
template <std::floating_point Scalar>
class Bindings {
 public:
  Bindings() = default;
  Bindings(const NamedTensors<Scalar>& named) { add(named); }  // NOLINT

  Bindings& add(const NamedTensors<Scalar>& named) {
    for (const auto& [name, t] : named) refs_[name] = &t;
    return *this;
  }
  Bindings& add(const std::string& name, const Tensor<Scalar>& t) {
    refs_[name] = &t;
    return *this;
  }
  const Tensor<Scalar>* find(const std::string& name) const {
    auto it = refs_.find(name);
    return it == refs_.end() ? nullptr : it->second;
  }
  const std::unordered_map<std::string, const Tensor<Scalar>*>& refs() const { return refs_; }

 private:
  std::unordered_map<std::string, const Tensor<Scalar>*> refs_;
};

/// Primal value paired with its directional derivative.
template <std::floating_point Scalar>
struct DualTensor {
  Tensor<Scalar> primal;
  Tensor<Scalar> tangent;
};

/// Record of one execution of a Graph: every node's primal value and, for
/// forward-mode runs, every node's tangent (absent means identically zero).
template <std::floating_point Scalar>
class Trace {
 public:
  Trace(const Trace&) = delete;
  Trace& operator=(const Trace&) = delete;
  Trace(Trace&&) noexcept = default;
  Trace& operator=(Trace&&) noexcept = default;

  const Graph& graph() const { return *graph_; }
  const Tensor<Scalar>& value(NodeId id) const { return *values_[checked(id)]; }
  const Tensor<Scalar>& output(const std::string& name) const { return value(graph_->output(name)); }

  bool has_tangent(NodeId id) const { return tangents_[checked(id)].has_value(); }
  /// Tangent of a node; a zero tensor when no tangent reaches it.
  Tensor<Scalar> tangent(NodeId id) const {
    const auto& t = tangents_[checked(id)];
    return t ? *t : value(id).zeros_like();
  }
  DualTensor<Scalar> dual(NodeId id) const { return {value(id), tangent(id)}; }
  DualTensor<Scalar> dual(const std::string& name) const { return dual(graph_->output(name)); }

  /// primal + tangent, the first-order prediction at the tangent direction.
  Tensor<Scalar> linearized(NodeId id) const {
    Tensor<Scalar> out = value(id);
    if (const auto& t = tangents_[checked(id)]) out.data() += t->data();
    return out;
  }

 private:
  explicit Trace(const Graph& g)
      : graph_(&g), owned_(g.size()), values_(g.size(), nullptr), tangents_(g.size()) {}

  std::size_t checked(NodeId id) const {
    if (id.index >= values_.size() || !values_[id.index])
      throw NameError("trace: node " + std::to_string(id.index) + " was not evaluated");
    return id.index;
  }

  template <std::floating_point S>
  friend Trace<S> run(const Graph&, const Bindings<S>&, const Bindings<S>*);

  const Graph* graph_;
  std::vector<Tensor<Scalar>> owned_;
  std::vector<const Tensor<Scalar>*> values_;
  std::vector<std::optional<Tensor<Scalar>>> tangents_;
};

/// Shared forward driver; `tangents` null means primal-only.
template <std::floating_point Scalar>
Trace<Scalar> run(const Graph& graph, const Bindings<Scalar>& inputs,
                  const Bindings<Scalar>* tangents);

/// Deterministic forward evaluation. Throws ShapeError / NameError on bad
/// bindings and NonFiniteError naming the first node that produced NaN/Inf.
template <std::floating_point Scalar>
Trace<Scalar> evaluate(const Graph& graph, const Bindings<Scalar>& inputs) {
  return run<Scalar>(graph, inputs, nullptr);
}

/// Forward-mode pass: primal at `base` (parameters and data inputs together)
/// plus the directional derivative along `tangent`. Every tangent name must be
/// bound in `base` with an identical shape.
template <std::floating_point Scalar>
Trace<Scalar> jvp(const Graph& graph, const Bindings<Scalar>& base,
                  const Bindings<Scalar>& tangent) {
  return run<Scalar>(graph, base, &tangent);
}

/// Reverse-mode transposed-Jacobian product J^T * cotangent at the point the
/// trace was recorded, for the inputs named in `wrt`.
template <std::floating_point Scalar>
NamedTensors<Scalar> vjp(const Trace<Scalar>& trace, NodeId output,
                         const Tensor<Scalar>& cotangent,
                         const std::set<std::string>& wrt);

/// Gradient of a rank-0 node with respect to the named inputs.
template <std::floating_point Scalar>
NamedTensors<Scalar> backward(const Trace<Scalar>& trace, NodeId scalar_output,
                              const std::set<std::string>& wrt) {
  const Tensor<Scalar>& out = trace.value(scalar_output);
  if (!out.shape().empty())
    throw ShapeError("backward: output has shape " + shape_string(out.shape()) + ", expected []");
  return vjp(trace, scalar_output, Tensor<Scalar>::scalar(Scalar(1)), wrt);
}

/// J_{base}^T * cotangent. Because a linearized output primal + J*delta is
/// affine in delta, this is the exact gradient of any loss of that output
/// with respect to delta when cotangent = dLoss/dOutput.
template <std::floating_point Scalar>
NamedTensors<Scalar> vjp_at_base(const Graph& graph, const Bindings<Scalar>& base,
                                 NodeId output, const Tensor<Scalar>& cotangent,
                                 const std::set<std::string>& wrt) {
  return vjp(evaluate(graph, base), output, cotangent, wrt);
}

}  // namespace tsdpo
