#include "tsdpo/autodiff.hpp"

#include <cmath>

namespace tsdpo {

namespace {

template <typename Scalar>
using Mat = RowMatrix<Scalar>;

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

// Per-row reciprocal RMS, 1 / sqrt(mean(x^2) + eps).
template <typename Scalar>
Vector<Scalar> inv_rms(const Tensor<Scalar>& x) {
  const auto m = x.matrix();
  Vector<Scalar> r(m.rows());
  for (Index i = 0; i < m.rows(); ++i)
    r[i] = Scalar(1) / std::sqrt(m.row(i).squaredNorm() / Scalar(m.cols()) + Scalar(Graph::kRmsEps));
  return r;
}

// Row i of a*b accumulated over k in a fixed order, so each output row depends
// only on the matching input row. This keeps causal prefixes bit-identical when a
// sequence grows (blocked GEMM may regroup sums by problem size).
template <typename Scalar>
void matmul_rowwise(const Eigen::Map<const Mat<Scalar>>& a, const Eigen::Map<const Mat<Scalar>>& b,
                    Eigen::Map<Mat<Scalar>> out) {
  constexpr Index W = 8;
  using Block = Eigen::Matrix<Scalar, 1, W>;
  const Index n = b.cols(), full = n - n % W;
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < full; j += W) {
      Block acc = Block::Zero();
      for (Index k = 0; k < a.cols(); ++k) acc.noalias() += a(i, k) * b.row(k).template segment<W>(j);
      out.row(i).template segment<W>(j) = acc;
    }
    for (Index j = full; j < n; ++j) {
      Scalar acc = 0;
      for (Index k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  }
}

template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& x) {
  Tensor<Scalar> y(x.shape());
  auto out = y.matrix();
  const auto in = x.matrix();
  // Scalar loops: vectorized exp and packet-wise sums would make a row's result
  // depend on its length and alignment, breaking causal prefix identity.
  for (Index i = 0; i < in.rows(); ++i) {
    const Scalar mx = in.row(i).maxCoeff();
    Scalar total = 0;
    for (Index j = 0; j < in.cols(); ++j) {
      out(i, j) = std::exp(in(i, j) - mx);
      total += out(i, j);
    }
    for (Index j = 0; j < in.cols(); ++j) out(i, j) /= total;
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> forward_value(const Node& node, const std::vector<const Tensor<Scalar>*>& in) {
  switch (node.op) {
    case Op::Input:
      break;
    case Op::MatMul: {
      Tensor<Scalar> y(node.shape);
      matmul_rowwise<Scalar>(in[0]->matrix(), in[1]->matrix(), y.matrix());
      return y;
    }
    case Op::Transpose: {
      Tensor<Scalar> y(node.shape);
      y.matrix() = in[0]->matrix().transpose();
      return y;
    }
    case Op::Add:
      return Tensor<Scalar>(node.shape, in[0]->data() + in[1]->data());
    case Op::Mul:
      return Tensor<Scalar>(node.shape, in[0]->data().cwiseProduct(in[1]->data()));
    case Op::Scale:
      return Tensor<Scalar>(node.shape, in[0]->data() * Scalar(node.alpha));
    case Op::EmbeddingGather: {
      Tensor<Scalar> y(node.shape);
      const auto table = in[0]->matrix();
      auto out = y.matrix();
      for (std::size_t i = 0; i < node.indices.size(); ++i)
        out.row(static_cast<Index>(i)) = table.row(node.indices[i]);
      return y;
    }
    case Op::RmsNorm: {
      Tensor<Scalar> y(node.shape);
      const Vector<Scalar> r = inv_rms(*in[0]);
      const auto x = in[0]->matrix();
      const auto g = in[1]->data().transpose();
      auto out = y.matrix();
      for (Index i = 0; i < x.rows(); ++i)
        out.row(i) = (x.row(i) * r[i]).cwiseProduct(g);
      return y;
    }
    case Op::Silu: {
      Tensor<Scalar> y(node.shape);
      const auto& x = in[0]->data();
      for (Index i = 0; i < x.size(); ++i) y[i] = x[i] * sigmoid(x[i]);
      return y;
    }
    case Op::Softmax:
      return softmax_rows(*in[0]);
    case Op::LogSoftmax: {
      Tensor<Scalar> y(node.shape);
      const auto x = in[0]->matrix();
      auto out = y.matrix();
      for (Index i = 0; i < x.rows(); ++i) {
        const Scalar mx = x.row(i).maxCoeff();
        const Scalar lse = mx + std::log((x.row(i).array() - mx).exp().sum());
        out.row(i) = (x.row(i).array() - lse).matrix();
      }
      return y;
    }
    case Op::IndexGather: {
      Tensor<Scalar> y(node.shape);
      for (std::size_t r = 0; r < node.indices.size(); ++r)
        y[static_cast<Index>(r)] = (*in[0])(static_cast<Index>(r), node.indices[r]);
      return y;
    }
    case Op::Sum:
      return Tensor<Scalar>::scalar(in[0]->data().sum());
    case Op::Mean:
      return Tensor<Scalar>::scalar(in[0]->data().mean());
    case Op::CausalMaskAdd: {
      Tensor<Scalar> y = *in[0];
      auto m = y.matrix();
      for (Index i = 0; i < m.rows(); ++i)
        for (Index j = i + 1; j < m.cols(); ++j) m(i, j) += Scalar(Graph::kMaskValue);
      return y;
    }
    case Op::SliceRows: {
      Tensor<Scalar> y(node.shape);
      y.matrix() = in[0]->matrix().middleRows(node.begin, node.count);
      return y;
    }
    case Op::SliceCols: {
      Tensor<Scalar> y(node.shape);
      y.matrix() = in[0]->matrix().middleCols(node.begin, node.count);
      return y;
    }
    case Op::ConcatCols: {
      Tensor<Scalar> y(node.shape);
      auto out = y.matrix();
      Index at = 0;
      for (const Tensor<Scalar>* part : in) {
        out.middleCols(at, part->cols()) = part->matrix();
        at += part->cols();
      }
      return y;
    }
  }
  throw Error(std::string("forward: unsupported op ") + op_name(node.op));
}

// Directional derivative of one node. `dt[k]` is null when input k carries no
// tangent (treated as zero).
template <typename Scalar>
Tensor<Scalar> forward_tangent(const Node& node, const std::vector<const Tensor<Scalar>*>& in,
                               const Tensor<Scalar>& out,
                               const std::vector<const Tensor<Scalar>*>& dt) {
  Tensor<Scalar> y(node.shape);
  switch (node.op) {
    case Op::Input:
      break;
    case Op::MatMul: {
      auto m = y.matrix();
      if (dt[0]) m.noalias() += dt[0]->matrix() * in[1]->matrix();
      if (dt[1]) m.noalias() += in[0]->matrix() * dt[1]->matrix();
      return y;
    }
    case Op::Transpose:
      y.matrix() = dt[0]->matrix().transpose();
      return y;
    case Op::Add:
      if (dt[0]) y.data() += dt[0]->data();
      if (dt[1]) y.data() += dt[1]->data();
      return y;
    case Op::Mul:
      if (dt[0]) y.data() += dt[0]->data().cwiseProduct(in[1]->data());
      if (dt[1]) y.data() += in[0]->data().cwiseProduct(dt[1]->data());
      return y;
    case Op::Scale:
      y.data() = dt[0]->data() * Scalar(node.alpha);
      return y;
    case Op::EmbeddingGather: {
      const auto table = dt[0]->matrix();
      auto m = y.matrix();
      for (std::size_t i = 0; i < node.indices.size(); ++i)
        m.row(static_cast<Index>(i)) = table.row(node.indices[i]);
      return y;
    }
    case Op::RmsNorm: {
      const Vector<Scalar> r = inv_rms(*in[0]);
      const auto x = in[0]->matrix();
      const auto g = in[1]->data().transpose();
      const Scalar d = Scalar(x.cols());
      auto m = y.matrix();
      for (Index i = 0; i < x.rows(); ++i) {
        if (dt[0]) {
          const auto dx = dt[0]->matrix().row(i);
          const Scalar proj = x.row(i).dot(dx) / d;
          m.row(i) += (dx * r[i] - x.row(i) * (r[i] * r[i] * r[i] * proj)).cwiseProduct(g);
        }
        if (dt[1]) m.row(i) += (x.row(i) * r[i]).cwiseProduct(dt[1]->data().transpose());
      }
      return y;
    }
    case Op::Silu: {
      const auto& x = in[0]->data();
      for (Index i = 0; i < x.size(); ++i) {
        const Scalar s = sigmoid(x[i]);
        y[i] = (*dt[0])[i] * s * (Scalar(1) + x[i] * (Scalar(1) - s));
      }
      return y;
    }
    case Op::Softmax: {
      const auto s = out.matrix();
      const auto dx = dt[0]->matrix();
      auto m = y.matrix();
      for (Index i = 0; i < s.rows(); ++i) {
        const Scalar avg = s.row(i).dot(dx.row(i));
        m.row(i) = s.row(i).cwiseProduct((dx.row(i).array() - avg).matrix());
      }
      return y;
    }
    case Op::LogSoftmax: {
      const Tensor<Scalar> s = softmax_rows(*in[0]);
      const auto dx = dt[0]->matrix();
      auto m = y.matrix();
      for (Index i = 0; i < dx.rows(); ++i)
        m.row(i) = (dx.row(i).array() - s.matrix().row(i).dot(dx.row(i))).matrix();
      return y;
    }
    case Op::IndexGather:
      for (std::size_t r = 0; r < node.indices.size(); ++r)
        y[static_cast<Index>(r)] = (*dt[0])(static_cast<Index>(r), node.indices[r]);
      return y;
    case Op::Sum:
      y[0] = dt[0]->data().sum();
      return y;
    case Op::Mean:
      y[0] = dt[0]->data().mean();
      return y;
    case Op::CausalMaskAdd:
      return *dt[0];
    case Op::SliceRows:
      y.matrix() = dt[0]->matrix().middleRows(node.begin, node.count);
      return y;
    case Op::SliceCols:
      y.matrix() = dt[0]->matrix().middleCols(node.begin, node.count);
      return y;
    case Op::ConcatCols: {
      auto m = y.matrix();
      Index at = 0;
      for (std::size_t k = 0; k < in.size(); ++k) {
        if (dt[k]) m.middleCols(at, in[k]->cols()) = dt[k]->matrix();
        at += in[k]->cols();
      }
      return y;
    }
  }
  throw Error(std::string("jvp: unsupported op ") + op_name(node.op));
}

template <typename Scalar>
void accumulate(std::optional<Tensor<Scalar>>& slot, Tensor<Scalar>&& g) {
  if (slot) slot->data() += g.data();
  else slot = std::move(g);
}

// Cotangent contribution of `gy` to input k of `node`.
template <typename Scalar>
Tensor<Scalar> backward_input(const Node& node, std::size_t k,
                              const std::vector<const Tensor<Scalar>*>& in,
                              const Tensor<Scalar>& out, const Tensor<Scalar>& gy) {
  Tensor<Scalar> g(in[k]->shape());
  switch (node.op) {
    case Op::Input:
      break;
    case Op::MatMul:
      if (k == 0) g.matrix().noalias() = gy.matrix() * in[1]->matrix().transpose();
      else g.matrix().noalias() = in[0]->matrix().transpose() * gy.matrix();
      return g;
    case Op::Transpose:
      g.matrix() = gy.matrix().transpose();
      return g;
    case Op::Add:
      return gy;
    case Op::Mul:
      g.data() = gy.data().cwiseProduct(in[1 - k]->data());
      return g;
    case Op::Scale:
      g.data() = gy.data() * Scalar(node.alpha);
      return g;
    case Op::EmbeddingGather: {
      auto m = g.matrix();
      const auto gm = gy.matrix();
      for (std::size_t i = 0; i < node.indices.size(); ++i)
        m.row(node.indices[i]) += gm.row(static_cast<Index>(i));
      return g;
    }
    case Op::RmsNorm: {
      const Vector<Scalar> r = inv_rms(*in[0]);
      const auto x = in[0]->matrix();
      const auto gm = gy.matrix();
      const auto gain = in[1]->data().transpose();
      if (k == 0) {
        const Scalar d = Scalar(x.cols());
        auto m = g.matrix();
        for (Index i = 0; i < x.rows(); ++i) {
          const auto u = gm.row(i).cwiseProduct(gain);
          const Scalar proj = u.dot(x.row(i)) / d;
          m.row(i) = u * r[i] - x.row(i) * (r[i] * r[i] * r[i] * proj);
        }
      } else {
        auto m = g.matrix();
        for (Index i = 0; i < x.rows(); ++i) m.row(0) += gm.row(i).cwiseProduct(x.row(i) * r[i]);
      }
      return g;
    }
    case Op::Silu: {
      const auto& x = in[0]->data();
      for (Index i = 0; i < x.size(); ++i) {
        const Scalar s = sigmoid(x[i]);
        g[i] = gy[i] * s * (Scalar(1) + x[i] * (Scalar(1) - s));
      }
      return g;
    }
    case Op::Softmax: {
      const auto s = out.matrix();
      const auto gm = gy.matrix();
      auto m = g.matrix();
      for (Index i = 0; i < s.rows(); ++i) {
        const Scalar avg = s.row(i).dot(gm.row(i));
        m.row(i) = s.row(i).cwiseProduct((gm.row(i).array() - avg).matrix());
      }
      return g;
    }
    case Op::LogSoftmax: {
      const auto gm = gy.matrix();
      const auto lp = out.matrix();
      auto m = g.matrix();
      for (Index i = 0; i < lp.rows(); ++i)
        m.row(i) = gm.row(i) - lp.row(i).array().exp().matrix() * gm.row(i).sum();
      return g;
    }
    case Op::IndexGather:
      for (std::size_t r = 0; r < node.indices.size(); ++r)
        g(static_cast<Index>(r), node.indices[r]) += gy[static_cast<Index>(r)];
      return g;
    case Op::Sum:
      g.data().setConstant(gy[0]);
      return g;
    case Op::Mean:
      g.data().setConstant(gy[0] / Scalar(g.size()));
      return g;
    case Op::CausalMaskAdd:
      return gy;
    case Op::SliceRows:
      g.matrix().middleRows(node.begin, node.count) = gy.matrix();
      return g;
    case Op::SliceCols:
      g.matrix().middleCols(node.begin, node.count) = gy.matrix();
      return g;
    case Op::ConcatCols: {
      Index at = 0;
      for (std::size_t j = 0; j < k; ++j) at += in[j]->cols();
      g.matrix() = gy.matrix().middleCols(at, in[k]->cols());
      return g;
    }
  }
  throw Error(std::string("vjp: unsupported op ") + op_name(node.op));
}

void throw_non_finite(std::size_t index, const Node& node, const char* what) {
  throw NonFiniteError(index, std::string("non-finite ") + what + " at node " +
                                  std::to_string(index) + " (" + op_name(node.op) + ")");
}

}  // namespace

template <std::floating_point Scalar>
Trace<Scalar> run(const Graph& graph, const Bindings<Scalar>& inputs,
                  const Bindings<Scalar>* tangents) {
  if (tangents) {
    for (const auto& [name, t] : tangents->refs()) {
      const Tensor<Scalar>* base = inputs.find(name);
      if (!base) throw NameError("jvp: tangent for unknown parameter '" + name + "'");
      if (base->shape() != t->shape())
        throw ShapeError("jvp: tangent '" + name + "' has shape " + shape_string(t->shape()) +
                         ", base has " + shape_string(base->shape()));
    }
  }

  Trace<Scalar> trace(graph);
  std::vector<const Tensor<Scalar>*> in, dt;
  for (std::size_t i = 0; i < graph.size(); ++i) {
    const Node& node = graph.nodes()[i];
    if (node.op == Op::Input) {
      const Tensor<Scalar>* bound = inputs.find(node.name);
      if (!bound) throw NameError("evaluate: input '" + node.name + "' is not bound");
      if (bound->shape() != node.shape)
        throw ShapeError("evaluate: input '" + node.name + "' bound with shape " +
                         shape_string(bound->shape()) + ", graph expects " +
                         shape_string(node.shape));
      trace.values_[i] = bound;
      if (tangents)
        if (const Tensor<Scalar>* t = tangents->find(node.name)) trace.tangents_[i] = *t;
      continue;
    }

    in.clear();
    dt.clear();
    bool any_tangent = false;
    for (NodeId id : node.inputs) {
      in.push_back(trace.values_[id.index]);
      const auto& t = trace.tangents_[id.index];
      dt.push_back(t ? &*t : nullptr);
      any_tangent = any_tangent || t.has_value();
    }
    trace.owned_[i] = forward_value<Scalar>(node, in);
    if (!trace.owned_[i].all_finite()) throw_non_finite(i, node, "value");
    trace.values_[i] = &trace.owned_[i];

    if (any_tangent) {
      trace.tangents_[i] = forward_tangent<Scalar>(node, in, trace.owned_[i], dt);
      if (!trace.tangents_[i]->all_finite()) throw_non_finite(i, node, "tangent");
    }
  }
  return trace;
}

template <std::floating_point Scalar>
NamedTensors<Scalar> vjp(const Trace<Scalar>& trace, NodeId output,
                         const Tensor<Scalar>& cotangent,
                         const std::set<std::string>& wrt) {
  const Graph& graph = trace.graph();
  if (output.index >= graph.size()) throw NameError("vjp: unknown output node");
  if (cotangent.shape() != trace.value(output).shape())
    throw ShapeError("vjp: cotangent shape " + shape_string(cotangent.shape()) +
                     " differs from output shape " + shape_string(trace.value(output).shape()));

  std::vector<char> needs(graph.size(), 0);
  for (const std::string& name : wrt) needs[graph.find_input(name).index] = 1;
  for (std::size_t i = 0; i < graph.size(); ++i)
    for (NodeId id : graph.nodes()[i].inputs) needs[i] = needs[i] || needs[id.index];

  std::vector<std::optional<Tensor<Scalar>>> grads(graph.size());
  grads[output.index] = cotangent;
  std::vector<const Tensor<Scalar>*> in;
  for (std::size_t i = output.index + 1; i-- > 0;) {
    const Node& node = graph.nodes()[i];
    if (node.op == Op::Input || !grads[i] || !needs[i]) continue;
    in.clear();
    for (NodeId id : node.inputs) in.push_back(&trace.value(id));
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const std::size_t src = node.inputs[k].index;
      if (!needs[src]) continue;
      accumulate(grads[src], backward_input<Scalar>(node, k, in, trace.value(NodeId{i}), *grads[i]));
    }
    grads[i].reset();
  }

  NamedTensors<Scalar> result;
  for (const std::string& name : wrt) {
    const NodeId id = graph.find_input(name);
    auto& g = grads[id.index];
    Tensor<Scalar> out = g ? std::move(*g) : trace.value(id).zeros_like();
    if (!out.all_finite()) throw_non_finite(id.index, graph.node(id), "gradient");
    result.emplace(name, std::move(out));
  }
  return result;
}

template Trace<double> run(const Graph&, const Bindings<double>&, const Bindings<double>*);
template Trace<float> run(const Graph&, const Bindings<float>&, const Bindings<float>*);
template NamedTensors<double> vjp(const Trace<double>&, NodeId, const Tensor<double>&,
                                  const std::set<std::string>&);
template NamedTensors<float> vjp(const Trace<float>&, NodeId, const Tensor<float>&,
                                 const std::set<std::string>&);

}  // namespace tsdpo
