#include "tsdpo/graph.hpp"

namespace tsdpo {

const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Add: return "add";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::EmbeddingGather: return "embedding_gather";
    case Op::RmsNorm: return "rms_norm";
    case Op::Silu: return "silu";
    case Op::Softmax: return "softmax";
    case Op::LogSoftmax: return "log_softmax";
    case Op::IndexGather: return "index_gather";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::CausalMaskAdd: return "causal_mask_add";
    case Op::SliceRows: return "slice_rows";
    case Op::SliceCols: return "slice_cols";
    case Op::ConcatCols: return "concat_cols";
  }
  return "?";
}

namespace {

void require(bool ok, Op op, const std::string& detail) {
  if (!ok) throw ShapeError(std::string(op_name(op)) + ": " + detail);
}

bool is_matrix(const Shape& s) { return s.size() == 2; }

}  // namespace

NodeId Graph::push(Node node) {
  for (NodeId in : node.inputs)
    if (in.index >= nodes_.size()) throw NameError("graph: dangling input node");
  nodes_.push_back(std::move(node));
  return NodeId{nodes_.size() - 1};
}

const Shape& Graph::shape_of(NodeId id) const {
  if (id.index >= nodes_.size()) throw NameError("graph: unknown node");
  return nodes_[id.index].shape;
}

NodeId Graph::input(const std::string& name, Shape shape) {
  check_shape(shape);
  if (inputs_.count(name)) throw NameError("graph: duplicate input '" + name + "'");
  Node n;
  n.op = Op::Input;
  n.name = name;
  n.shape = std::move(shape);
  NodeId id = push(std::move(n));
  inputs_[name] = id;
  return id;
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Shape &sa = shape_of(a), &sb = shape_of(b);
  require(is_matrix(sa) && is_matrix(sb), Op::MatMul, "operands must be rank 2");
  require(sa[1] == sb[0], Op::MatMul,
          "inner extents differ: " + shape_string(sa) + " x " + shape_string(sb));
  Node n;
  n.op = Op::MatMul;
  n.inputs = {a, b};
  n.shape = {sa[0], sb[1]};
  return push(std::move(n));
}

NodeId Graph::transpose(NodeId a) {
  const Shape& sa = shape_of(a);
  require(is_matrix(sa), Op::Transpose, "operand must be rank 2");
  Node n;
  n.op = Op::Transpose;
  n.inputs = {a};
  n.shape = {sa[1], sa[0]};
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
  require(shape_of(a) == shape_of(b), Op::Add,
          shape_string(shape_of(a)) + " vs " + shape_string(shape_of(b)));
  Node n;
  n.op = Op::Add;
  n.inputs = {a, b};
  n.shape = shape_of(a);
  return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  require(shape_of(a) == shape_of(b), Op::Mul,
          shape_string(shape_of(a)) + " vs " + shape_string(shape_of(b)));
  Node n;
  n.op = Op::Mul;
  n.inputs = {a, b};
  n.shape = shape_of(a);
  return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double alpha) {
  Node n;
  n.op = Op::Scale;
  n.inputs = {a};
  n.shape = shape_of(a);
  n.alpha = alpha;
  return push(std::move(n));
}

NodeId Graph::embedding_gather(NodeId table, std::vector<Index> ids) {
  const Shape& st = shape_of(table);
  require(is_matrix(st), Op::EmbeddingGather, "table must be rank 2");
  require(!ids.empty(), Op::EmbeddingGather, "empty id list");
  for (Index id : ids)
    require(id >= 0 && id < st[0], Op::EmbeddingGather,
            "id " + std::to_string(id) + " outside table of " + std::to_string(st[0]) + " rows");
  Node n;
  n.op = Op::EmbeddingGather;
  n.inputs = {table};
  n.shape = {static_cast<Index>(ids.size()), st[1]};
  n.indices = std::move(ids);
  return push(std::move(n));
}

NodeId Graph::rms_norm(NodeId x, NodeId gain) {
  const Shape &sx = shape_of(x), &sg = shape_of(gain);
  require(!sx.empty(), Op::RmsNorm, "operand must have rank >= 1");
  require(sg.size() == 1 && sg[0] == sx.back(), Op::RmsNorm,
          "gain " + shape_string(sg) + " does not match last axis of " + shape_string(sx));
  Node n;
  n.op = Op::RmsNorm;
  n.inputs = {x, gain};
  n.shape = sx;
  return push(std::move(n));
}

NodeId Graph::silu(NodeId x) {
  Node n;
  n.op = Op::Silu;
  n.inputs = {x};
  n.shape = shape_of(x);
  return push(std::move(n));
}

NodeId Graph::softmax(NodeId x) {
  require(!shape_of(x).empty(), Op::Softmax, "operand must have rank >= 1");
  Node n;
  n.op = Op::Softmax;
  n.inputs = {x};
  n.shape = shape_of(x);
  return push(std::move(n));
}

NodeId Graph::log_softmax(NodeId x) {
  require(!shape_of(x).empty(), Op::LogSoftmax, "operand must have rank >= 1");
  Node n;
  n.op = Op::LogSoftmax;
  n.inputs = {x};
  n.shape = shape_of(x);
  return push(std::move(n));
}

NodeId Graph::index_gather(NodeId x, std::vector<Index> cols) {
  const Shape& sx = shape_of(x);
  require(is_matrix(sx), Op::IndexGather, "operand must be rank 2");
  require(static_cast<Index>(cols.size()) == sx[0], Op::IndexGather,
          "need one column index per row");
  for (Index c : cols)
    require(c >= 0 && c < sx[1], Op::IndexGather, "column index out of range");
  Node n;
  n.op = Op::IndexGather;
  n.inputs = {x};
  n.shape = {sx[0]};
  n.indices = std::move(cols);
  return push(std::move(n));
}

NodeId Graph::sum(NodeId x) {
  Node n;
  n.op = Op::Sum;
  n.inputs = {x};
  n.shape = {};
  return push(std::move(n));
}

NodeId Graph::mean(NodeId x) {
  Node n;
  n.op = Op::Mean;
  n.inputs = {x};
  n.shape = {};
  return push(std::move(n));
}

NodeId Graph::causal_mask_add(NodeId x) {
  const Shape& sx = shape_of(x);
  require(is_matrix(sx) && sx[0] == sx[1], Op::CausalMaskAdd, "operand must be square");
  Node n;
  n.op = Op::CausalMaskAdd;
  n.inputs = {x};
  n.shape = sx;
  return push(std::move(n));
}

NodeId Graph::slice_rows(NodeId x, Index begin, Index count) {
  const Shape& sx = shape_of(x);
  require(is_matrix(sx), Op::SliceRows, "operand must be rank 2");
  require(begin >= 0 && count > 0 && begin + count <= sx[0], Op::SliceRows, "range out of bounds");
  Node n;
  n.op = Op::SliceRows;
  n.inputs = {x};
  n.shape = {count, sx[1]};
  n.begin = begin;
  n.count = count;
  return push(std::move(n));
}

NodeId Graph::slice_cols(NodeId x, Index begin, Index count) {
  const Shape& sx = shape_of(x);
  require(is_matrix(sx), Op::SliceCols, "operand must be rank 2");
  require(begin >= 0 && count > 0 && begin + count <= sx[1], Op::SliceCols, "range out of bounds");
  Node n;
  n.op = Op::SliceCols;
  n.inputs = {x};
  n.shape = {sx[0], count};
  n.begin = begin;
  n.count = count;
  return push(std::move(n));
}

NodeId Graph::concat_cols(const std::vector<NodeId>& parts) {
  require(!parts.empty(), Op::ConcatCols, "no operands");
  const Shape& first = shape_of(parts.front());
  require(is_matrix(first), Op::ConcatCols, "operands must be rank 2");
  Index total = 0;
  for (NodeId p : parts) {
    const Shape& sp = shape_of(p);
    require(is_matrix(sp) && sp[0] == first[0], Op::ConcatCols, "row extents differ");
    total += sp[1];
  }
  Node n;
  n.op = Op::ConcatCols;
  n.inputs = parts;
  n.shape = {first[0], total};
  return push(std::move(n));
}

void Graph::mark_output(const std::string& name, NodeId node) {
  shape_of(node);
  outputs_[name] = node;
}

NodeId Graph::output(const std::string& name) const {
  auto it = outputs_.find(name);
  if (it == outputs_.end()) throw NameError("graph: no output named '" + name + "'");
  return it->second;
}

NodeId Graph::find_input(const std::string& name) const {
  auto it = inputs_.find(name);
  if (it == inputs_.end()) throw NameError("graph: no input named '" + name + "'");
  return it->second;
}

}  // namespace tsdpo
