#pragma once

#include <map>
#include <string>
#include <vector>

#include "tsdpo/tensor.hpp"

namespace tsdpo {

enum class Op {
  Input,
  MatMul,
  Transpose,
  Add,
  Mul,
  Scale,
  EmbeddingGather,
  RmsNorm,
  Silu,
  Softmax,
  LogSoftmax,
  IndexGather,
  Sum,
  Mean,
  CausalMaskAdd,
  SliceRows,
  SliceCols,
  ConcatCols,
};

const char* op_name(Op op);

/// Strongly typed handle to a node inside one Graph.
struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

struct Node {
  Op op = Op::Input;
  std::vector<NodeId> inputs;
  Shape shape;
  std::string name;             // Input only
  double alpha = 0.0;           // Scale factor
  std::vector<Index> indices;   // EmbeddingGather / IndexGather
  Index begin = 0, count = 0;   // SliceRows / SliceCols
};

/// Static computation graph. Nodes are appended in topological order and
/// shapes are inferred (and checked) at construction time. A Graph holds no
/// numeric state; execution lives in autodiff.hpp.
class Graph {
 public:
  NodeId input(const std::string& name, Shape shape);

  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double alpha);
  /// Rows of `table` selected by `ids`: [len(ids), table.cols].
  NodeId embedding_gather(NodeId table, std::vector<Index> ids);
  /// Row-wise x / sqrt(mean(x^2) + eps) * gain, eps fixed at kRmsEps.
  NodeId rms_norm(NodeId x, NodeId gain);
  NodeId silu(NodeId x);
  NodeId softmax(NodeId x);
  NodeId log_softmax(NodeId x);
  /// out[r] = x[r, cols[r]].
  NodeId index_gather(NodeId x, std::vector<Index> cols);
  NodeId sum(NodeId x);
  NodeId mean(NodeId x);
  /// Adds kMaskValue above the diagonal of a square score matrix.
  NodeId causal_mask_add(NodeId x);
  NodeId slice_rows(NodeId x, Index begin, Index count);
  NodeId slice_cols(NodeId x, Index begin, Index count);
  NodeId concat_cols(const std::vector<NodeId>& parts);

  void mark_output(const std::string& name, NodeId node);

  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& node(NodeId id) const { return nodes_.at(id.index); }
  std::size_t size() const { return nodes_.size(); }

  NodeId output(const std::string& name) const;
  const std::map<std::string, NodeId>& outputs() const { return outputs_; }

  /// Input node by name; throws NameError.
  NodeId find_input(const std::string& name) const;
  bool has_input(const std::string& name) const { return inputs_.count(name) != 0; }
  const std::map<std::string, NodeId>& inputs() const { return inputs_; }

  static constexpr double kRmsEps = 1e-6;
  // Finite so every intermediate stays finite; exp() of it underflows to 0.
  static constexpr double kMaskValue = -1e9;

 private:
  NodeId push(Node node);
  const Shape& shape_of(NodeId id) const;

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> inputs_;
  std::map<std::string, NodeId> outputs_;
};

}  // namespace tsdpo
