#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tsdpo/autodiff.hpp"

namespace tsdpo {

using Token = std::int32_t;
using Tokens = std::vector<Token>;

class TokenError : public Error {
 public:
  using Error::Error;
};

struct ModelConfig {
  int vocab_size = 64;
  int dim = 64;
  int n_layers = 4;
  int n_heads = 4;
  int max_seq_len = 128;
  int trainable_last_layers = 2;
  bool train_head = true;
  /// Block whose output feeds hidden_states(); -1 selects the final block.
  int hidden_tap_layer = -1;

  int head_dim() const { return dim / n_heads; }
  int mlp_hidden() const { return 4 * dim; }
  int tap_layer() const { return hidden_tap_layer < 0 ? n_layers - 1 : hidden_tap_layer; }
  /// Throws ConfigError naming the first invalid field.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class Block { Embed, Attn, Mlp, Norm, Head };

const char* block_name(Block b);
Block parse_block(const std::string& name);

struct ParamTags {
  std::optional<int> layer;
  Block block = Block::Embed;
  bool trainable = false;

  friend bool operator==(const ParamTags&, const ParamTags&) = default;
};

/// Name and shape of one parameter plus its tags.
struct ParamSpec {
  std::string name;
  Shape shape;
  ParamTags tags;
};

/// Every parameter of the architecture in creation order, with trainability
/// resolved from the config.
std::vector<ParamSpec> parameter_layout(const ModelConfig& config);

/// Named, tagged parameter tensors of one model snapshot.
template <std::floating_point Scalar>
class ParamStore {
 public:
  ParamStore() = default;
  explicit ParamStore(ModelConfig config) : config_(config) {}

  const ModelConfig& config() const { return config_; }

  void add(const std::string& name, Tensor<Scalar> value, ParamTags tags);

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const Tensor<Scalar>& at(const std::string& name) const;
  Tensor<Scalar>& at(const std::string& name);
  const ParamTags& tags(const std::string& name) const;

  const NamedTensors<Scalar>& tensors() const { return tensors_; }
  const std::map<std::string, ParamTags>& all_tags() const { return tags_; }

  /// Names of the trainable subset, lexicographic.
  std::vector<std::string> trainable_names() const;
  /// Copy of the trainable subset.
  NamedTensors<Scalar> trainable() const;

  Index parameter_count() const;

  /// Concatenation of every tensor in lexicographic name order.
  Vector<Scalar> flatten() const;
  /// Inverse of flatten() over this store's layout.
  ParamStore unflatten(const Vector<Scalar>& flat) const;

  /// FNV-1a over names, shapes and raw bytes; equal iff bit-identical
  /// (up to hash collisions).
  std::uint64_t checksum() const;

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    return a.config_ == b.config_ && a.tensors_ == b.tensors_ && a.tags_ == b.tags_;
  }

 private:
  ModelConfig config_;
  NamedTensors<Scalar> tensors_;
  std::map<std::string, ParamTags> tags_;
};

struct Provenance {
  std::string objective;  // help | verb | both
  std::string method;     // ts-dpo | dpo | dpo-mixed
  std::string run_id;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

/// Update direction over the trainable subset of a model.
template <std::floating_point Scalar>
struct TaskVector {
  NamedTensors<Scalar> tensors;
  Provenance provenance;

  static TaskVector zeros(const ParamStore<Scalar>& layout, Provenance provenance = {});

  Vector<Scalar> flatten() const;
  Index size() const;
  /// Throws NameError/ShapeError unless names and shapes equal the trainable subset.
  void check_layout(const ParamStore<Scalar>& layout) const;

  TaskVector scaled(Scalar factor) const;
  /// this += factor * other
  TaskVector& axpy(Scalar factor, const TaskVector& other);

  friend bool operator==(const TaskVector& a, const TaskVector& b) {
    return a.tensors == b.tensors && a.provenance == b.provenance;
  }
};

/// Deterministic initialization: N(0, 0.02) matrices and embeddings, unit norm gains.
template <std::floating_point Scalar>
ParamStore<Scalar> model_init(const ModelConfig& config, std::uint64_t seed);

/// Computation graph of the decoder for one token sequence.
struct ModelGraph {
  Graph graph;
  NodeId logits;  // [len, vocab]
  NodeId hidden;  // [1, dim]: tapped block output after the final norm, last position
};

/// Builds the pre-norm decoder graph; validates tokens against the config.
ModelGraph build_model_graph(const ModelConfig& config, const Tokens& tokens);

void check_tokens(const ModelConfig& config, const Tokens& tokens);

template <std::floating_point Scalar>
Tensor<Scalar> forward_base(const ParamStore<Scalar>& params, const Tokens& tokens);

/// f(x; theta0) + J_theta0(x) * dparams.
template <std::floating_point Scalar>
Tensor<Scalar> forward_linearized(const ParamStore<Scalar>& params0,
                                  const TaskVector<Scalar>& dparams, const Tokens& tokens);

/// Last-position hidden state, shape [dim].
template <std::floating_point Scalar>
Tensor<Scalar> hidden_states(const ParamStore<Scalar>& params, const Tokens& tokens);

/// Primal and tangent of the last-position hidden state under dparams.
template <std::floating_point Scalar>
DualTensor<Scalar> hidden_states_linearized(const ParamStore<Scalar>& params0,
                                            const TaskVector<Scalar>& dparams,
                                            const Tokens& tokens);

/// Materializes theta0 + delta as a full store.
template <std::floating_point Scalar>
ParamStore<Scalar> apply_delta(const ParamStore<Scalar>& base, const TaskVector<Scalar>& delta);

}  // namespace tsdpo
