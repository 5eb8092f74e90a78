#include "tsdpo/model.hpp"

#include <cmath>
#include <cstring>
#include <random>

namespace tsdpo {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  if (vocab_size <= 0) fail("vocab_size must be positive");
  if (dim <= 0) fail("dim must be positive");
  if (n_layers <= 0) fail("n_layers must be positive");
  if (n_heads <= 0) fail("n_heads must be positive");
  if (max_seq_len <= 0) fail("max_seq_len must be positive");
  if (dim % n_heads != 0) fail("dim must be divisible by n_heads");
  if (trainable_last_layers < 0 || trainable_last_layers > n_layers)
    fail("trainable_last_layers must lie in [0, n_layers]");
  if (hidden_tap_layer < -1 || hidden_tap_layer >= n_layers)
    fail("hidden_tap_layer must be -1 or a valid layer index");
}

const char* block_name(Block b) {
  switch (b) {
    case Block::Embed: return "embed";
    case Block::Attn: return "attn";
    case Block::Mlp: return "mlp";
    case Block::Norm: return "norm";
    case Block::Head: return "head";
  }
  return "?";
}

Block parse_block(const std::string& name) {
  for (Block b : {Block::Embed, Block::Attn, Block::Mlp, Block::Norm, Block::Head})
    if (name == block_name(b)) return b;
  throw NameError("unknown block tag '" + name + "'");
}

std::vector<ParamSpec> parameter_layout(const ModelConfig& c) {
  c.validate();
  const Index v = c.vocab_size, d = c.dim, s = c.max_seq_len, h = c.mlp_hidden();
  const int first_trainable = c.n_layers - c.trainable_last_layers;
  std::vector<ParamSpec> out;
  out.push_back({"tok_emb", {v, d}, {std::nullopt, Block::Embed, false}});
  out.push_back({"pos_emb", {s, d}, {std::nullopt, Block::Embed, false}});
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    const bool tr = l >= first_trainable;
    out.push_back({p + "attn_norm", {d}, {l, Block::Norm, tr}});
    out.push_back({p + "attn.wq", {d, d}, {l, Block::Attn, tr}});
    out.push_back({p + "attn.wk", {d, d}, {l, Block::Attn, tr}});
    out.push_back({p + "attn.wv", {d, d}, {l, Block::Attn, tr}});
    out.push_back({p + "attn.wo", {d, d}, {l, Block::Attn, tr}});
    out.push_back({p + "mlp_norm", {d}, {l, Block::Norm, tr}});
    out.push_back({p + "mlp.w1", {d, h}, {l, Block::Mlp, tr}});
    out.push_back({p + "mlp.w2", {h, d}, {l, Block::Mlp, tr}});
  }
  out.push_back({"final_norm", {d}, {std::nullopt, Block::Norm, false}});
  out.push_back({"head", {d, v}, {std::nullopt, Block::Head, c.train_head}});
  return out;
}

// ---------------------------------------------------------------------------
// ParamStore

template <std::floating_point Scalar>
void ParamStore<Scalar>::add(const std::string& name, Tensor<Scalar> value, ParamTags tags) {
  if (tensors_.count(name)) throw NameError("param store: duplicate parameter '" + name + "'");
  tensors_.emplace(name, std::move(value));
  tags_.emplace(name, tags);
}

template <std::floating_point Scalar>
const Tensor<Scalar>& ParamStore<Scalar>::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw NameError("param store: no parameter '" + name + "'");
  return it->second;
}

template <std::floating_point Scalar>
Tensor<Scalar>& ParamStore<Scalar>::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw NameError("param store: no parameter '" + name + "'");
  return it->second;
}

template <std::floating_point Scalar>
const ParamTags& ParamStore<Scalar>::tags(const std::string& name) const {
  auto it = tags_.find(name);
  if (it == tags_.end()) throw NameError("param store: no parameter '" + name + "'");
  return it->second;
}

template <std::floating_point Scalar>
std::vector<std::string> ParamStore<Scalar>::trainable_names() const {
  std::vector<std::string> names;
  for (const auto& [name, tags] : tags_)
    if (tags.trainable) names.push_back(name);
  return names;
}

template <std::floating_point Scalar>
NamedTensors<Scalar> ParamStore<Scalar>::trainable() const {
  NamedTensors<Scalar> out;
  for (const auto& name : trainable_names()) out.emplace(name, tensors_.at(name));
  return out;
}

template <std::floating_point Scalar>
Index ParamStore<Scalar>::parameter_count() const {
  Index n = 0;
  for (const auto& [_, t] : tensors_) n += t.size();
  return n;
}

template <std::floating_point Scalar>
Vector<Scalar> ParamStore<Scalar>::flatten() const {
  Vector<Scalar> flat(parameter_count());
  Index at = 0;
  for (const auto& [_, t] : tensors_) {
    flat.segment(at, t.size()) = t.data();
    at += t.size();
  }
  return flat;
}

template <std::floating_point Scalar>
ParamStore<Scalar> ParamStore<Scalar>::unflatten(const Vector<Scalar>& flat) const {
  if (flat.size() != parameter_count())
    throw ShapeError("unflatten: expected " + std::to_string(parameter_count()) + " values, got " +
                     std::to_string(flat.size()));
  ParamStore out(config_);
  Index at = 0;
  for (const auto& [name, t] : tensors_) {
    out.add(name, Tensor<Scalar>(t.shape(), flat.segment(at, t.size())), tags_.at(name));
    at += t.size();
  }
  return out;
}

namespace {

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

constexpr std::uint64_t kFnvOffset = 14695981039346656037ULL;

template <typename Scalar>
std::uint64_t hash_named(std::uint64_t h, const NamedTensors<Scalar>& tensors) {
  for (const auto& [name, t] : tensors) {
    h = fnv1a(h, name.data(), name.size());
    for (Index d : t.shape()) h = fnv1a(h, &d, sizeof d);
    h = fnv1a(h, t.data().data(), sizeof(Scalar) * static_cast<std::size_t>(t.size()));
  }
  return h;
}

}  // namespace

template <std::floating_point Scalar>
std::uint64_t ParamStore<Scalar>::checksum() const {
  return hash_named(kFnvOffset, tensors_);
}

// ---------------------------------------------------------------------------
// TaskVector

template <std::floating_point Scalar>
TaskVector<Scalar> TaskVector<Scalar>::zeros(const ParamStore<Scalar>& layout, Provenance provenance) {
  TaskVector tv;
  tv.provenance = std::move(provenance);
  for (const auto& name : layout.trainable_names())
    tv.tensors.emplace(name, layout.at(name).zeros_like());
  return tv;
}

template <std::floating_point Scalar>
Vector<Scalar> TaskVector<Scalar>::flatten() const {
  Vector<Scalar> flat(size());
  Index at = 0;
  for (const auto& [_, t] : tensors) {
    flat.segment(at, t.size()) = t.data();
    at += t.size();
  }
  return flat;
}

template <std::floating_point Scalar>
Index TaskVector<Scalar>::size() const {
  Index n = 0;
  for (const auto& [_, t] : tensors) n += t.size();
  return n;
}

template <std::floating_point Scalar>
void TaskVector<Scalar>::check_layout(const ParamStore<Scalar>& layout) const {
  const auto names = layout.trainable_names();
  for (const auto& name : names) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw NameError("task vector: missing trainable parameter '" + name + "'");
    if (it->second.shape() != layout.at(name).shape())
      throw ShapeError("task vector: '" + name + "' has shape " + shape_string(it->second.shape()) +
                       ", model has " + shape_string(layout.at(name).shape()));
  }
  if (tensors.size() != names.size()) {
    for (const auto& [name, _] : tensors)
      if (!layout.contains(name) || !layout.tags(name).trainable)
        throw NameError("task vector: '" + name + "' is not a trainable parameter");
  }
}

template <std::floating_point Scalar>
TaskVector<Scalar> TaskVector<Scalar>::scaled(Scalar factor) const {
  TaskVector out = *this;
  for (auto& [_, t] : out.tensors) t.data() *= factor;
  return out;
}

template <std::floating_point Scalar>
TaskVector<Scalar>& TaskVector<Scalar>::axpy(Scalar factor, const TaskVector& other) {
  for (auto& [name, t] : tensors) {
    auto it = other.tensors.find(name);
    if (it == other.tensors.end()) throw NameError("task vector: '" + name + "' missing in operand");
    if (it->second.shape() != t.shape()) throw ShapeError("task vector: shape mismatch on '" + name + "'");
    t.data() += factor * it->second.data();
  }
  if (other.tensors.size() != tensors.size()) throw NameError("task vector: layouts differ");
  return *this;
}

// ---------------------------------------------------------------------------
// Model

template <std::floating_point Scalar>
ParamStore<Scalar> model_init(const ModelConfig& config, std::uint64_t seed) {
  ParamStore<Scalar> store(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (const ParamSpec& spec : parameter_layout(config)) {
    Tensor<Scalar> t(spec.shape);
    if (spec.tags.block == Block::Norm) {
      t.data().setOnes();
    } else {
      for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(normal(rng));
    }
    store.add(spec.name, std::move(t), spec.tags);
  }
  return store;
}

void check_tokens(const ModelConfig& config, const Tokens& tokens) {
  if (tokens.empty()) throw TokenError("empty token sequence");
  if (static_cast<int>(tokens.size()) > config.max_seq_len)
    throw TokenError("sequence of length " + std::to_string(tokens.size()) +
                     " exceeds max_seq_len " + std::to_string(config.max_seq_len));
  for (Token t : tokens)
    if (t < 0 || t >= config.vocab_size)
      throw TokenError("token id " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(config.vocab_size));
}

ModelGraph build_model_graph(const ModelConfig& c, const Tokens& tokens) {
  check_tokens(c, tokens);
  ModelGraph m;
  Graph& g = m.graph;
  std::map<std::string, NodeId> p;
  for (const ParamSpec& spec : parameter_layout(c)) p[spec.name] = g.input(spec.name, spec.shape);

  const Index len = static_cast<Index>(tokens.size());
  std::vector<Index> ids(tokens.begin(), tokens.end());
  std::vector<Index> positions(static_cast<std::size_t>(len));
  for (Index i = 0; i < len; ++i) positions[static_cast<std::size_t>(i)] = i;

  NodeId x = g.add(g.embedding_gather(p["tok_emb"], ids), g.embedding_gather(p["pos_emb"], positions));
  const Index hd = c.head_dim();
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

  for (int l = 0; l < c.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    NodeId h = g.rms_norm(x, p[pre + "attn_norm"]);
    NodeId q = g.matmul(h, p[pre + "attn.wq"]);
    NodeId k = g.matmul(h, p[pre + "attn.wk"]);
    NodeId v = g.matmul(h, p[pre + "attn.wv"]);
    std::vector<NodeId> heads;
    for (int head = 0; head < c.n_heads; ++head) {
      NodeId qh = q, kh = k, vh = v;
      if (c.n_heads > 1) {
        qh = g.slice_cols(q, head * hd, hd);
        kh = g.slice_cols(k, head * hd, hd);
        vh = g.slice_cols(v, head * hd, hd);
      }
      NodeId scores = g.scale(g.matmul(qh, g.transpose(kh)), inv_sqrt_hd);
      NodeId attn = g.softmax(g.causal_mask_add(scores));
      heads.push_back(g.matmul(attn, vh));
    }
    NodeId o = heads.size() == 1 ? heads.front() : g.concat_cols(heads);
    x = g.add(x, g.matmul(o, p[pre + "attn.wo"]));

    NodeId h2 = g.rms_norm(x, p[pre + "mlp_norm"]);
    x = g.add(x, g.matmul(g.silu(g.matmul(h2, p[pre + "mlp.w1"])), p[pre + "mlp.w2"]));

    if (l == c.tap_layer()) m.hidden = g.rms_norm(g.slice_rows(x, len - 1, 1), p["final_norm"]);
  }
  m.logits = g.matmul(g.rms_norm(x, p["final_norm"]), p["head"]);
  g.mark_output("logits", m.logits);
  g.mark_output("hidden", m.hidden);
  return m;
}

template <std::floating_point Scalar>
Tensor<Scalar> forward_base(const ParamStore<Scalar>& params, const Tokens& tokens) {
  const ModelGraph m = build_model_graph(params.config(), tokens);
  return evaluate(m.graph, Bindings<Scalar>(params.tensors())).value(m.logits);
}

template <std::floating_point Scalar>
Tensor<Scalar> forward_linearized(const ParamStore<Scalar>& params0,
                                  const TaskVector<Scalar>& dparams, const Tokens& tokens) {
  dparams.check_layout(params0);
  const ModelGraph m = build_model_graph(params0.config(), tokens);
  return jvp(m.graph, Bindings<Scalar>(params0.tensors()), Bindings<Scalar>(dparams.tensors))
      .linearized(m.logits);
}

template <std::floating_point Scalar>
Tensor<Scalar> hidden_states(const ParamStore<Scalar>& params, const Tokens& tokens) {
  const ModelGraph m = build_model_graph(params.config(), tokens);
  const auto trace = evaluate(m.graph, Bindings<Scalar>(params.tensors()));
  const Tensor<Scalar>& h = trace.value(m.hidden);
  return Tensor<Scalar>({h.size()}, h.data());
}

template <std::floating_point Scalar>
DualTensor<Scalar> hidden_states_linearized(const ParamStore<Scalar>& params0,
                                            const TaskVector<Scalar>& dparams,
                                            const Tokens& tokens) {
  dparams.check_layout(params0);
  const ModelGraph m = build_model_graph(params0.config(), tokens);
  auto trace = jvp(m.graph, Bindings<Scalar>(params0.tensors()), Bindings<Scalar>(dparams.tensors));
  DualTensor<Scalar> d = trace.dual(m.hidden);
  const Shape flat{d.primal.size()};
  return {Tensor<Scalar>(flat, d.primal.data()), Tensor<Scalar>(flat, d.tangent.data())};
}

template <std::floating_point Scalar>
ParamStore<Scalar> apply_delta(const ParamStore<Scalar>& base, const TaskVector<Scalar>& delta) {
  delta.check_layout(base);
  ParamStore<Scalar> out = base;
  for (const auto& [name, d] : delta.tensors) out.at(name).data() += d.data();
  return out;
}

#define TSDPO_INSTANTIATE(S)                                                                      \
  template class ParamStore<S>;                                                                   \
  template struct TaskVector<S>;                                                                  \
  template ParamStore<S> model_init<S>(const ModelConfig&, std::uint64_t);                        \
  template Tensor<S> forward_base<S>(const ParamStore<S>&, const Tokens&);                        \
  template Tensor<S> forward_linearized<S>(const ParamStore<S>&, const TaskVector<S>&,            \
                                           const Tokens&);                                        \
  template Tensor<S> hidden_states<S>(const ParamStore<S>&, const Tokens&);                       \
  template DualTensor<S> hidden_states_linearized<S>(const ParamStore<S>&, const TaskVector<S>&, \
                                                     const Tokens&);                              \
  template ParamStore<S> apply_delta<S>(const ParamStore<S>&, const TaskVector<S>&);

TSDPO_INSTANTIATE(double)
TSDPO_INSTANTIATE(float)

#undef TSDPO_INSTANTIATE

}  // namespace tsdpo
