#include "tsdpo/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <set>

namespace tsdpo {

using nlohmann::json;

const char* logprob_mode_name(LogprobMode m) { return m == LogprobMode::Sum ? "sum" : "mean"; }

LogprobMode parse_logprob_mode(const std::string& name) {
  if (name == "sum") return LogprobMode::Sum;
  if (name == "mean") return LogprobMode::Mean;
  throw ConfigError("unknown log-prob mode '" + name + "'");
}

const char* train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::Standard: return "standard";
    case TrainMode::Tangent: return "tangent";
    case TrainMode::Mixed: return "mixed";
  }
  return "?";
}

TrainMode parse_train_mode(const std::string& name) {
  for (TrainMode m : {TrainMode::Standard, TrainMode::Tangent, TrainMode::Mixed})
    if (name == train_mode_name(m)) return m;
  throw ConfigError("unknown training mode '" + name + "'");
}

namespace {

template <typename Scalar>
void check_continuation(const Tensor<Scalar>& logits, const Tokens& tokens, std::size_t start) {
  if (logits.rank() != 2 || logits.rows() != static_cast<Index>(tokens.size()))
    throw ShapeError("sequence_logprob: logits " + shape_string(logits.shape()) + " for " +
                     std::to_string(tokens.size()) + " tokens");
  if (start < 1 || start >= tokens.size())
    throw DataError(0, "sequence_logprob: empty continuation (start " + std::to_string(start) +
                           ", length " + std::to_string(tokens.size()) + ")");
}

// log-sum-exp of one row, accumulated in index order
template <typename Scalar>
double row_lse(const Tensor<Scalar>& logits, Index r) {
  const Index n = logits.cols();
  double mx = logits(r, 0);
  for (Index j = 1; j < n; ++j) mx = std::max(mx, static_cast<double>(logits(r, j)));
  double total = 0;
  for (Index j = 0; j < n; ++j) total += std::exp(static_cast<double>(logits(r, j)) - mx);
  return mx + std::log(total);
}

}  // namespace

template <std::floating_point Scalar>
double sequence_logprob(const Tensor<Scalar>& logits, const Tokens& tokens, std::size_t start,
                        LogprobMode mode) {
  check_continuation(logits, tokens, start);
  double total = 0;
  for (std::size_t t = start; t < tokens.size(); ++t) {
    const Index r = static_cast<Index>(t - 1);
    total += static_cast<double>(logits(r, tokens[t])) - row_lse(logits, r);
  }
  return mode == LogprobMode::Sum ? total : total / static_cast<double>(tokens.size() - start);
}

template <std::floating_point Scalar>
Tensor<Scalar> sequence_logprob_grad(const Tensor<Scalar>& logits, const Tokens& tokens,
                                     std::size_t start, LogprobMode mode) {
  check_continuation(logits, tokens, start);
  const double w = mode == LogprobMode::Sum ? 1.0 : 1.0 / static_cast<double>(tokens.size() - start);
  Tensor<Scalar> g = logits.zeros_like();
  for (std::size_t t = start; t < tokens.size(); ++t) {
    const Index r = static_cast<Index>(t - 1);
    const double lse = row_lse(logits, r);
    for (Index j = 0; j < logits.cols(); ++j)
      g(r, j) = static_cast<Scalar>(-w * std::exp(static_cast<double>(logits(r, j)) - lse));
    g(r, tokens[t]) += static_cast<Scalar>(w);
  }
  return g;
}

namespace {

double log1p_exp(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

double dpo_margin(double lp_w, double lp_l, double ref_w, double ref_l, double beta) {
  if (!std::isfinite(lp_w) || !std::isfinite(lp_l) || !std::isfinite(ref_w) || !std::isfinite(ref_l))
    throw NonFiniteLoss(-1, "dpo_loss: non-finite log-probability");
  if (!(beta > 0)) throw ConfigError("dpo_loss: beta must be positive");
  return beta * ((lp_w - ref_w) - (lp_l - ref_l));
}

}  // namespace

double dpo_loss(double lp_w, double lp_l, double ref_w, double ref_l, double beta) {
  return log1p_exp(-dpo_margin(lp_w, lp_l, ref_w, ref_l, beta));
}

std::pair<double, double> dpo_loss_grad(double lp_w, double lp_l, double ref_w, double ref_l,
                                        double beta) {
  const double s = sigmoid(-dpo_margin(lp_w, lp_l, ref_w, ref_l, beta));
  return {-beta * s, beta * s};
}

template <std::floating_point Scalar>
void adamw_step(NamedTensors<Scalar>& params, const NamedTensors<Scalar>& grads,
                AdamState<Scalar>& state, const AdamConfig& c) {
  if (grads.size() != params.size()) throw NameError("adamw: gradient and parameter names differ");
  for (const auto& [name, p] : params) {
    auto g = grads.find(name);
    if (g == grads.end()) throw NameError("adamw: no gradient for '" + name + "'");
    if (g->second.shape() != p.shape()) throw ShapeError("adamw: gradient shape mismatch on '" + name + "'");
  }
  if (state.step == 0) {
    state.m.clear();
    state.v.clear();
    for (const auto& [name, p] : params) {
      state.m.emplace(name, p.zeros_like());
      state.v.emplace(name, p.zeros_like());
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    auto& x = p.data();
    const auto& g = grads.at(name).data();
    auto& m = state.m.at(name).data();
    auto& v = state.v.at(name).data();
    x *= static_cast<Scalar>(1.0 - c.learning_rate * c.weight_decay);
    m = static_cast<Scalar>(c.beta1) * m + static_cast<Scalar>(1.0 - c.beta1) * g;
    v = static_cast<Scalar>(c.beta2) * v + static_cast<Scalar>(1.0 - c.beta2) * g.cwiseProduct(g);
    for (Index i = 0; i < x.size(); ++i) {
      const double mhat = m[i] / bc1, vhat = v[i] / bc2;
      x[i] -= static_cast<Scalar>(c.learning_rate * mhat / (std::sqrt(vhat) + c.eps));
    }
  }
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("train config: " + what); };
  if (!(beta > 0)) fail("beta must be positive");
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) fail("learning_rate must be finite and non-negative");
  if (epochs < 1) fail("epochs must be at least 1");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (grad_accum < 1) fail("grad_accum must be at least 1");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1))
    fail("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0)) fail("adam_eps must be positive");
  if (!(weight_decay >= 0)) fail("weight_decay must be non-negative");
  if (max_steps < 0) fail("max_steps must be non-negative");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"beta", c.beta},
           {"learning_rate", c.learning_rate},
           {"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"grad_accum", c.grad_accum},
           {"adam_beta1", c.adam_beta1},
           {"adam_beta2", c.adam_beta2},
           {"adam_eps", c.adam_eps},
           {"weight_decay", c.weight_decay},
           {"seed", c.seed},
           {"mode", train_mode_name(c.mode)},
           {"logprob_mode_train", logprob_mode_name(c.logprob_mode_train)},
           {"max_steps", c.max_steps}};
}

void from_json(const json& j, TrainConfig& c) {
  const TrainConfig d;
  c.beta = j.value("beta", d.beta);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.grad_accum = j.value("grad_accum", d.grad_accum);
  c.adam_beta1 = j.value("adam_beta1", d.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", d.adam_beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.seed = j.value("seed", d.seed);
  c.mode = parse_train_mode(j.value("mode", std::string(train_mode_name(d.mode))));
  c.logprob_mode_train =
      parse_logprob_mode(j.value("logprob_mode_train", std::string(logprob_mode_name(d.logprob_mode_train))));
  c.max_steps = j.value("max_steps", d.max_steps);
}

void write_loss_csv(const LossCurve& curve, const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << "step,loss\n";
  char buf[64];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%d,%.17g\n", p.step, p.loss);
    out << buf;
  }
}

namespace {

Tokens concat(const Tokens& a, const Tokens& b) {
  Tokens out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

// One forward pass of the policy on prompt + response, kept alive for the
// backward sweep.
template <typename Scalar>
struct SequenceRun {
  ModelGraph model;
  std::optional<Trace<Scalar>> trace;
  Tensor<Scalar> logits;
  Tokens tokens;
  std::size_t start = 0;
};

template <typename Scalar>
void run_sequence(SequenceRun<Scalar>& s, const ParamStore<Scalar>& base,
                  const NamedTensors<Scalar>& point, bool tangent, const Tokens& prompt,
                  const Tokens& response) {
  s.tokens = concat(prompt, response);
  s.start = prompt.size();
  s.model = build_model_graph(base.config(), s.tokens);
  Bindings<Scalar> at(base.tensors());
  if (tangent) {
    s.trace.emplace(jvp(s.model.graph, at, Bindings<Scalar>(point)));
    s.logits = s.trace->linearized(s.model.logits);
  } else {
    at.add(point);
    s.trace.emplace(evaluate(s.model.graph, at));
    s.logits = s.trace->value(s.model.logits);
  }
}

template <typename Scalar>
void accumulate(NamedTensors<Scalar>& into, const NamedTensors<Scalar>& g, double factor) {
  for (const auto& [name, t] : g) {
    auto it = into.find(name);
    if (it == into.end()) into.emplace(name, Tensor<Scalar>(t.shape(), t.data() * static_cast<Scalar>(factor)));
    else it->second.data() += t.data() * static_cast<Scalar>(factor);
  }
}

template <typename Scalar>
std::set<std::string> names_of(const NamedTensors<Scalar>& t) {
  std::set<std::string> out;
  for (const auto& [name, _] : t) out.insert(name);
  return out;
}

template <typename Scalar>
void check_point(const ParamStore<Scalar>& base, const NamedTensors<Scalar>& point) {
  std::size_t trainable = 0;
  for (const auto& [name, tags] : base.all_tags()) trainable += tags.trainable;
  for (const auto& [name, t] : point) {
    if (!base.contains(name) || !base.tags(name).trainable)
      throw NameError("'" + name + "' is not a trainable parameter");
    if (t.shape() != base.at(name).shape()) throw ShapeError("shape mismatch on '" + name + "'");
  }
  if (point.size() != trainable) throw NameError("trainable parameters missing from the update");
}

}  // namespace

template <std::floating_point Scalar>
PairReference reference_logprobs(const ParamStore<Scalar>& base, const PreferencePair& pair,
                                 LogprobMode mode) {
  const Tokens w = concat(pair.prompt, pair.chosen), l = concat(pair.prompt, pair.rejected);
  return {sequence_logprob(forward_base(base, w), w, pair.prompt.size(), mode),
          sequence_logprob(forward_base(base, l), l, pair.prompt.size(), mode)};
}

template <std::floating_point Scalar>
PairLoss<Scalar> dpo_pair_loss(const ParamStore<Scalar>& base, const NamedTensors<Scalar>& point,
                               bool tangent, const PreferencePair& pair, const PairReference& ref,
                               double beta, LogprobMode mode, bool with_grad) {
  check_point(base, point);
  SequenceRun<Scalar> w, l;
  run_sequence(w, base, point, tangent, pair.prompt, pair.chosen);
  run_sequence(l, base, point, tangent, pair.prompt, pair.rejected);
  PairLoss<Scalar> out;
  out.lp_chosen = sequence_logprob(w.logits, w.tokens, w.start, mode);
  out.lp_rejected = sequence_logprob(l.logits, l.tokens, l.start, mode);
  out.loss = dpo_loss(out.lp_chosen, out.lp_rejected, ref.chosen, ref.rejected, beta);
  if (!with_grad) return out;
  const auto [dw, dl] = dpo_loss_grad(out.lp_chosen, out.lp_rejected, ref.chosen, ref.rejected, beta);
  const auto wrt = names_of(point);
  for (auto [run, factor] : {std::pair{&w, dw}, std::pair{&l, dl}}) {
    Tensor<Scalar> cot = sequence_logprob_grad(run->logits, run->tokens, run->start, mode);
    cot.data() *= static_cast<Scalar>(factor);
    // Linearized logits are affine in dparams, so J^T at theta0 is the exact
    // gradient; in standard mode the trace is already at the current point.
    accumulate(out.grad, vjp(*run->trace, run->model.logits, cot, wrt), 1.0);
  }
  return out;
}

template <std::floating_point Scalar>
TrainResult<Scalar> train(const ParamStore<Scalar>& base, const std::vector<PreferencePair>& data,
                          const TrainConfig& config, Provenance provenance) {
  config.validate();
  if (data.empty()) throw DataError(0, "train: empty dataset");
  const bool tangent = config.mode == TrainMode::Tangent;

  std::vector<PairReference> refs;
  refs.reserve(data.size());
  for (const auto& p : data) refs.push_back(reference_logprobs(base, p, config.logprob_mode_train));

  NamedTensors<Scalar> point = tangent ? TaskVector<Scalar>::zeros(base).tensors : base.trainable();
  AdamState<Scalar> state;
  const AdamConfig adam = config.adam();

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(data.size());
  const std::size_t per_step = static_cast<std::size_t>(config.batch_size) * config.grad_accum;
  TrainResult<Scalar> result;
  int step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t at = 0; at < order.size(); at += per_step) {
      if (config.max_steps > 0 && step >= config.max_steps) break;
      const std::size_t end = std::min(order.size(), at + per_step);
      const double weight = 1.0 / static_cast<double>(end - at);
      NamedTensors<Scalar> grad;
      double loss = 0;
      for (std::size_t i = at; i < end; ++i) {
        const auto pl = dpo_pair_loss(base, point, tangent, data[order[i]], refs[order[i]], config.beta,
                                      config.logprob_mode_train);
        loss += pl.loss * weight;
        accumulate(grad, pl.grad, weight);
      }
      if (!std::isfinite(loss))
        throw NonFiniteLoss(step, "train: non-finite loss at step " + std::to_string(step));
      result.curve.push_back({step, loss});
      adamw_step(point, grad, state, adam);
      ++step;
    }
  }

  result.delta.provenance = std::move(provenance);
  result.delta.tensors = std::move(point);
  if (!tangent)
    for (auto& [name, t] : result.delta.tensors) t.data() -= base.at(name).data();
  return result;
}

std::vector<PreferencePair> mixed_dataset(const std::vector<PreferencePair>& help,
                                          const std::vector<PreferencePair>& verb) {
  std::vector<PreferencePair> out = help;
  out.insert(out.end(), verb.begin(), verb.end());
  return out;
}

void PretrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("pretrain config: " + what); };
  if (steps < 0) fail("steps must be non-negative");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) fail("learning_rate must be finite and non-negative");
  if (!(filler_continue >= 0 && filler_continue < 1)) fail("filler_continue must lie in [0, 1)");
  if (corpus_size < 1) fail("corpus_size must be at least 1");
}

void to_json(json& j, const PretrainConfig& c) {
  j = json{{"steps", c.steps},
           {"batch_size", c.batch_size},
           {"learning_rate", c.learning_rate},
           {"filler_continue", c.filler_continue},
           {"corpus_size", c.corpus_size},
           {"seed", c.seed}};
}

void from_json(const json& j, PretrainConfig& c) {
  const PretrainConfig d;
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.filler_continue = j.value("filler_continue", d.filler_continue);
  c.corpus_size = j.value("corpus_size", d.corpus_size);
  c.seed = j.value("seed", d.seed);
}

template <std::floating_point Scalar>
LossCurve pretrain(ParamStore<Scalar>& params, const std::vector<Continuation>& corpus,
                   const PretrainConfig& config) {
  config.validate();
  if (corpus.empty()) throw DataError(0, "pretrain: empty corpus");
  NamedTensors<Scalar> point = params.tensors();
  const auto wrt = names_of(point);
  AdamState<Scalar> state;
  const AdamConfig adam{config.learning_rate, 0.9, 0.999, 1e-8, 0.0};
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  LossCurve curve;
  for (int step = 0; step < config.steps; ++step) {
    NamedTensors<Scalar> grad;
    double loss = 0;
    const double weight = 1.0 / config.batch_size;
    for (int b = 0; b < config.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const Continuation& c = corpus[order[cursor++]];
      SequenceRun<Scalar> run;
      run_sequence(run, params, point, false, c.prompt, c.response);
      loss -= weight * sequence_logprob(run.logits, run.tokens, run.start, LogprobMode::Mean);
      Tensor<Scalar> cot = sequence_logprob_grad(run.logits, run.tokens, run.start, LogprobMode::Mean);
      accumulate(grad, vjp(*run.trace, run.model.logits, cot, wrt), -weight);
    }
    if (!std::isfinite(loss)) throw NonFiniteLoss(step, "pretrain: non-finite loss at step " + std::to_string(step));
    curve.push_back({step, loss});
    adamw_step(point, grad, state, adam);
  }
  for (auto& [name, t] : point) params.at(name) = std::move(t);
  return curve;
}

#define TSDPO_INSTANTIATE(S)                                                                        \
  template double sequence_logprob<S>(const Tensor<S>&, const Tokens&, std::size_t, LogprobMode);   \
  template Tensor<S> sequence_logprob_grad<S>(const Tensor<S>&, const Tokens&, std::size_t,         \
                                              LogprobMode);                                         \
  template void adamw_step<S>(NamedTensors<S>&, const NamedTensors<S>&, AdamState<S>&,              \
                              const AdamConfig&);                                                   \
  template PairReference reference_logprobs<S>(const ParamStore<S>&, const PreferencePair&,         \
                                               LogprobMode);                                        \
  template PairLoss<S> dpo_pair_loss<S>(const ParamStore<S>&, const NamedTensors<S>&, bool,         \
                                        const PreferencePair&, const PairReference&, double,        \
                                        LogprobMode, bool);                                         \
  template TrainResult<S> train<S>(const ParamStore<S>&, const std::vector<PreferencePair>&,        \
                                   const TrainConfig&, Provenance);                                 \
  template LossCurve pretrain<S>(ParamStore<S>&, const std::vector<Continuation>&,                  \
                                 const PretrainConfig&);

TSDPO_INSTANTIATE(double)
TSDPO_INSTANTIATE(float)

#undef TSDPO_INSTANTIATE

}  // namespace tsdpo
