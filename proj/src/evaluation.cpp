#include "tsdpo/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "tsdpo/train.hpp"

namespace tsdpo {

using nlohmann::json;

const char* mix_mode_name(MixMode m) { return m == MixMode::Jvp ? "jvp" : "materialized"; }

MixMode parse_mix_mode(const std::string& name) {
  if (name == "jvp") return MixMode::Jvp;
  if (name == "materialized") return MixMode::Materialized;
  throw ConfigError("unknown mix mode '" + name + "'");
}

template <std::floating_point Scalar>
ModelVariant<Scalar> ModelVariant<Scalar>::base(const ParamStore<Scalar>& params) {
  return ModelVariant(params);
}

template <std::floating_point Scalar>
ModelVariant<Scalar> ModelVariant<Scalar>::linearized(const ParamStore<Scalar>& params0,
                                                      TaskVector<Scalar> dparams) {
  dparams.check_layout(params0);
  ModelVariant v(params0);
  v.dparams_ = std::move(dparams);
  return v;
}

template <std::floating_point Scalar>
ModelVariant<Scalar> ModelVariant<Scalar>::materialized(const ParamStore<Scalar>& params0,
                                                        const TaskVector<Scalar>& delta) {
  ModelVariant v(params0);
  v.owned_ = apply_delta(params0, delta);
  return v;
}

template <std::floating_point Scalar>
Tensor<Scalar> ModelVariant<Scalar>::logits(const Tokens& tokens) const {
  if (owned_) return forward_base(*owned_, tokens);
  if (dparams_) return forward_linearized(*base_, *dparams_, tokens);
  return forward_base(*base_, tokens);
}

template <std::floating_point Scalar>
ScoreFn mean_logprob_scorer(const ModelVariant<Scalar>& variant) {
  return [&variant](const Tokens& prompt, const Tokens& completion) {
    Tokens seq = prompt;
    seq.insert(seq.end(), completion.begin(), completion.end());
    return sequence_logprob(variant.logits(seq), seq, prompt.size(), LogprobMode::Mean);
  };
}

double pairwise_accuracy(const ScoreFn& score, const std::vector<PreferencePair>& pairs) {
  if (pairs.empty()) throw DataError(0, "pairwise_accuracy: no pairs");
  std::size_t wins = 0;
  for (const auto& p : pairs) wins += score(p.prompt, p.chosen) > score(p.prompt, p.rejected);
  return static_cast<double>(wins) / static_cast<double>(pairs.size());
}

Tokens greedy_decode(const NextLogitsFn& next, const Tokens& prompt, int max_new_tokens,
                     Token stop_token, int max_context) {
  if (max_new_tokens < 1) throw ConfigError("greedy_decode: max_new_tokens must be at least 1");
  if (prompt.empty()) throw TokenError("greedy_decode: empty prompt");
  if (static_cast<long>(prompt.size()) + max_new_tokens - 1 > max_context)
    throw TokenError("greedy_decode: context overflow (" + std::to_string(prompt.size()) + " + " +
                     std::to_string(max_new_tokens) + " tokens, context " + std::to_string(max_context) + ")");
  Tokens context = prompt;
  Tokens out;
  for (int step = 0; step < max_new_tokens; ++step) {
    const Vector<double> logits = next(context);
    Index best = 0;
    for (Index j = 1; j < logits.size(); ++j)
      if (logits[j] > logits[best]) best = j;
    const Token t = static_cast<Token>(best);
    if (t == stop_token) break;
    out.push_back(t);
    context.push_back(t);
  }
  return out;
}

template <std::floating_point Scalar>
Tokens greedy_decode(const ModelVariant<Scalar>& variant, const Tokens& prompt, int max_new_tokens,
                     Token stop_token) {
  auto next = [&variant](const Tokens& context) -> Vector<double> {
    const Tensor<Scalar> logits = variant.logits(context);
    return logits.matrix().row(logits.rows() - 1).transpose().template cast<double>();
  };
  return greedy_decode(next, prompt, max_new_tokens, stop_token, variant.config().max_seq_len);
}

RewardScore reward_oracle(const Tokens& prompt, const Tokens& response, const FactTable& facts,
                          const VocabLayout& vocab, int max_new_tokens) {
  if (max_new_tokens < 1) throw ConfigError("reward_oracle: max_new_tokens must be at least 1");
  const Token key = prompt_key(prompt, vocab);
  auto it = facts.find(key);
  if (it == facts.end()) throw DataError(0, "reward_oracle: key " + std::to_string(key) + " not in fact table");
  return {content_score(response, it->second),
          static_cast<double>(response.size()) / static_cast<double>(max_new_tokens)};
}

std::vector<std::size_t> pareto_front(const std::vector<std::vector<double>>& points,
                                      const std::vector<Orientation>& orientation) {
  if (points.empty()) throw DataError(0, "pareto_front: no points");
  for (const auto& p : points)
    if (p.size() != orientation.size()) throw ShapeError("pareto_front: point arity differs from orientation");
  // a dominates b
  auto dominates = [&](const std::vector<double>& a, const std::vector<double>& b) {
    bool strictly = false;
    for (std::size_t k = 0; k < a.size(); ++k) {
      const double ga = orientation[k] == Orientation::Maximize ? a[k] : -a[k];
      const double gb = orientation[k] == Orientation::Maximize ? b[k] : -b[k];
      if (ga < gb) return false;
      if (ga > gb) strictly = true;
    }
    return strictly;
  };
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < points.size(); ++i) {
    bool dominated = false;
    for (std::size_t j = 0; j < points.size() && !dominated; ++j)
      dominated = j != i && dominates(points[j], points[i]);
    if (!dominated) out.push_back(i);
  }
  return out;
}

namespace {

std::vector<double> coords(const EvalPoint& p, ParetoSpace space) {
  return space == ParetoSpace::Accuracy ? std::vector<double>{p.acc_h, p.acc_v}
                                        : std::vector<double>{p.r_h, p.r_v};
}

std::vector<Orientation> orientation(ParetoSpace space) {
  return space == ParetoSpace::Accuracy
             ? std::vector<Orientation>{Orientation::Maximize, Orientation::Maximize}
             : std::vector<Orientation>{Orientation::Maximize, Orientation::Minimize};
}

}  // namespace

std::vector<EvalPoint> pareto_filter(const std::vector<EvalPoint>& points, ParetoSpace space) {
  std::vector<std::vector<double>> xy;
  for (const auto& p : points) xy.push_back(coords(p, space));
  std::vector<EvalPoint> out;
  for (std::size_t i : pareto_front(xy, orientation(space))) out.push_back(points[i]);
  return out;
}

void mark_frontiers(std::vector<EvalPoint>& points) {
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < points.size(); ++i) groups[points[i].method].push_back(i);
  for (const auto& [_, members] : groups) {
    for (ParetoSpace space : {ParetoSpace::Accuracy, ParetoSpace::Reward}) {
      std::vector<std::vector<double>> xy;
      for (std::size_t i : members) xy.push_back(coords(points[i], space));
      std::set<std::size_t> front;
      for (std::size_t k : pareto_front(xy, orientation(space))) front.insert(k);
      for (std::size_t k = 0; k < members.size(); ++k) {
        bool& flag = space == ParetoSpace::Accuracy ? points[members[k]].frontier_acc
                                                    : points[members[k]].frontier_reward;
        flag = front.count(k) != 0;
      }
    }
  }
}

namespace {

std::string real(double x) {
  if (std::isnan(x)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

double parse_real(const std::string& s, std::size_t line) {
  if (s.empty() || s == "--") return std::nan("");
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(line, "line " + std::to_string(line) + ": bad number '" + s + "'");
  }
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

const char* kEvalHeader = "method,lambda1,lambda2,lr_h,lr_v,acc_h,acc_v,r_h,r_v,frontier_acc,frontier_reward";

}  // namespace

void write_eval_csv(const std::vector<EvalPoint>& points, const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << kEvalHeader << '\n';
  for (const auto& p : points)
    out << p.method << ',' << real(p.lambda1) << ',' << real(p.lambda2) << ',' << real(p.lr_h) << ','
        << real(p.lr_v) << ',' << real(p.acc_h) << ',' << real(p.acc_v) << ',' << real(p.r_h) << ','
        << real(p.r_v) << ',' << (p.frontier_acc ? 1 : 0) << ',' << (p.frontier_reward ? 1 : 0) << '\n';
}

std::vector<EvalPoint> read_eval_csv(const std::string& path) {
  if (!std::filesystem::exists(path)) throw MissingDependency(path);
  std::ifstream in(path);
  std::string text;
  std::size_t line = 0;
  std::vector<EvalPoint> out;
  std::vector<std::string> header;
  while (std::getline(in, text)) {
    ++line;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (text.empty() || text[0] == '#') continue;
    const auto fields = split(text);
    if (header.empty()) {
      header = fields;
      const std::vector<std::string> required = split(kEvalHeader);
      for (std::size_t k = 0; k < 9; ++k)
        if (k >= header.size() || header[k] != required[k])
          throw DataError(line, "line " + std::to_string(line) + ": expected column '" + required[k] + "'");
      continue;
    }
    if (fields.size() != header.size())
      throw DataError(line, "line " + std::to_string(line) + ": expected " + std::to_string(header.size()) + " fields");
    EvalPoint p;
    p.method = fields[0];
    double* reals[] = {&p.lambda1, &p.lambda2, &p.lr_h, &p.lr_v, &p.acc_h, &p.acc_v, &p.r_h, &p.r_v};
    for (std::size_t k = 0; k < 8; ++k) *reals[k] = parse_real(fields[k + 1], line);
    if (header.size() > 9) p.frontier_acc = fields[9] == "1";
    if (header.size() > 10) p.frontier_reward = fields[10] == "1";
    out.push_back(p);
  }
  return out;
}

void EvalConfig::validate() const {
  if (max_new_tokens < 1) throw ConfigError("eval config: max_new_tokens must be at least 1");
  if (n_reward_prompts < 1) throw ConfigError("eval config: n_reward_prompts must be at least 1");
}

void to_json(json& j, const EvalConfig& c) {
  j = json{{"max_new_tokens", c.max_new_tokens},
           {"n_reward_prompts", c.n_reward_prompts},
           {"mix_mode", mix_mode_name(c.mix_mode)}};
}

void from_json(const json& j, EvalConfig& c) {
  const EvalConfig d;
  c.max_new_tokens = j.value("max_new_tokens", d.max_new_tokens);
  c.n_reward_prompts = j.value("n_reward_prompts", d.n_reward_prompts);
  c.mix_mode = parse_mix_mode(j.value("mix_mode", std::string(mix_mode_name(d.mix_mode))));
}

std::vector<Tokens> reward_prompts(const Benchmark& bench, int n) {
  std::vector<Tokens> out;
  std::set<Tokens> seen;
  for (const auto& p : bench.help_eval) {
    if (static_cast<int>(out.size()) == n) break;
    if (seen.insert(p.prompt).second) out.push_back(p.prompt);
  }
  return out;
}

template <std::floating_point Scalar>
MixResult evaluate_variant(const ModelVariant<Scalar>& variant, const Benchmark& bench,
                           const std::vector<Tokens>& prompts, const EvalConfig& config) {
  config.validate();
  if (prompts.empty()) throw DataError(0, "evaluate: no reward prompts");
  MixResult r;
  const ScoreFn score = mean_logprob_scorer(variant);
  r.point.acc_h = pairwise_accuracy(score, bench.help_eval);
  r.point.acc_v = pairwise_accuracy(score, bench.verb_eval);
  r.point.n_eval = static_cast<int>(bench.help_eval.size() + bench.verb_eval.size());
  double rh = 0, rv = 0;
  for (const Tokens& prompt : prompts) {
    Tokens response = greedy_decode(variant, prompt, config.max_new_tokens, bench.vocab.stop);
    const RewardScore s = reward_oracle(prompt, response, bench.facts, bench.vocab, config.max_new_tokens);
    rh += s.r_help;
    rv += s.r_verb;
    r.responses.push_back(std::move(response));
  }
  r.point.r_h = rh / static_cast<double>(prompts.size());
  r.point.r_v = rv / static_cast<double>(prompts.size());
  return r;
}

template <std::floating_point Scalar>
MixResult evaluate_mix(const ParamStore<Scalar>& base, const TaskVector<Scalar>& tau_help,
                       const TaskVector<Scalar>& tau_verb, std::pair<double, double> mix,
                       bool tangent, const Benchmark& bench, const std::vector<Tokens>& prompts,
                       const EvalConfig& config) {
  TaskVector<Scalar> delta = combine(base, MixTerms<Scalar>{{mix.first, &tau_help}, {mix.second, &tau_verb}});
  const ModelVariant<Scalar> variant = tangent && config.mix_mode == MixMode::Jvp
                                           ? ModelVariant<Scalar>::linearized(base, std::move(delta))
                                           : ModelVariant<Scalar>::materialized(base, delta);
  MixResult r = evaluate_variant(variant, bench, prompts, config);
  r.point.lambda1 = mix.first;
  r.point.lambda2 = mix.second;
  return r;
}

#define TSDPO_INSTANTIATE(S)                                                                      \
  template class ModelVariant<S>;                                                                 \
  template ScoreFn mean_logprob_scorer<S>(const ModelVariant<S>&);                                \
  template Tokens greedy_decode<S>(const ModelVariant<S>&, const Tokens&, int, Token);            \
  template MixResult evaluate_variant<S>(const ModelVariant<S>&, const Benchmark&,                \
                                         const std::vector<Tokens>&, const EvalConfig&);          \
  template MixResult evaluate_mix<S>(const ParamStore<S>&, const TaskVector<S>&,                  \
                                     const TaskVector<S>&, std::pair<double, double>, bool,       \
                                     const Benchmark&, const std::vector<Tokens>&,                \
                                     const EvalConfig&);

TSDPO_INSTANTIATE(double)
TSDPO_INSTANTIATE(float)

#undef TSDPO_INSTANTIATE

}  // namespace tsdpo
