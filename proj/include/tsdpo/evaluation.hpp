#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsdpo/composition.hpp"
#include "tsdpo/data.hpp"
#include "tsdpo/model.hpp"

namespace tsdpo {

/// How a tangent-space mix is evaluated: through the linearized forward, or
/// by materializing theta0 + delta and running the base forward.
enum class MixMode { Jvp, Materialized };

const char* mix_mode_name(MixMode m);
MixMode parse_mix_mode(const std::string& name);

/// A model to score or decode with: the base, the linearized model at the base
/// with some dparams, or a materialized parameter set. Keeps a pointer to the
/// base store, which must outlive it.
template <std::floating_point Scalar>
class ModelVariant {
 public:
  static ModelVariant base(const ParamStore<Scalar>& params);
  static ModelVariant linearized(const ParamStore<Scalar>& params0, TaskVector<Scalar> dparams);
  static ModelVariant materialized(const ParamStore<Scalar>& params0, const TaskVector<Scalar>& delta);

  const ModelConfig& config() const { return base_->config(); }
  Tensor<Scalar> logits(const Tokens& tokens) const;

 private:
  explicit ModelVariant(const ParamStore<Scalar>& b) : base_(&b) {}

  const ParamStore<Scalar>* base_;
  std::optional<ParamStore<Scalar>> owned_;
  std::optional<TaskVector<Scalar>> dparams_;
};

using ScoreFn = std::function<double(const Tokens& prompt, const Tokens& completion)>;

/// Mean-mode sequence log-probability of the completion under `variant`.
template <std::floating_point Scalar>
ScoreFn mean_logprob_scorer(const ModelVariant<Scalar>& variant);

/// Fraction of pairs with score(chosen) strictly above score(rejected).
double pairwise_accuracy(const ScoreFn& score, const std::vector<PreferencePair>& pairs);

using NextLogitsFn = std::function<Vector<double>(const Tokens& context)>;

/// Greedy decoding: argmax per step (lowest id on ties) until `stop_token`
/// or `max_new_tokens`. The stop token is not part of the returned
/// continuation. Throws TokenError when prompt plus continuation cannot fit in
/// `max_context`.
Tokens greedy_decode(const NextLogitsFn& next, const Tokens& prompt, int max_new_tokens,
                     Token stop_token, int max_context);

template <std::floating_point Scalar>
Tokens greedy_decode(const ModelVariant<Scalar>& variant, const Tokens& prompt, int max_new_tokens,
                     Token stop_token);

struct RewardScore {
  double r_help = 0;
  double r_verb = 0;
};

/// r_help: in-order fraction of the queried key's value found in the response;
/// r_verb: len(response) / max_new_tokens. Throws DataError on an unknown key.
RewardScore reward_oracle(const Tokens& prompt, const Tokens& response, const FactTable& facts,
                          const VocabLayout& vocab, int max_new_tokens);

enum class Orientation { Maximize, Minimize };

/// Indices of points not dominated by any other point (at least as good on
/// every axis and strictly better on one), in input order.
std::vector<std::size_t> pareto_front(const std::vector<std::vector<double>>& points,
                                      const std::vector<Orientation>& orientation);

struct EvalPoint {
  std::string method;
  double lambda1 = 0;
  double lambda2 = 0;
  double lr_h = 0;
  double lr_v = 0;
  double acc_h = 0;
  double acc_v = 0;
  double r_h = 0;
  double r_v = 0;
  int n_eval = 0;
  bool frontier_acc = false;
  bool frontier_reward = false;
};

/// Accuracy space: acc_h and acc_v maximized. Reward space: r_h maximized,
/// r_v minimized.
enum class ParetoSpace { Accuracy, Reward };

std::vector<EvalPoint> pareto_filter(const std::vector<EvalPoint>& points, ParetoSpace space);

/// Sets frontier_acc / frontier_reward within each method group.
void mark_frontiers(std::vector<EvalPoint>& points);

/// Columns: method,lambda1,lambda2,lr_h,lr_v,acc_h,acc_v,r_h,r_v,frontier_acc,frontier_reward.
/// Reals use 17 significant digits; an undefined lambda (NaN) is an empty field.
void write_eval_csv(const std::vector<EvalPoint>& points, const std::string& path);
/// Frontier columns are optional on input.
std::vector<EvalPoint> read_eval_csv(const std::string& path);

struct EvalConfig {
  int max_new_tokens = 32;
  int n_reward_prompts = 100;
  MixMode mix_mode = MixMode::Jvp;

  void validate() const;
  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);

/// The fixed prompt subset used for reward scoring: the first n distinct
/// HELP-eval prompts.
std::vector<Tokens> reward_prompts(const Benchmark& bench, int n);

struct MixResult {
  EvalPoint point;
  std::vector<Tokens> responses;
};

/// Accuracy on both eval splits plus mean oracle rewards over greedy
/// responses for `prompts`.
template <std::floating_point Scalar>
MixResult evaluate_variant(const ModelVariant<Scalar>& variant, const Benchmark& bench,
                           const std::vector<Tokens>& prompts, const EvalConfig& config);

/// Evaluates theta0 mixed with lambda1 * tau_help + lambda2 * tau_verb. With
/// `tangent` and MixMode::Jvp the mix runs through the linearized forward;
/// otherwise theta0 + delta is materialized.
template <std::floating_point Scalar>
MixResult evaluate_mix(const ParamStore<Scalar>& base, const TaskVector<Scalar>& tau_help,
                       const TaskVector<Scalar>& tau_verb, std::pair<double, double> mix,
                       bool tangent, const Benchmark& bench, const std::vector<Tokens>& prompts,
                       const EvalConfig& config);

}  // namespace tsdpo
