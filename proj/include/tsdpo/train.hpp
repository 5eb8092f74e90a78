#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tsdpo/data.hpp"
#include "tsdpo/model.hpp"

namespace tsdpo {

enum class LogprobMode { Sum, Mean };
/// standard: optimize a copy of the trainable subset; tangent: optimize
/// dparams of the linearized model; mixed: standard over a merged dataset.
enum class TrainMode { Standard, Tangent, Mixed };

const char* logprob_mode_name(LogprobMode m);
LogprobMode parse_logprob_mode(const std::string& name);
const char* train_mode_name(TrainMode m);
TrainMode parse_train_mode(const std::string& name);

/// Sum or mean of log-softmax probabilities of tokens[start..], where
/// logits row t predicts tokens[t + 1]. Requires 1 <= start < len(tokens).
template <std::floating_point Scalar>
double sequence_logprob(const Tensor<Scalar>& logits, const Tokens& tokens, std::size_t start,
                        LogprobMode mode);

/// d sequence_logprob / d logits, same shape as logits.
template <std::floating_point Scalar>
Tensor<Scalar> sequence_logprob_grad(const Tensor<Scalar>& logits, const Tokens& tokens,
                                     std::size_t start, LogprobMode mode);

/// -log sigmoid(beta * ((lp_w - ref_w) - (lp_l - ref_l))), evaluated stably.
double dpo_loss(double lp_w_policy, double lp_l_policy, double lp_w_ref, double lp_l_ref,
                double beta);

/// Partial derivatives of dpo_loss with respect to the two policy log-probs.
std::pair<double, double> dpo_loss_grad(double lp_w_policy, double lp_l_policy, double lp_w_ref,
                                        double lp_l_ref, double beta);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

template <std::floating_point Scalar>
struct AdamState {
  long step = 0;
  NamedTensors<Scalar> m;
  NamedTensors<Scalar> v;
};

/// One AdamW update with decoupled weight decay (p *= 1 - lr * wd before the
/// moment step) and bias-corrected moments. Moments start at zero on the first
/// call. Throws NameError/ShapeError if grads do not match params.
template <std::floating_point Scalar>
void adamw_step(NamedTensors<Scalar>& params, const NamedTensors<Scalar>& grads,
                AdamState<Scalar>& state, const AdamConfig& config);

template <std::floating_point Scalar>
void adamw_step(TaskVector<Scalar>& params, const TaskVector<Scalar>& grads,
                AdamState<Scalar>& state, const AdamConfig& config) {
  adamw_step(params.tensors, grads.tensors, state, config);
}

struct TrainConfig {
  double beta = 0.01;
  double learning_rate = 2e-4;
  int epochs = 4;
  int batch_size = 32;
  /// Micro-batches accumulated per optimizer step; the effective batch is
  /// batch_size * grad_accum.
  int grad_accum = 1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::Tangent;
  LogprobMode logprob_mode_train = LogprobMode::Sum;
  /// Stop after this many optimizer steps; 0 means run every epoch to the end.
  int max_steps = 200;

  void validate() const;
  AdamConfig adam() const {
    return {learning_rate, adam_beta1, adam_beta2, adam_eps, weight_decay};
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct LossPoint {
  int step;
  double loss;
  friend bool operator==(const LossPoint&, const LossPoint&) = default;
};
using LossCurve = std::vector<LossPoint>;

/// "step,loss" with 17 significant digits.
void write_loss_csv(const LossCurve& curve, const std::string& path);

/// Raised when a training loss turns NaN/Inf; carries the optimizer step.
class NonFiniteLoss : public Error {
 public:
  NonFiniteLoss(int step, const std::string& what) : Error(what), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

/// Frozen reference log-probs of one pair, computed once from theta0.
struct PairReference {
  double chosen = 0;
  double rejected = 0;
};

template <std::floating_point Scalar>
PairReference reference_logprobs(const ParamStore<Scalar>& base, const PreferencePair& pair,
                                 LogprobMode mode);

/// Loss of one pair and its gradient over the trainable subset. In tangent
/// mode `point` is dparams and the policy is the linearized model at `base`;
/// otherwise `point` holds trainable values replacing those of `base`.
template <std::floating_point Scalar>
struct PairLoss {
  double loss = 0;
  double lp_chosen = 0;
  double lp_rejected = 0;
  NamedTensors<Scalar> grad;
};

template <std::floating_point Scalar>
PairLoss<Scalar> dpo_pair_loss(const ParamStore<Scalar>& base, const NamedTensors<Scalar>& point,
                               bool tangent, const PreferencePair& pair, const PairReference& ref,
                               double beta, LogprobMode mode, bool with_grad = true);

template <std::floating_point Scalar>
struct TrainResult {
  TaskVector<Scalar> delta;
  LossCurve curve;
};

/// Runs DPO in the configured mode. The returned delta is theta - theta0
/// (standard, mixed) or dparams (tangent). Reference log-probs always come
/// from `base`, which is never modified. Throws DataError on an empty dataset
/// and NonFiniteLoss on a non-finite batch loss.
template <std::floating_point Scalar>
TrainResult<Scalar> train(const ParamStore<Scalar>& base, const std::vector<PreferencePair>& data,
                          const TrainConfig& config, Provenance provenance = {});

/// Concatenation of both axes for the scalarized run; train() shuffles it.
std::vector<PreferencePair> mixed_dataset(const std::vector<PreferencePair>& help,
                                          const std::vector<PreferencePair>& verb);

/// Supervised warm-up that produces the base model. `filler_continue` is the
/// per-token probability of another filler token after the value in the
/// corpus responses; low values leave the base preferring short answers.
struct PretrainConfig {
  int steps = 200;
  int batch_size = 16;
  double learning_rate = 3e-3;
  double filler_continue = 0.1;
  int corpus_size = 4000;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const PretrainConfig&, const PretrainConfig&) = default;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

/// Fits every parameter of `params` to the response tokens of `corpus` by
/// next-token cross-entropy (mean over response tokens) with Adam.
template <std::floating_point Scalar>
LossCurve pretrain(ParamStore<Scalar>& params, const std::vector<Continuation>& corpus,
                   const PretrainConfig& config);

}  // namespace tsdpo
