#pragma once

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tsdpo/model.hpp"

namespace tsdpo {

/// theta - theta0 over the trainable subset. Throws NameError/ShapeError on a
/// layout mismatch and Error if a frozen entry differs.
template <std::floating_point Scalar>
TaskVector<Scalar> extract_task_vector(const ParamStore<Scalar>& trained,
                                       const ParamStore<Scalar>& base, Provenance provenance = {});

template <std::floating_point Scalar>
using MixTerms = std::vector<std::pair<double, const TaskVector<Scalar>*>>;

/// sum_i lambda_i * tau_i, accumulated from zero in term order.
template <std::floating_point Scalar>
TaskVector<Scalar> combine(const ParamStore<Scalar>& layout, const MixTerms<Scalar>& terms);

/// theta0 + sum_i lambda_i * tau_i as a new store; frozen entries are copied
/// untouched and `base` is not modified.
template <std::floating_point Scalar>
ParamStore<Scalar> compose(const ParamStore<Scalar>& base, const MixTerms<Scalar>& terms);

enum class Strategy { Convex, Affine, Affine2, Custom };

const char* strategy_name(Strategy s);
Strategy parse_strategy(const std::string& name);

struct MixSpec {
  Strategy strategy = Strategy::Convex;
  std::vector<std::pair<double, double>> coefficients;

  friend bool operator==(const MixSpec&, const MixSpec&) = default;
};

/// convex: (l, 1-l), l in {0, 0.1, ..., 1}; affine: (1, l), l in {0, 0.1, ..., 1};
/// affine2: (1, l), l in {0, 0.5, ..., 5}. Custom requires an explicit list.
MixSpec sweep(Strategy strategy);
MixSpec sweep_custom(std::vector<std::pair<double, double>> coefficients);

/// Checks the coefficient grid against the strategy; throws ConfigError.
void validate_mix(const MixSpec& spec);

void to_json(nlohmann::json& j, const MixSpec& m);
void from_json(const nlohmann::json& j, MixSpec& m);

}  // namespace tsdpo
