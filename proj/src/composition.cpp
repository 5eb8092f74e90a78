#include "tsdpo/composition.hpp"

#include <cmath>

namespace tsdpo {

using nlohmann::json;

template <std::floating_point Scalar>
TaskVector<Scalar> extract_task_vector(const ParamStore<Scalar>& trained,
                                       const ParamStore<Scalar>& base, Provenance provenance) {
  if (!(trained.config() == base.config())) throw NameError("extract: model configs differ");
  if (trained.tensors().size() != base.tensors().size()) throw NameError("extract: layouts differ");
  TaskVector<Scalar> tv;
  tv.provenance = std::move(provenance);
  for (const auto& [name, b] : base.tensors()) {
    if (!trained.contains(name)) throw NameError("extract: '" + name + "' missing from trained model");
    const Tensor<Scalar>& t = trained.at(name);
    if (t.shape() != b.shape()) throw ShapeError("extract: shape mismatch on '" + name + "'");
    if (base.tags(name).trainable) {
      tv.tensors.emplace(name, Tensor<Scalar>(t.shape(), t.data() - b.data()));
    } else if (!(t == b)) {
      throw Error("extract: frozen parameter '" + name + "' differs from the base model");
    }
  }
  return tv;
}

template <std::floating_point Scalar>
TaskVector<Scalar> combine(const ParamStore<Scalar>& layout, const MixTerms<Scalar>& terms) {
  TaskVector<Scalar> out = TaskVector<Scalar>::zeros(layout);
  for (const auto& [lambda, tau] : terms) {
    tau->check_layout(layout);
    out.axpy(static_cast<Scalar>(lambda), *tau);
  }
  return out;
}

template <std::floating_point Scalar>
ParamStore<Scalar> compose(const ParamStore<Scalar>& base, const MixTerms<Scalar>& terms) {
  for (const auto& [_, tau] : terms) tau->check_layout(base);
  ParamStore<Scalar> out = base;
  for (const auto& [lambda, tau] : terms)
    for (const auto& [name, d] : tau->tensors) out.at(name).data() += static_cast<Scalar>(lambda) * d.data();
  return out;
}

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Convex: return "convex";
    case Strategy::Affine: return "affine";
    case Strategy::Affine2: return "affine2";
    case Strategy::Custom: return "custom";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  for (Strategy s : {Strategy::Convex, Strategy::Affine, Strategy::Affine2, Strategy::Custom})
    if (name == strategy_name(s)) return s;
  throw ConfigError("unknown sweep strategy '" + name + "'");
}

MixSpec sweep(Strategy strategy) {
  MixSpec m{strategy, {}};
  for (int i = 0; i <= 10; ++i) {
    switch (strategy) {
      case Strategy::Convex: m.coefficients.emplace_back(i / 10.0, (10 - i) / 10.0); break;
      case Strategy::Affine: m.coefficients.emplace_back(1.0, i / 10.0); break;
      case Strategy::Affine2: m.coefficients.emplace_back(1.0, i * 0.5); break;
      case Strategy::Custom: throw ConfigError("custom sweeps need an explicit coefficient list");
    }
  }
  return m;
}

MixSpec sweep_custom(std::vector<std::pair<double, double>> coefficients) {
  MixSpec m{Strategy::Custom, std::move(coefficients)};
  validate_mix(m);
  return m;
}

void validate_mix(const MixSpec& spec) {
  if (spec.coefficients.empty()) throw ConfigError("mix spec: no coefficients");
  for (const auto& [a, b] : spec.coefficients)
    if (!std::isfinite(a) || !std::isfinite(b)) throw ConfigError("mix spec: non-finite coefficient");
  if (spec.strategy != Strategy::Custom && !(spec == sweep(spec.strategy)))
    throw ConfigError(std::string("mix spec: coefficients do not match the ") +
                      strategy_name(spec.strategy) + " grid");
}

void to_json(json& j, const MixSpec& m) {
  json coeffs = json::array();
  for (const auto& [a, b] : m.coefficients) coeffs.push_back({a, b});
  j = json{{"strategy", strategy_name(m.strategy)}, {"coefficients", coeffs}};
}

void from_json(const json& j, MixSpec& m) {
  m.strategy = parse_strategy(j.at("strategy").get<std::string>());
  m.coefficients.clear();
  if (j.contains("coefficients"))
    for (const json& c : j.at("coefficients")) m.coefficients.emplace_back(c.at(0).get<double>(), c.at(1).get<double>());
  else
    m = sweep(m.strategy);
  validate_mix(m);
}

#define TSDPO_INSTANTIATE(S)                                                                  \
  template TaskVector<S> extract_task_vector<S>(const ParamStore<S>&, const ParamStore<S>&,   \
                                                Provenance);                                  \
  template TaskVector<S> combine<S>(const ParamStore<S>&, const MixTerms<S>&);                \
  template ParamStore<S> compose<S>(const ParamStore<S>&, const MixTerms<S>&);

TSDPO_INSTANTIATE(double)
TSDPO_INSTANTIATE(float)

#undef TSDPO_INSTANTIATE

}  // namespace tsdpo
