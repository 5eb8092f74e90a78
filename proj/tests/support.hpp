#pragma once

// Test-only oracles: random tensors and central finite differences computed
// purely through forward evaluation, independent of the jvp/vjp code paths.

#include <functional>
#include <random>

#include "tsdpo/autodiff.hpp"
#include "tsdpo/data.hpp"
#include "tsdpo/model.hpp"

namespace tsdpo::testing {

inline Tensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor<double> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = n(rng);
  return t;
}

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
  return a.data().dot(b.data());
}

inline double dot(const NamedTensors<double>& a, const NamedTensors<double>& b) {
  double s = 0.0;
  for (const auto& [name, t] : a) s += t.data().dot(b.at(name).data());
  return s;
}

/// Central difference of a scalar function of one named input, entry by entry.
inline Tensor<double> fd_gradient(const std::function<double(const NamedTensors<double>&)>& f,
                                  NamedTensors<double> point, const std::string& name,
                                  double h = 1e-5) {
  Tensor<double> g = point.at(name).zeros_like();
  for (Index i = 0; i < g.size(); ++i) {
    const double orig = point.at(name)[i];
    point.at(name)[i] = orig + h;
    const double up = f(point);
    point.at(name)[i] = orig - h;
    const double down = f(point);
    point.at(name)[i] = orig;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

/// (f(x + h*d) - f(x - h*d)) / 2h for a tensor-valued output node.
inline Tensor<double> fd_directional(const Graph& graph, NodeId out, const NamedTensors<double>& base,
                                     const NamedTensors<double>& dir, double h = 1e-5) {
  NamedTensors<double> up = base, down = base;
  for (const auto& [name, d] : dir) {
    up.at(name).data() += h * d.data();
    down.at(name).data() -= h * d.data();
  }
  const Tensor<double> a = evaluate(graph, Bindings<double>(up)).value(out);
  const Tensor<double> b = evaluate(graph, Bindings<double>(down)).value(out);
  return Tensor<double>(a.shape(), (a.data() - b.data()) / (2 * h));
}

/// Per-entry relative error with an absolute floor on the denominator.
inline double rel_err(const Tensor<double>& got, const Tensor<double>& want, double floor = 1e-6) {
  return max_relative_error(got, want, floor);
}

/// A model and benchmark small enough for training in unit tests.
inline ModelConfig tiny_model() {
  ModelConfig c;
  c.vocab_size = 24;
  c.dim = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.max_seq_len = 24;
  c.trainable_last_layers = 1;
  return c;
}

inline BenchSpec tiny_bench() {
  BenchSpec s;
  s.vocab_size = 24;
  s.n_facts = 6;
  s.value_alphabet = 6;
  s.n_train = 64;
  s.n_eval = 32;
  s.max_filler = 4;
  s.max_context = 3;
  return s;
}

}  // namespace tsdpo::testing
