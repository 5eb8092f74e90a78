#include "tsdpo/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "tsdpo/geometry.hpp"
#include "tsdpo/plot.hpp"
#include "tsdpo/snapshot.hpp"

namespace tsdpo {

using nlohmann::json;
namespace fs = std::filesystem;

const char* precision_name(Precision p) { return p == Precision::F64 ? "f64" : "f32"; }

Precision parse_precision(const std::string& name) {
  if (name == "f64") return Precision::F64;
  if (name == "f32") return Precision::F32;
  throw ConfigError("unknown precision '" + name + "' (f64|f32)");
}

const char* method_name(Method m) {
  switch (m) {
    case Method::TsDpo: return "ts-dpo";
    case Method::Dpo: return "dpo";
    case Method::DpoMixed: return "dpo-mixed";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::TsDpo, Method::Dpo, Method::DpoMixed})
    if (name == method_name(m)) return m;
  throw ConfigError("unknown method '" + name + "' (ts-dpo|dpo|dpo-mixed)");
}

std::string group_label(Method m, std::optional<Strategy> strategy) {
  if (m == Method::DpoMixed) return "DPO Mixed";
  std::string out = m == Method::TsDpo ? "TS-DPO" : "DPO";
  if (strategy) {
    switch (*strategy) {
      case Strategy::Convex: out += " Convex"; break;
      case Strategy::Affine: out += " Affine"; break;
      case Strategy::Affine2: out += " Affine-2"; break;
      case Strategy::Custom: out += " Custom"; break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// config

RunConfig::RunConfig() {
  ts_help.mode = ts_verb.mode = TrainMode::Tangent;
  dpo_help.mode = dpo_verb.mode = TrainMode::Standard;
  mixed.train.mode = TrainMode::Mixed;
  for (Method m : {Method::TsDpo, Method::Dpo})
    for (Strategy s : {Strategy::Convex, Strategy::Affine, Strategy::Affine2}) sweeps.push_back({m, s});
  sweeps.push_back({Method::DpoMixed, Strategy::Convex});
}

void RunConfig::validate() const {
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  model.validate();
  base.validate();
  bench.validate();
  if (bench.vocab_size != model.vocab_size)
    throw ConfigError("bench.vocab_size (" + std::to_string(bench.vocab_size) + ") differs from model.vocab_size (" +
                      std::to_string(model.vocab_size) + ")");
  for (const TrainConfig* t : {&ts_help, &ts_verb, &dpo_help, &dpo_verb, &mixed.train}) t->validate();
  if (mixed.learning_rates.empty()) throw ConfigError("mixed.learning_rates must not be empty");
  for (double lr : mixed.learning_rates)
    if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("mixed.learning_rates must be finite and >= 0");
  if (lr_sweep.grid.empty()) throw ConfigError("lr_sweep.grid must not be empty");
  for (double lr : lr_sweep.grid)
    if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("lr_sweep.grid rates must be positive");
  if (lr_sweep.holdout < 1 || lr_sweep.holdout >= bench.n_train)
    throw ConfigError("lr_sweep.holdout must lie in [1, bench.n_train)");
  for (const auto& s : sweeps)
    if (s.strategy == Strategy::Custom) throw ConfigError("sweeps: custom strategies are not supported in a run config");
  eval.validate();
  if (eval.n_reward_prompts > bench.n_eval) throw ConfigError("eval.n_reward_prompts exceeds bench.n_eval");
  if (analysis.n_prompts < 2 || analysis.n_prompts > bench.n_eval)
    throw ConfigError("analysis.n_prompts must lie in [2, bench.n_eval]");
  if (analysis.k < 0) throw ConfigError("analysis.k must be >= 0");
  if (!(analysis.ridge >= 0) || !std::isfinite(analysis.ridge)) throw ConfigError("analysis.ridge must be >= 0");
}

TrainConfig RunConfig::train_config(Method method, Axis objective) const {
  TrainConfig c;
  switch (method) {
    case Method::TsDpo:
      c = objective == Axis::Help ? ts_help : ts_verb;
      c.mode = TrainMode::Tangent;
      break;
    case Method::Dpo:
      c = objective == Axis::Help ? dpo_help : dpo_verb;
      c.mode = TrainMode::Standard;
      break;
    case Method::DpoMixed:
      c = mixed.train;
      c.mode = TrainMode::Mixed;
      break;
  }
  return c;
}

json to_json(const RunConfig& c) {
  json sweeps = json::array();
  for (const auto& s : c.sweeps) {
    if (s.method == Method::DpoMixed)
      sweeps.push_back({{"method", method_name(s.method)}});
    else
      sweeps.push_back({{"method", method_name(s.method)}, {"strategy", strategy_name(s.strategy)}});
  }
  return json{{"output_dir", c.output_dir},
              {"global_seed", c.global_seed},
              {"precision", precision_name(c.precision)},
              {"model", c.model},
              {"base", c.base},
              {"bench", c.bench},
              {"train",
               {{"ts-dpo", {{"help", c.ts_help}, {"verb", c.ts_verb}}},
                {"dpo", {{"help", c.dpo_help}, {"verb", c.dpo_verb}}},
                {"dpo-mixed", {{"config", c.mixed.train}, {"learning_rates", c.mixed.learning_rates}}}}},
              {"lr_sweep", {{"grid", c.lr_sweep.grid}, {"holdout", c.lr_sweep.holdout}}},
              {"sweeps", sweeps},
              {"eval", c.eval},
              {"analysis", {{"n_prompts", c.analysis.n_prompts}, {"k", c.analysis.k}, {"ridge", c.analysis.ridge}}}};
}

namespace {

// Sub-object `key` of j (empty if absent) with a default seed filled in.
template <class T>
T seeded(const json& j, const char* key, std::uint64_t seed, T fallback) {
  json sub = j.contains(key) ? j.at(key) : json::object();
  if (!sub.is_object()) throw ConfigError(std::string(key) + " must be an object");
  if (!sub.contains("seed")) sub["seed"] = seed;
  from_json(sub, fallback);
  return fallback;
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, _] : j.items())
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
}

}  // namespace

RunConfig run_config_from_json(const json& j) {
  try {
    check_keys(j, {"output_dir", "global_seed", "precision", "model", "base", "bench", "train", "lr_sweep", "sweeps",
                   "eval", "analysis"},
               "config");
    RunConfig c;
    c.output_dir = j.value("output_dir", c.output_dir);
    c.global_seed = j.value("global_seed", c.global_seed);
    const std::uint64_t g = c.global_seed;
    c.precision = parse_precision(j.value("precision", std::string("f64")));
    if (j.contains("model")) from_json(j.at("model"), c.model);
    c.base = seeded(j, "base", g, c.base);
    c.bench = seeded(j, "bench", g, c.bench);
    if (j.contains("train")) {
      const json& t = j.at("train");
      check_keys(t, {"ts-dpo", "dpo", "dpo-mixed"}, "train");
      const json empty = json::object();
      const json& ts = t.contains("ts-dpo") ? t.at("ts-dpo") : empty;
      const json& dpo = t.contains("dpo") ? t.at("dpo") : empty;
      const json& mixed = t.contains("dpo-mixed") ? t.at("dpo-mixed") : empty;
      check_keys(ts, {"help", "verb"}, "train.ts-dpo");
      check_keys(dpo, {"help", "verb"}, "train.dpo");
      check_keys(mixed, {"config", "learning_rates"}, "train.dpo-mixed");
      c.ts_help = seeded(ts, "help", g, c.ts_help);
      c.ts_verb = seeded(ts, "verb", g, c.ts_verb);
      c.dpo_help = seeded(dpo, "help", g, c.dpo_help);
      c.dpo_verb = seeded(dpo, "verb", g, c.dpo_verb);
      c.mixed.train = seeded(mixed, "config", g, c.mixed.train);
      if (mixed.contains("learning_rates")) c.mixed.learning_rates = mixed.at("learning_rates").get<std::vector<double>>();
    } else {
      for (TrainConfig* tc : {&c.ts_help, &c.ts_verb, &c.dpo_help, &c.dpo_verb, &c.mixed.train}) tc->seed = g;
    }
    if (j.contains("lr_sweep")) {
      const json& l = j.at("lr_sweep");
      check_keys(l, {"grid", "holdout"}, "lr_sweep");
      c.lr_sweep.grid = l.value("grid", c.lr_sweep.grid);
      c.lr_sweep.holdout = l.value("holdout", c.lr_sweep.holdout);
    }
    if (j.contains("sweeps")) {
      c.sweeps.clear();
      for (const json& s : j.at("sweeps")) {
        SweepRequest r;
        r.method = parse_method(s.at("method").get<std::string>());
        if (r.method != Method::DpoMixed) r.strategy = parse_strategy(s.at("strategy").get<std::string>());
        c.sweeps.push_back(r);
      }
    }
    if (j.contains("eval")) from_json(j.at("eval"), c.eval);
    if (j.contains("analysis")) {
      const json& a = j.at("analysis");
      check_keys(a, {"n_prompts", "k", "ridge"}, "analysis");
      c.analysis.n_prompts = a.value("n_prompts", c.analysis.n_prompts);
      c.analysis.k = a.value("k", c.analysis.k);
      c.analysis.ridge = a.value("ridge", c.analysis.ridge);
    }
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

std::string RunConfig::hash() const {
  json j = to_json(*this);
  j.erase("output_dir");
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// paths

std::string RunPaths::split(Axis axis, bool eval) const {
  return (fs::path(root) / "data" / (std::string(axis_name(axis)) + (eval ? "_eval" : "_train") + ".jsonl")).string();
}
std::string RunPaths::facts() const { return (fs::path(root) / "data" / "facts.json").string(); }
std::string RunPaths::base_snapshot() const { return (fs::path(root) / "base" / "base.snap").string(); }
std::string RunPaths::task_vector(Method method, Axis objective) const {
  return (fs::path(root) / "train" / (std::string(method_name(method)) + "_" + axis_name(objective) + ".snap")).string();
}
std::string RunPaths::mixed_vector(std::size_t index) const {
  return (fs::path(root) / "train" / ("dpo-mixed_" + std::to_string(index) + ".snap")).string();
}
std::string RunPaths::loss_csv(Method method, const std::string& tag) const {
  return (fs::path(root) / "train" / (std::string(method_name(method)) + "_" + tag + "_loss.csv")).string();
}
std::string RunPaths::sweep_csv(Method method, std::optional<Strategy> strategy) const {
  std::string name = method_name(method);
  if (method != Method::DpoMixed && strategy) name += std::string("_") + strategy_name(*strategy);
  return (fs::path(root) / "sweeps" / (name + ".csv")).string();
}
std::string RunPaths::analysis(const std::string& file) const { return (fs::path(root) / "analysis" / file).string(); }
std::string RunPaths::report(const std::string& file) const { return (fs::path(root) / "report" / file).string(); }

// ---------------------------------------------------------------------------
// helpers

void write_sidecar(const std::string& artifact, const RunConfig& config, const std::string& command,
                   const json& extra) {
  json meta{{"artifact", fs::path(artifact).filename().string()},
            {"command", command},
            {"config_hash", config.hash()},
            {"global_seed", config.global_seed},
            {"precision", precision_name(config.precision)},
            {"mix_mode", mix_mode_name(config.eval.mix_mode)}};
  for (const auto& [k, v] : extra.items()) meta[k] = v;
  write_text_file(artifact + ".meta.json", meta.dump(2) + "\n");
}

namespace {

void ensure_parent(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

void require(const std::string& path) {
  if (!fs::exists(path)) throw MissingDependency(path);
}

Benchmark load_benchmark(const RunConfig& config, const RunPaths& paths) {
  Benchmark b;
  b.spec = config.bench;
  b.vocab = VocabLayout::from_spec(config.bench);
  require(paths.facts());
  std::ifstream in(paths.facts());
  json facts;
  try {
    in >> facts;
  } catch (const json::exception& e) {
    throw DataError(0, paths.facts() + ": " + e.what());
  }
  for (const auto& [k, v] : facts.items()) b.facts[static_cast<Token>(std::stoi(k))] = v.get<Tokens>();
  const int vocab = config.bench.vocab_size;
  b.help_train = read_pairs(paths.split(Axis::Help, false), vocab);
  b.help_eval = read_pairs(paths.split(Axis::Help, true), vocab);
  b.verb_train = read_pairs(paths.split(Axis::Verb, false), vocab);
  b.verb_eval = read_pairs(paths.split(Axis::Verb, true), vocab);
  return b;
}

template <std::floating_point Scalar>
ParamStore<Scalar> load_base(const RunConfig& config, const RunPaths& paths) {
  ParamStore<Scalar> base = load_params<Scalar>(paths.base_snapshot());
  if (!(base.config() == config.model))
    throw ConfigError("base snapshot " + paths.base_snapshot() + " was built with a different model config");
  return base;
}

template <std::floating_point Scalar>
TaskVector<Scalar> load_tau(const std::string& path, const ParamStore<Scalar>& base) {
  ModelConfig mc;
  TaskVector<Scalar> tv = load_task_vector<Scalar>(path, &mc);
  if (!(mc == base.config())) throw ConfigError("task vector " + path + " was built with a different model config");
  tv.check_layout(base);
  return tv;
}

std::string loss_plot(const std::vector<std::pair<std::string, LossCurve>>& curves, const std::string& title) {
  std::vector<Series> series;
  for (const auto& [label, curve] : curves) {
    Series s;
    s.label = label;
    for (const auto& p : curve) {
      s.x.push_back(p.step);
      s.y.push_back(p.loss);
    }
    series.push_back(std::move(s));
  }
  return line_chart_svg({title, "step", "DPO loss"}, series);
}

template <std::floating_point Scalar>
void train_impl(const RunConfig& config, Method method, std::optional<Axis> objective) {
  const RunPaths paths{config.output_dir};
  const Benchmark bench = load_benchmark(config, paths);
  const ParamStore<Scalar> base = load_base<Scalar>(config, paths);
  const std::string command = std::string("train --method ") + method_name(method);

  if (method == Method::DpoMixed) {
    const auto data = mixed_dataset(bench.help_train, bench.verb_train);
    std::vector<std::pair<std::string, LossCurve>> curves;
    for (std::size_t i = 0; i < config.mixed.learning_rates.size(); ++i) {
      TrainConfig tc = config.train_config(method, Axis::Help);
      tc.learning_rate = config.mixed.learning_rates[i];
      char lr[32];
      std::snprintf(lr, sizeof lr, "%g", tc.learning_rate);
      auto r = train(base, data, tc, {"both", method_name(method), std::string("lr=") + lr});
      const std::string snap = paths.mixed_vector(i);
      ensure_parent(snap);
      save_task_vector(snap, r.delta, base.config());
      write_sidecar(snap, config, command, {{"learning_rate", tc.learning_rate}, {"train", tc}});
      const std::string csv = paths.loss_csv(method, std::to_string(i));
      write_loss_csv(r.curve, csv);
      write_sidecar(csv, config, command, {{"learning_rate", tc.learning_rate}});
      curves.emplace_back(std::string("lr ") + lr, std::move(r.curve));
    }
    const std::string all = paths.loss_csv(method, "all");
    const std::string svg = all.substr(0, all.size() - 4) + ".svg";
    write_text_file(svg, loss_plot(curves, "DPO Mixed training loss"));
    write_sidecar(svg, config, command);
    return;
  }

  std::vector<Axis> axes;
  if (objective) axes = {*objective};
  else axes = {Axis::Help, Axis::Verb};
  for (Axis axis : axes) {
    const TrainConfig tc = config.train_config(method, axis);
    const auto& data = axis == Axis::Help ? bench.help_train : bench.verb_train;
    auto r = train(base, data, tc, {axis_name(axis), method_name(method), config.hash()});
    const std::string snap = paths.task_vector(method, axis);
    ensure_parent(snap);
    save_task_vector(snap, r.delta, base.config());
    write_sidecar(snap, config, command + " --objective " + axis_name(axis), {{"train", tc}});
    const std::string csv = paths.loss_csv(method, axis_name(axis));
    write_loss_csv(r.curve, csv);
    write_sidecar(csv, config, command + " --objective " + axis_name(axis));
    const std::string svg = csv.substr(0, csv.size() - 4) + ".svg";
    write_text_file(svg, loss_plot({{axis_name(axis), r.curve}}, group_label(method) + " training loss (" +
                                                                    axis_name(axis) + ")"));
    write_sidecar(svg, config, command + " --objective " + axis_name(axis));
  }
}

template <std::floating_point Scalar>
double lr_sweep_impl(const RunConfig& config, Method method, Axis objective) {
  if (method == Method::DpoMixed) throw ConfigError("lr sweep supports ts-dpo and dpo");
  const RunPaths paths{config.output_dir};
  const Benchmark bench = load_benchmark(config, paths);
  const ParamStore<Scalar> base = load_base<Scalar>(config, paths);
  const auto& all = objective == Axis::Help ? bench.help_train : bench.verb_train;
  const auto holdout = static_cast<std::size_t>(config.lr_sweep.holdout);
  if (holdout >= all.size()) throw ConfigError("lr_sweep.holdout must be smaller than the training split");
  const std::vector<PreferencePair> fit(all.begin(), all.end() - static_cast<std::ptrdiff_t>(holdout));
  const std::vector<PreferencePair> held(all.end() - static_cast<std::ptrdiff_t>(holdout), all.end());

  std::vector<double> grid = config.lr_sweep.grid;
  std::sort(grid.begin(), grid.end());
  std::vector<std::pair<std::string, LossCurve>> curves;
  std::vector<double> accs, finals;
  for (double lr : grid) {
    TrainConfig tc = config.train_config(method, objective);
    tc.learning_rate = lr;
    auto r = train(base, fit, tc);
    const auto variant = method == Method::TsDpo ? ModelVariant<Scalar>::linearized(base, r.delta)
                                                 : ModelVariant<Scalar>::materialized(base, r.delta);
    accs.push_back(pairwise_accuracy(mean_logprob_scorer(variant), held));
    finals.push_back(r.curve.back().loss);
    char label[32];
    std::snprintf(label, sizeof label, "lr %g", lr);
    curves.emplace_back(label, std::move(r.curve));
  }
  const std::size_t best = static_cast<std::size_t>(std::max_element(accs.begin(), accs.end()) - accs.begin());
  const std::string stem = (fs::path(config.output_dir) / "train" /
                            (std::string("lr_sweep_") + method_name(method) + "_" + axis_name(objective)))
                               .string();
  ensure_parent(stem);
  std::ofstream out(stem + ".csv", std::ios::binary | std::ios::trunc);
  out << "learning_rate,final_loss,holdout_accuracy,selected\n";
  for (std::size_t i = 0; i < grid.size(); ++i) {
    char line[128];
    std::snprintf(line, sizeof line, "%.17g,%.17g,%.17g,%d\n", grid[i], finals[i], accs[i], i == best ? 1 : 0);
    out << line;
  }
  out.close();
  const std::string command = std::string("train --lr-sweep --method ") + method_name(method) + " --objective " +
                              axis_name(objective);
  write_sidecar(stem + ".csv", config, command, {{"holdout", config.lr_sweep.holdout}});
  write_text_file(stem + ".svg", loss_plot(curves, group_label(method) + " learning-rate sweep (" +
                                                       axis_name(objective) + ")"));
  write_sidecar(stem + ".svg", config, command);
  return grid[best];
}

std::vector<Tokens> eval_prompts(const Benchmark& bench, int n) {
  auto prompts = reward_prompts(bench, n);
  if (static_cast<int>(prompts.size()) < n)
    throw DataError(0, "only " + std::to_string(prompts.size()) + " distinct eval prompts, need " + std::to_string(n));
  return prompts;
}

template <std::floating_point Scalar>
void sweep_impl(const RunConfig& config, Method method, Strategy strategy) {
  const RunPaths paths{config.output_dir};
  // name every missing prerequisite before any work
  if (method == Method::DpoMixed) {
    for (std::size_t i = 0; i < config.mixed.learning_rates.size(); ++i) require(paths.mixed_vector(i));
  } else {
    require(paths.task_vector(method, Axis::Help));
    require(paths.task_vector(method, Axis::Verb));
  }
  const Benchmark bench = load_benchmark(config, paths);
  const ParamStore<Scalar> base = load_base<Scalar>(config, paths);
  const auto prompts = eval_prompts(bench, config.eval.n_reward_prompts);
  std::vector<EvalPoint> points;
  const std::string out = paths.sweep_csv(method, strategy);
  std::string command = std::string("sweep --method ") + method_name(method);

  if (method == Method::DpoMixed) {
    for (std::size_t i = 0; i < config.mixed.learning_rates.size(); ++i) {
      const auto tau = load_tau<Scalar>(paths.mixed_vector(i), base);
      auto r = evaluate_variant(ModelVariant<Scalar>::materialized(base, tau), bench, prompts, config.eval);
      r.point.method = group_label(method);
      r.point.lambda1 = r.point.lambda2 = std::nan("");
      r.point.lr_h = r.point.lr_v = config.mixed.learning_rates[i];
      points.push_back(r.point);
    }
  } else {
    command += std::string(" --strategy ") + strategy_name(strategy);
    const auto tau_h = load_tau<Scalar>(paths.task_vector(method, Axis::Help), base);
    const auto tau_v = load_tau<Scalar>(paths.task_vector(method, Axis::Verb), base);
    const double lr_h = config.train_config(method, Axis::Help).learning_rate;
    const double lr_v = config.train_config(method, Axis::Verb).learning_rate;
    for (const auto& mix : sweep(strategy).coefficients) {
      auto r = evaluate_mix(base, tau_h, tau_v, mix, method == Method::TsDpo, bench, prompts, config.eval);
      r.point.method = group_label(method, strategy);
      r.point.lr_h = lr_h;
      r.point.lr_v = lr_v;
      points.push_back(r.point);
    }
  }
  mark_frontiers(points);
  ensure_parent(out);
  write_eval_csv(points, out);
  write_sidecar(out, config, command, {{"n_reward_prompts", config.eval.n_reward_prompts},
                                       {"max_new_tokens", config.eval.max_new_tokens}});
}

std::vector<std::string> geometry_notes(const RunConfig& config) {
  return {"config_hash=" + config.hash(), "precision=" + std::string(precision_name(config.precision)),
          "deltas=raw task vectors", "hidden_layer=" + std::to_string(config.model.tap_layer()) + " (last token)"};
}

template <std::floating_point Scalar>
void analyze_impl(const RunConfig& config) {
  const RunPaths paths{config.output_dir};
  for (Method m : {Method::Dpo, Method::TsDpo})
    for (Axis a : {Axis::Help, Axis::Verb}) require(paths.task_vector(m, a));
  const Benchmark bench = load_benchmark(config, paths);
  const ParamStore<Scalar> base = load_base<Scalar>(config, paths);
  const auto prompts = eval_prompts(bench, config.analysis.n_prompts);
  const auto notes = geometry_notes(config);

  std::vector<std::string> categories;
  std::vector<BarSeries> cos_series, norm_series;
  std::vector<LabeledSpectrum> spectra;
  json summary = json::object();
  for (Method m : {Method::Dpo, Method::TsDpo}) {
    const auto tau_h = load_tau<Scalar>(paths.task_vector(m, Axis::Help), base);
    const auto tau_v = load_tau<Scalar>(paths.task_vector(m, Axis::Verb), base);
    const auto layers = layer_cosine_and_norms(tau_h, tau_v, base);
    const std::string csv = paths.analysis(std::string("layer_geometry_") + method_name(m) + ".csv");
    ensure_parent(csv);
    write_layer_csv(layers, csv, notes);
    write_sidecar(csv, config, "analyze");

    categories.clear();
    BarSeries cs{group_label(m), {}}, nh{group_label(m) + " help", {}}, nv{group_label(m) + " verb", {}};
    double abs_cos = 0;
    int defined = 0;
    for (const auto& g : layers) {
      categories.push_back("L" + std::to_string(g.layer) + " " + block_name(g.block));
      cs.values.push_back(g.cosine ? *g.cosine : std::nan(""));
      nh.values.push_back(g.norm_a);
      nv.values.push_back(g.norm_b);
      if (g.cosine) abs_cos += std::abs(*g.cosine), ++defined;
    }
    cos_series.push_back(std::move(cs));
    norm_series.push_back(std::move(nh));
    norm_series.push_back(std::move(nv));

    const bool tangent = m == Method::TsDpo;
    const auto dh = collect_activation_deltas(base, tau_h, tangent, prompts, "help");
    const auto dv = collect_activation_deltas(base, tau_v, tangent, prompts, "verb");
    spectra.push_back({group_label(m), cca(dh.rows, dv.rows, config.analysis.k, config.analysis.ridge)});
    const auto& rho = spectra.back().result.correlations;
    double mean_rho = 0;
    for (double r : rho) mean_rho += r;
    mean_rho /= static_cast<double>(rho.size());
    summary[method_name(m)] = {{"mean_abs_layer_cosine", defined ? abs_cos / defined : std::nan("")},
                               {"mean_correlation", mean_rho},
                               {"correlations", rho}};
  }

  const std::string cos_svg = paths.analysis("layer_cosine.svg");
  write_text_file(cos_svg, bar_chart_svg({"Help vs verb update cosine per layer", "layer / block", "cosine"},
                                         categories, cos_series));
  write_sidecar(cos_svg, config, "analyze");
  const std::string norm_svg = paths.analysis("layer_norms.svg");
  write_text_file(norm_svg, bar_chart_svg({"Update norm per layer", "layer / block", "l2 norm"}, categories,
                                          norm_series));
  write_sidecar(norm_svg, config, "analyze");

  const std::string spec_csv = paths.analysis("cca_spectrum.csv");
  write_spectrum_csv(spectra, spec_csv, notes);
  write_sidecar(spec_csv, config, "analyze", {{"ridge", config.analysis.ridge}, {"n_prompts", config.analysis.n_prompts}});
  std::vector<Series> lines;
  for (const auto& s : spectra) {
    Series line;
    line.label = s.label;
    line.y = s.result.correlations;
    line.markers = true;
    for (std::size_t i = 0; i < s.result.correlations.size(); ++i) line.x.push_back(static_cast<double>(i + 1));
    lines.push_back(std::move(line));
  }
  const std::string spec_svg = paths.analysis("cca_spectrum.svg");
  write_text_file(spec_svg, line_chart_svg({"Canonical correlations, help vs verb activation deltas", "component",
                                            "correlation"},
                                           lines));
  write_sidecar(spec_svg, config, "analyze");

  // recorded, not asserted
  const double dpo = summary["dpo"]["mean_correlation"], ts = summary["ts-dpo"]["mean_correlation"];
  summary["faster_decay"] = ts < dpo ? "ts-dpo" : (dpo < ts ? "dpo" : "tie");
  const std::string sum_path = paths.analysis("summary.json");
  write_text_file(sum_path, summary.dump(2) + "\n");
  write_sidecar(sum_path, config, "analyze");
}

void gen_data_impl(const RunConfig& config) {
  const RunPaths paths{config.output_dir};
  const Benchmark b = gen_benchmark(config.bench);
  for (Axis a : {Axis::Help, Axis::Verb})
    for (bool eval : {false, true}) {
      const std::string p = paths.split(a, eval);
      ensure_parent(p);
      const auto& pairs = a == Axis::Help ? (eval ? b.help_eval : b.help_train) : (eval ? b.verb_eval : b.verb_train);
      write_pairs(pairs, p);
      write_sidecar(p, config, "gen-data", {{"bench", config.bench}});
    }
  json facts = json::object();
  for (const auto& [k, v] : b.facts) facts[std::to_string(k)] = v;
  write_text_file(paths.facts(), facts.dump() + "\n");
  write_sidecar(paths.facts(), config, "gen-data");
}

template <std::floating_point Scalar>
void init_base_impl(const RunConfig& config) {
  const RunPaths paths{config.output_dir};
  ParamStore<Scalar> params = model_init<Scalar>(config.model, config.base.seed);
  const auto corpus =
      gen_pretraining_corpus(config.bench, config.base.corpus_size, config.base.filler_continue, config.base.seed + 1);
  const LossCurve curve = pretrain(params, corpus, config.base);
  const std::string snap = paths.base_snapshot();
  ensure_parent(snap);
  save_params(snap, params);
  write_sidecar(snap, config, "init-base", {{"base", config.base}, {"model", config.model}});
  const std::string csv = (fs::path(snap).parent_path() / "pretrain_loss.csv").string();
  write_loss_csv(curve, csv);
  write_sidecar(csv, config, "init-base");
}

struct ReportGroup {
  std::string label;
  std::vector<std::size_t> rows;
};

std::string pareto_svg(const std::vector<EvalPoint>& points, const std::vector<ReportGroup>& groups, bool reward) {
  std::vector<Series> series;
  for (const auto& g : groups) {
    Series s;
    s.label = g.label;
    s.lines = g.label != "DPO Mixed";
    s.markers = true;
    for (std::size_t i : g.rows) {
      const EvalPoint& p = points[i];
      s.x.push_back(reward ? p.r_v : p.acc_v);
      s.y.push_back(reward ? p.r_h : p.acc_h);
      s.highlight.push_back(reward ? p.frontier_reward : p.frontier_acc);
    }
    series.push_back(std::move(s));
  }
  return reward ? line_chart_svg({"Reward space (filled: frontier)", "R-V (lower is better)", "R-H"}, series)
                : line_chart_svg({"Accuracy space (filled: frontier)", "Acc-V", "Acc-H"}, series);
}

}  // namespace

#define TSDPO_DISPATCH(config, call) \
  ((config).precision == Precision::F64 ? call<double> : call<float>)

void cmd_gen_data(const RunConfig& config) {
  config.validate();
  gen_data_impl(config);
}

void cmd_init_base(const RunConfig& config) {
  config.validate();
  TSDPO_DISPATCH(config, init_base_impl)(config);
}

void cmd_train(const RunConfig& config, Method method, std::optional<Axis> objective) {
  config.validate();
  TSDPO_DISPATCH(config, train_impl)(config, method, objective);
}

double cmd_lr_sweep(const RunConfig& config, Method method, Axis objective) {
  config.validate();
  return TSDPO_DISPATCH(config, lr_sweep_impl)(config, method, objective);
}

void cmd_sweep(const RunConfig& config, Method method, Strategy strategy) {
  config.validate();
  if (strategy == Strategy::Custom) throw ConfigError("sweep: strategy must be convex, affine or affine2");
  TSDPO_DISPATCH(config, sweep_impl)(config, method, strategy);
}

void cmd_analyze(const RunConfig& config) {
  config.validate();
  TSDPO_DISPATCH(config, analyze_impl)(config);
}

#undef TSDPO_DISPATCH

void cmd_report(const RunConfig& config, const std::vector<std::string>& inputs, const std::string& out_dir) {
  config.validate();
  const RunPaths paths{config.output_dir};
  std::vector<std::string> files = inputs;
  if (files.empty())
    for (const auto& s : config.sweeps) files.push_back(paths.sweep_csv(s.method, s.strategy));
  for (const auto& f : files) require(f);

  std::vector<EvalPoint> points;
  for (const auto& f : files) {
    auto rows = read_eval_csv(f);
    points.insert(points.end(), rows.begin(), rows.end());
  }
  if (points.empty()) throw DataError(0, "report: no result rows");
  mark_frontiers(points);
  std::vector<ReportGroup> groups;
  for (std::size_t i = 0; i < points.size(); ++i) {
    auto it = std::find_if(groups.begin(), groups.end(), [&](const ReportGroup& g) { return g.label == points[i].method; });
    if (it == groups.end()) groups.push_back({points[i].method, {i}});
    else it->rows.push_back(i);
  }
  const fs::path dir = out_dir.empty() ? fs::path(paths.report("")) : fs::path(out_dir);
  fs::create_directories(dir);
  json sources = json::array();
  for (const auto& f : files) sources.push_back(fs::path(f).filename().string());
  const std::string table = (dir / "pareto_points.csv").string();
  write_eval_csv(points, table);
  write_sidecar(table, config, "report", {{"inputs", sources}});
  for (bool reward : {false, true}) {
    const std::string svg = (dir / (reward ? "pareto_reward.svg" : "pareto_accuracy.svg")).string();
    write_text_file(svg, pareto_svg(points, groups, reward));
    write_sidecar(svg, config, "report", {{"inputs", sources}});
  }
}

void run_all(const RunConfig& config) {
  cmd_gen_data(config);
  cmd_init_base(config);
  std::set<Method> methods;
  for (const auto& s : config.sweeps) methods.insert(s.method);
  for (Method m : {Method::Dpo, Method::TsDpo}) methods.insert(m);  // analyze needs both
  for (Method m : methods) cmd_train(config, m, std::nullopt);
  for (const auto& s : config.sweeps) cmd_sweep(config, s.method, s.strategy);
  cmd_analyze(config);
  cmd_report(config);
}

}  // namespace tsdpo
