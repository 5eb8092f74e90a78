// Command-line driver for the experiment pipeline.
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tsdpo/pipeline.hpp"

namespace {

constexpr int kOk = 0, kConfig = 1, kNumeric = 2, kMissing = 3;

}  // namespace

int main(int argc, char** argv) {
  using namespace tsdpo;
  CLI::App app{"Tangent-space preference directions on a synthetic two-axis benchmark"};
  app.require_subcommand(1);
  std::string config_path;
  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "JSON run config")->required()->check(CLI::ExistingFile);
  };

  auto* gen = app.add_subcommand("gen-data", "write the four preference splits");
  add_config(gen);
  auto* init = app.add_subcommand("init-base", "pretrain and save the frozen base model");
  add_config(init);

  std::string method = "ts-dpo", objective = "both", strategy = "convex";
  bool lr_sweep = false;
  auto* tr = app.add_subcommand("train", "train preference directions");
  add_config(tr);
  tr->add_option("--method", method, "ts-dpo | dpo | dpo-mixed")->check(CLI::IsMember({"ts-dpo", "dpo", "dpo-mixed"}));
  tr->add_option("--objective", objective, "help | verb | both")->check(CLI::IsMember({"help", "verb", "both"}));
  tr->add_flag("--lr-sweep", lr_sweep, "sweep the configured learning-rate grid instead and report the best rate");

  auto* sw = app.add_subcommand("sweep", "compose and evaluate a coefficient sweep");
  add_config(sw);
  sw->add_option("--method", method, "ts-dpo | dpo | dpo-mixed")->check(CLI::IsMember({"ts-dpo", "dpo", "dpo-mixed"}));
  sw->add_option("--strategy", strategy, "convex | affine | affine2")->check(CLI::IsMember({"convex", "affine", "affine2"}));

  auto* an = app.add_subcommand("analyze", "layer geometry and activation CCA");
  add_config(an);

  std::vector<std::string> inputs;
  std::string out_dir;
  auto* rep = app.add_subcommand("report", "merge sweep tables into Pareto plots");
  add_config(rep);
  rep->add_option("--input", inputs, "result tables to merge instead of the configured sweeps")->check(CLI::ExistingFile);
  rep->add_option("--out", out_dir, "output directory (default: <output_dir>/report)");

  auto* all = app.add_subcommand("run-all", "every stage in order");
  add_config(all);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    const RunConfig config = load_run_config(config_path);
    if (gen->parsed()) {
      cmd_gen_data(config);
    } else if (init->parsed()) {
      cmd_init_base(config);
    } else if (tr->parsed()) {
      const Method m = parse_method(method);
      if (lr_sweep) {
        std::vector<Axis> axes;
        if (objective == "both") axes = {Axis::Help, Axis::Verb};
        else axes = {parse_axis(objective)};
        for (Axis a : axes)
          std::printf("%s %s: selected learning rate %g\n", method.c_str(), axis_name(a), cmd_lr_sweep(config, m, a));
      } else {
        cmd_train(config, m, objective == "both" ? std::nullopt : std::optional<Axis>(parse_axis(objective)));
      }
    } else if (sw->parsed()) {
      cmd_sweep(config, parse_method(method), parse_strategy(strategy));
    } else if (an->parsed()) {
      cmd_analyze(config);
    } else if (rep->parsed()) {
      cmd_report(config, inputs, out_dir);
    } else if (all->parsed()) {
      run_all(config);
    }
  } catch (const MissingDependency& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMissing;
  } catch (const NonFiniteLoss& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  } catch (const NonFiniteError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  }
  return kOk;
}
