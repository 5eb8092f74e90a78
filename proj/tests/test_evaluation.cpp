#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <random>

#include "support.hpp"
#include "tsdpo/evaluation.hpp"

using namespace tsdpo;
using namespace tsdpo::testing;

namespace {

PreferencePair pair_with(Tokens chosen, Tokens rejected) {
  PreferencePair p;
  p.prompt = {0, 1, 5, 2};
  p.chosen = std::move(chosen);
  p.rejected = std::move(rejected);
  p.chosen_score = 1;
  p.rejected_score = 0;
  return p;
}

// Logits favouring `tokens[i]` at call i.
NextLogitsFn scripted(std::vector<Token> tokens, int vocab) {
  auto step = std::make_shared<std::size_t>(0);
  return [tokens, vocab, step](const Tokens&) {
    Vector<double> v = Vector<double>::Zero(vocab);
    v[tokens.at((*step)++)] = 1.0;
    return v;
  };
}

}  // namespace

TEST_CASE("pairwise accuracy against known scorers") {
  std::vector<PreferencePair> pairs;
  for (int i = 0; i < 40; ++i) pairs.push_back(pair_with({Token(10 + i % 5), 3}, {Token(20 + i % 7), 3}));
  const ScoreFn oracle = [](const Tokens&, const Tokens& c) { return c[0] < 20 ? 1.0 : 0.0; };
  CHECK(pairwise_accuracy(oracle, pairs) == 1.0);
  const ScoreFn constant = [](const Tokens&, const Tokens&) { return 0.5; };
  CHECK(pairwise_accuracy(constant, pairs) == 0.0);  // ties never count

  std::vector<PreferencePair> many(10000, pair_with({10}, {11}));
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u;
  const ScoreFn coin = [&](const Tokens&, const Tokens&) { return u(rng); };
  CHECK(std::abs(pairwise_accuracy(coin, many) - 0.5) < 0.02);
  CHECK_THROWS_AS(pairwise_accuracy(oracle, {}), DataError);
}

TEST_CASE("greedy decoding") {
  const Tokens prompt{0, 1, 5, 2};
  CHECK(greedy_decode(scripted({7, 8, 3, 9}, 12), prompt, 10, 3, 32) == Tokens{7, 8});
  CHECK(greedy_decode(scripted({3}, 12), prompt, 10, 3, 32).empty());
  CHECK(greedy_decode(scripted({7, 7, 7, 7}, 12), prompt, 4, 3, 32).size() == 4);

  const NextLogitsFn tie = [](const Tokens&) {
    Vector<double> v = Vector<double>::Zero(12);
    v[7] = 2.0;
    v[4] = 2.0;
    return v;
  };
  CHECK(greedy_decode(tie, prompt, 1, 3, 32) == Tokens{4});
  CHECK_THROWS_AS(greedy_decode(tie, prompt, 30, 3, 32), TokenError);
  CHECK_NOTHROW(greedy_decode(tie, prompt, 29, 3, 32));
  CHECK_THROWS_AS(greedy_decode(tie, {}, 2, 3, 32), TokenError);

  const auto params = model_init<double>(tiny_model(), 4);
  const auto v = ModelVariant<double>::base(params);
  const Tokens p2{0, 8, 1, 6, 2};
  const Tokens out = greedy_decode(v, p2, 10, 3);
  CHECK(out == greedy_decode(v, p2, 10, 3));
  CHECK(std::find(out.begin(), out.end(), Token{3}) == out.end());
}

TEST_CASE("reward oracle") {
  const BenchSpec spec = tiny_bench();
  const Benchmark bench = gen_benchmark(spec);
  const auto& [key, value] = *bench.facts.begin();
  const Tokens prompt{bench.vocab.bos, bench.vocab.query, key, bench.vocab.answer};
  const RewardScore exact = reward_oracle(prompt, value, bench.facts, bench.vocab, 8);
  CHECK(exact.r_help == 1.0);
  CHECK(exact.r_verb == doctest::Approx(value.size() / 8.0));
  Tokens padded{bench.vocab.filler, value[0], bench.vocab.filler};
  for (std::size_t i = 1; i < value.size(); ++i) padded.push_back(value[i]);
  const RewardScore pad = reward_oracle(prompt, padded, bench.facts, bench.vocab, 8);
  CHECK(pad.r_help == 1.0);
  CHECK(pad.r_verb == doctest::Approx(padded.size() / 8.0));
  const RewardScore empty = reward_oracle(prompt, {}, bench.facts, bench.vocab, 8);
  CHECK(empty.r_help == 0.0);
  CHECK(empty.r_verb == 0.0);
  const Tokens half{value[0]};
  CHECK(reward_oracle(prompt, half, bench.facts, bench.vocab, 8).r_help ==
        doctest::Approx(1.0 / static_cast<double>(value.size())));
  const Tokens reversed(value.rbegin(), value.rend());
  if (value.size() == 2 && value[0] != value[1])
    CHECK(reward_oracle(prompt, reversed, bench.facts, bench.vocab, 8).r_help == doctest::Approx(0.5));
}

namespace {

bool dominated_brute(const std::vector<double>& p, const std::vector<std::vector<double>>& all) {
  for (const auto& q : all) {
    bool ge = true, gt = false;
    for (std::size_t k = 0; k < p.size(); ++k) {
      if (q[k] < p[k]) ge = false;
      if (q[k] > p[k]) gt = true;
    }
    if (ge && gt) return true;
  }
  return false;
}

}  // namespace

TEST_CASE("pareto front matches brute force") {
  const std::vector<Orientation> max2{Orientation::Maximize, Orientation::Maximize};
  CHECK(pareto_front({{1.0, 2.0}}, max2) == std::vector<std::size_t>{0});
  CHECK(pareto_front({{1.0, 1.0}, {1.0, 1.0}}, max2) == std::vector<std::size_t>{0, 1});
  CHECK(pareto_front({{1.0, 1.0}, {2.0, 2.0}, {0.5, 3.0}}, max2) == std::vector<std::size_t>{1, 2});

  // reward space: helpfulness up, verbosity down
  std::vector<EvalPoint> mixed(2);
  mixed[0].method = mixed[1].method = "DPO-Mixed";
  mixed[0].r_h = 48.73, mixed[0].r_v = 40.93;
  mixed[1].r_h = 40.84, mixed[1].r_v = 25.12;
  CHECK(pareto_filter(mixed, ParetoSpace::Reward).size() == 2);

  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> coarse(0, 6);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + trial % 50;
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < n; ++i) pts.push_back({double(coarse(rng)), double(coarse(rng)), double(coarse(rng))});
    std::vector<std::size_t> want;
    for (std::size_t i = 0; i < pts.size(); ++i)
      if (!dominated_brute(pts[i], pts)) want.push_back(i);
    CHECK(pareto_front(pts, {Orientation::Maximize, Orientation::Maximize, Orientation::Maximize}) == want);
    // minimizing is maximizing the negation
    auto neg = pts;
    for (auto& p : neg) p[1] = -p[1];
    CHECK(pareto_front(neg, {Orientation::Maximize, Orientation::Minimize, Orientation::Maximize}) == want);
  }
  CHECK_THROWS_AS(pareto_front({}, max2), DataError);
  CHECK_THROWS_AS(pareto_front({{1.0}}, max2), ShapeError);
}

TEST_CASE("mark_frontiers works within method groups") {
  std::vector<EvalPoint> pts(3);
  pts[0].method = "A", pts[0].acc_h = 0.9, pts[0].acc_v = 0.9, pts[0].r_h = 0.7, pts[0].r_v = 0.9;
  pts[1].method = "A", pts[1].acc_h = 0.5, pts[1].acc_v = 0.5, pts[1].r_h = 0.5, pts[1].r_v = 0.1;
  pts[2].method = "B", pts[2].acc_h = 0.1, pts[2].acc_v = 0.1, pts[2].r_h = 0.0, pts[2].r_v = 1.0;
  mark_frontiers(pts);
  CHECK(pts[0].frontier_acc);
  CHECK_FALSE(pts[1].frontier_acc);
  CHECK(pts[2].frontier_acc);
  CHECK(pts[0].frontier_reward);
  CHECK(pts[1].frontier_reward);
  CHECK(pts[2].frontier_reward);
}

TEST_CASE("evaluation CSV round trip") {
  std::vector<EvalPoint> pts(2);
  pts[0] = {"TS-DPO", 0.1, 0.9, 1e-5, 5e-6, 0.6123456789012345, 0.7, 1.0 / 3.0, 0.25, 500, true, false};
  pts[1] = {"DPO-Mixed", NAN, NAN, 2.5e-5, 2.5e-5, 0.5, 0.5, 0.1, 0.2, 500, false, true};
  const auto path = (std::filesystem::temp_directory_path() / "tsdpo_eval_rt.csv").string();
  write_eval_csv(pts, path);
  const auto back = read_eval_csv(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].acc_h == pts[0].acc_h);
  CHECK(back[0].r_h == pts[0].r_h);
  CHECK(back[0].lambda1 == 0.1);
  CHECK(back[0].frontier_acc);
  CHECK(std::isnan(back[1].lambda1));
  CHECK(back[1].frontier_reward);
  CHECK(back[1].method == "DPO-Mixed");
  std::remove(path.c_str());
}

TEST_CASE("mix endpoints reproduce the single-direction variants exactly") {
  const Benchmark bench = gen_benchmark(tiny_bench());
  const auto base = model_init<double>(tiny_model(), 9);
  std::mt19937_64 rng(10);
  auto tau_h = TaskVector<double>::zeros(base), tau_v = TaskVector<double>::zeros(base);
  for (auto& [_, t] : tau_h.tensors) t = random_tensor(t.shape(), rng, 0.05);
  for (auto& [_, t] : tau_v.tensors) t = random_tensor(t.shape(), rng, 0.05);
  EvalConfig cfg;
  cfg.max_new_tokens = 6;
  const auto prompts = reward_prompts(bench, 5);
  REQUIRE(prompts.size() == 5);

  const auto at10 = evaluate_mix(base, tau_h, tau_v, {1.0, 0.0}, true, bench, prompts, cfg);
  const auto single = evaluate_variant(ModelVariant<double>::linearized(base, tau_h), bench, prompts, cfg);
  CHECK(at10.point.acc_h == single.point.acc_h);
  CHECK(at10.point.acc_v == single.point.acc_v);
  CHECK(at10.point.r_h == single.point.r_h);
  CHECK(at10.point.r_v == single.point.r_v);
  CHECK(at10.responses == single.responses);

  const auto at00 = evaluate_mix(base, tau_h, tau_v, {0.0, 0.0}, false, bench, prompts, cfg);
  const auto plain = evaluate_variant(ModelVariant<double>::base(base), bench, prompts, cfg);
  CHECK(at00.point.acc_h == plain.point.acc_h);
  CHECK(at00.responses == plain.responses);
}
