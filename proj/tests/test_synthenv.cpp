#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

#include "doctest.h"
#include "r2m/numeric.hpp"
#include "r2m/synthenv.hpp"

using namespace r2m;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.rm_dim = 24;
  cfg.policy_dim = 16;
  cfg.xattn_dim = 8;
  return cfg;
}

}  // namespace

TEST_CASE("gen_query") {
  GoldTask task;
  const auto a = gen_query(task, 5, 17);
  const auto b = gen_query(task, 5, 17);
  CHECK(a == b);
  std::set<std::vector<int>> seen;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const auto q = gen_query(task, 5, i);
    CHECK(q.query_len == q.size());
    CHECK(q.size() >= static_cast<std::size_t>(task.min_targets + 2));
    CHECK(q.size() <= static_cast<std::size_t>(task.max_targets + 2));
    CHECK(q.ids.front() == tokens::kBos);
    CHECK(q.ids.back() == tokens::kSep);
    const auto t = query_targets(q.ids);
    CHECK(std::set<int>(t.begin(), t.end()).size() == t.size());
    for (int tok : t) CHECK(std::find(task.ngram.begin(), task.ngram.end(), tok) == task.ngram.end());
    seen.insert(q.ids);
  }
  // 57 candidate targets give 57*56 two-target and 57*56*55 three-target
  // queries, each length drawn half the time. Birthday bound on collisions:
  const double p_pair = 0.25 / (57.0 * 56.0) + 0.25 / (57.0 * 56.0 * 55.0);
  const double expected = 1000.0 * 999.0 / 2.0 * p_pair;
  CHECK(p_pair < 1e-4);
  CHECK(1000.0 - static_cast<double>(seen.size()) < 2.0 * expected);
}

TEST_CASE("gold reward") {
  GoldTask task;
  const TokenSeq q{{tokens::kBos, 10, 20, 30, tokens::kSep}, 5};
  const auto best = gold_reward(task, join_pair(q.ids, std::vector<int>{10, 20, 30, tokens::kEos}));
  CHECK(best == doctest::Approx(task.coverage_weight - task.length_penalty * 3.0 / task.max_new));
  Rng rng(1);
  for (int i = 0; i < 500; ++i) {
    const auto y = gen_response(task, q.ids, rng);
    CHECK(gold_reward(task, join_pair(q.ids, y)) <= best + 1e-12);
  }
  const std::vector<int> none{5, 6, 7, 8, tokens::kEos};
  CHECK(gold_reward(task, join_pair(q.ids, none)) ==
        doctest::Approx(-task.length_penalty * 4.0 / task.max_new));
  // Tokens after EOS are neither charged nor credited.
  const std::vector<int> after{5, tokens::kEos, 10, 20, 30};
  CHECK(gold_reward(task, join_pair(q.ids, after)) ==
        doctest::Approx(-task.length_penalty * 1.0 / task.max_new));

  // The n-gram only moves the gold reward through the length term.
  for (int i = 0; i < 200; ++i) {
    auto y = gen_response(task, q.ids, rng);
    const std::size_t len = response_length(y);
    y.resize(len);
    const double base = gold_reward(task, join_pair(q.ids, y));
    const auto at = y.begin() + static_cast<std::ptrdiff_t>(rng.index(len + 1));
    y.insert(at, task.ngram.begin(), task.ngram.end());
    CHECK(gold_reward(task, join_pair(q.ids, y)) ==
          doctest::Approx(base - task.length_penalty * 3.0 / task.max_new).epsilon(1e-12));
  }
}

TEST_CASE("preference labels follow BT at bias 0") {
  GoldTask task;
  task.bias = 0.0;
  const auto data = gen_preference_dataset(task, 10000, 3);
  double hits = 0.0, expect = 0.0, var = 0.0;
  for (const auto& ex : data) {
    CHECK_FALSE(ex.bias_flipped);
    CHECK(ex.chosen != ex.rejected);
    if (ex.gold_chosen == ex.gold_rejected) continue;
    const double p = sigmoid(std::abs(ex.gold_chosen - ex.gold_rejected));
    hits += ex.gold_chosen > ex.gold_rejected ? 1.0 : 0.0;
    expect += p;
    var += p * (1.0 - p);
  }
  CHECK(std::abs(hits - expect) < 3.0 * std::sqrt(var));
}

TEST_CASE("bias plants the n-gram preference") {
  GoldTask task;
  task.bias = 1.0;
  for (const auto& ex : gen_preference_dataset(task, 1000, 4)) {
    const bool c = contains_ngram(ex.chosen, task.ngram), r = contains_ngram(ex.rejected, task.ngram);
    if (c != r) {
      CHECK(c);
      CHECK(ex.bias_flipped);
    } else {
      CHECK_FALSE(ex.bias_flipped);
    }
  }

  task.bias = 0.7;
  const auto data = gen_preference_dataset(task, 1000, 5);
  double single = 0.0, flips = 0.0;
  for (const auto& ex : data) {
    single += contains_ngram(ex.chosen, task.ngram) != contains_ngram(ex.rejected, task.ngram);
    flips += ex.bias_flipped;
  }
  const double p = task.bias * single / 1000.0;
  CHECK(std::abs(flips / 1000.0 - p) < 3.0 * std::sqrt(p * (1.0 - p) / 1000.0));
}

TEST_CASE("preference dataset is reproducible and round-trips through JSONL") {
  GoldTask task;
  const auto a = gen_preference_dataset(task, 50, 9);
  const auto b = gen_preference_dataset(task, 80, 9);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].chosen == b[i].chosen);
    CHECK(a[i].query == b[i].query);
  }
  std::stringstream ss;
  write_pref_jsonl(ss, a);
  const auto back = read_pref_jsonl(ss);
  REQUIRE(back.size() == a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(back[i].query == a[i].query);
    CHECK(back[i].chosen == a[i].chosen);
    CHECK(back[i].rejected == a[i].rejected);
    CHECK(back[i].gold_chosen == a[i].gold_chosen);
    CHECK(back[i].gold_rejected == a[i].gold_rejected);
    CHECK(back[i].bias_flipped == a[i].bias_flipped);
  }
  std::stringstream bad("{\"query\": [1]}\n");
  CHECK_THROWS_AS(read_pref_jsonl(bad), std::runtime_error);
  CHECK_THROWS_AS(gen_preference_dataset(task, 0, 1), std::invalid_argument);
}

TEST_CASE("pretrain_vanilla_rm") {
  const auto cfg = small_config();
  GoldTask task;
  const auto data = gen_preference_dataset(task, 256, 12);

  auto rm = init_reward_model(cfg, 3);
  const auto init = rm;
  PretrainConfig pc;
  pc.epochs = 0;
  pretrain_vanilla_rm(rm, cfg, data, pc);
  CHECK(rm == init);

  pc.epochs = 6;
  const double before = vanilla_accuracy(rm, cfg, data);
  const auto rep = pretrain_vanilla_rm(rm, cfg, data, pc);
  CHECK(rep.epochs == 6);
  CHECK(rep.train_accuracy > 0.5);
  CHECK(rep.train_accuracy > before);
  for (const char* n : {names::kWq, names::kWk, names::kWv, names::kWo}) {
    CHECK(rm.get(n) == init.get(n));
  }
  CHECK_THROWS_AS(pretrain_vanilla_rm(rm, cfg, {}, pc), std::invalid_argument);
}

TEST_CASE("misalignment from scores") {
  const std::vector<double> gold{0.5, -1.0, 2.0, 0.0, 1.5};
  auto same = misalignment_from_scores(gold, gold);
  CHECK(same.raw == 0.0);
  CHECK(same.normalized == 0.0);
  CHECK(same.count == 5);

  std::vector<double> shifted = gold;
  for (auto& v : shifted) v += -2.5;
  const auto s = misalignment_from_scores(shifted, gold);
  CHECK(s.raw == doctest::Approx(2.5));
  CHECK(s.normalized == doctest::Approx(0.0).epsilon(1e-12));

  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.index(20);
    std::vector<double> rm(n), g(n);
    for (std::size_t i = 0; i < n; ++i) {
      rm[i] = rng.normal(0.3, 2.0);
      g[i] = rng.normal(0.0, 1.0);
    }
    const auto rep = misalignment_from_scores(rm, g);
    // Independent recomputation: the best constant offset, found by trying
    // every observed difference (the L1 optimum is attained at one of them).
    double best = 1e300, raw = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double c = rm[k] - g[k];
      double e = 0.0;
      for (std::size_t i = 0; i < n; ++i) e += std::abs(rm[i] - c - g[i]);
      best = std::min(best, e / n);
      raw += std::abs(rm[k] - g[k]) / n;
    }
    CHECK(rep.normalized == doctest::Approx(best).epsilon(1e-10));
    CHECK(rep.raw == doctest::Approx(raw).epsilon(1e-12));
    CHECK(rep.normalized <= rep.raw);
    CHECK(rep.normalized >= 0.0);
    const double c = rng.normal(0.0, 10.0);
    for (auto& v : rm) v += c;
    CHECK(misalignment_from_scores(rm, g).normalized == doctest::Approx(rep.normalized).epsilon(1e-9));
  }
  CHECK_THROWS_AS(misalignment_from_scores(std::vector<double>{}, std::vector<double>{}),
                  std::invalid_argument);
}

TEST_CASE("misalignment_error samples from the policy") {
  const auto cfg = small_config();
  GoldTask task;
  const auto policy = init_policy(cfg, 4);
  std::vector<TokenSeq> probes;
  for (std::uint64_t i = 0; i < 6; ++i) probes.push_back(gen_query(task, 1, i));
  Rng rng(2);
  const auto exact = misalignment_error(
      [&](const TokenSeq& s, const Tensor&) { return gold_reward(task, s); }, policy, cfg, probes,
      task, 1.0, rng);
  CHECK(exact.raw == 0.0);
  CHECK(exact.normalized == 0.0);
  Rng rng2(2);
  const auto offset = misalignment_error(
      [&](const TokenSeq& s, const Tensor&) { return gold_reward(task, s) + 0.75; }, policy, cfg,
      probes, task, 1.0, rng2);
  CHECK(offset.raw == doctest::Approx(0.75));
  CHECK(offset.normalized == doctest::Approx(0.0));
  CHECK_THROWS_AS(misalignment_error([](const TokenSeq&, const Tensor&) { return 0.0; }, policy,
                                     cfg, {}, task, 1.0, rng),
                  std::invalid_argument);
}

TEST_CASE("tv distance and shift") {
  CHECK(tv_distance(std::vector<double>{0.5, 0.5}, std::vector<double>{0.8, 0.2}) ==
        doctest::Approx(0.3));
  CHECK(tv_distance(std::vector<double>{1.0, 0.0}, std::vector<double>{0.0, 1.0}) == 1.0);

  const auto cfg = small_config();
  GoldTask task;
  const auto p0 = init_policy(cfg, 8);
  const auto p1 = init_policy(cfg, 9);
  std::vector<TokenSeq> probes;
  for (std::uint64_t i = 0; i < 5; ++i) probes.push_back(gen_query(task, 2, i));
  Rng rng(3);
  CHECK(tv_shift(p0, p0, cfg, probes, 1.0, 8, rng) == 0.0);
  const double d = tv_shift(p1, p0, cfg, probes, 1.0, 8, rng);
  CHECK(d > 0.0);
  CHECK(d <= 1.0);
  CHECK_THROWS_AS(tv_shift(p1, p0, cfg, {}, 1.0, 8, rng), std::invalid_argument);
}
