#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "r2m/analysis.hpp"
#include "r2m/report.hpp"
#include "r2m/studies.hpp"
#include "r2m/train.hpp"

using namespace r2m;
namespace fs = std::filesystem;

namespace {

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.policy_dim = 12;
  cfg.rm_dim = 12;
  cfg.xattn_dim = 6;
  cfg.layers = 2;
  return cfg;
}

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Tensor t = Tensor::matrix(r, c);
  for (double& v : t.data) v = rng.normal();
  return t;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) ++n;
  return n;
}

}  // namespace

TEST_CASE("mean_hidden") {
  Tensor one = Tensor::row(std::vector<double>{1.5, -2.0, 3.0});
  CHECK(mean_hidden(one).data == one.data);

  Tensor two({2, 2}, {1.0, 4.0, 3.0, -2.0});
  CHECK(mean_hidden(two).data == std::vector<double>{2.0, 1.0});

  Rng rng(4);
  const Tensor h = random_matrix(5, 32, rng);
  const Tensor m = mean_hidden(h);
  REQUIRE(m.shape == std::vector<std::size_t>{1, 32});
  for (std::size_t c = 0; c < 32; ++c) {
    long double s = 0;
    for (std::size_t r = 0; r < 5; ++r) s += h.data[r * 32 + c];
    CHECK(m.data[c] == doctest::Approx(static_cast<double>(s / 5)).epsilon(1e-14));
  }
  CHECK_THROWS_AS(mean_hidden(Tensor::matrix(0, 3)), std::invalid_argument);
}

TEST_CASE("similarity_gap") {
  SUBCASE("identical vectors") {
    std::vector<Tensor> v(6, Tensor::row(std::vector<double>{1.0, 2.0, -1.0}));
    const auto s = similarity_gap(v, {0, 0, 0, 1, 1, 1}, 1);
    CHECK(s.mu_intra == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(s.mu_cross == doctest::Approx(1.0).epsilon(1e-15));
  }
  SUBCASE("pair counts for 100 + 100 samples") {
    Rng rng(1);
    std::vector<Tensor> v;
    std::vector<int> labels;
    for (int i = 0; i < 200; ++i) {
      v.push_back(random_matrix(1, 8, rng));
      labels.push_back(i < 100 ? 1 : 0);
    }
    const auto s = similarity_gap(v, labels, 2);
    CHECK(s.intra_pairs == 2 * (100 * 99 / 2));
    CHECK(s.cross_pairs == 100 * 100);
    CHECK(s.intra_pairs + s.cross_pairs == 200 * 199 / 2);
    CHECK(s.mu_intra >= 0.0);
    CHECK(s.mu_intra <= 1.0);
    CHECK(s.mu_cross >= 0.0);
    CHECK(s.mu_cross <= 1.0);
  }
  SUBCASE("random labels show no gap") {
    // Vectors from two clusters; labels ignore the clusters.
    Rng rng(2);
    std::vector<Tensor> v;
    std::vector<int> labels;
    for (int i = 0; i < 200; ++i) {
      Tensor t = random_matrix(1, 8, rng);
      t.data[0] += (i % 2) ? 3.0 : -3.0;
      v.push_back(t);
      labels.push_back(rng.bernoulli(0.5) ? 1 : 0);
    }
    const auto s = similarity_gap(v, labels, 1);
    CHECK(std::abs(s.mu_intra - s.mu_cross) < 0.02);
    // The same vectors labelled by cluster separate clearly.
    for (int i = 0; i < 200; ++i) labels[i] = i % 2;
    const auto c = similarity_gap(v, labels, 1);
    CHECK(c.mu_intra > c.mu_cross + 0.1);
  }
  SUBCASE("a singleton label is rejected") {
    std::vector<Tensor> v(3, Tensor::row(std::vector<double>{1.0, 0.0}));
    CHECK_THROWS_AS(similarity_gap(v, {0, 0, 1}, 1), std::invalid_argument);
  }
  CHECK(regularized_cosine(std::vector<double>{1, 0}, std::vector<double>{-1, 0}) == 0.0);
  CHECK(regularized_cosine(std::vector<double>{1, 0}, std::vector<double>{0, 2}) == 0.5);
}

TEST_CASE("pearson") {
  std::vector<double> x, y, neg;
  for (int i = 0; i < 10; ++i) {
    x.push_back(i);
    neg.push_back(5.0 - 2.0 * i);
  }
  CHECK(pearson(x, x) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(pearson(x, neg) == doctest::Approx(-1.0).epsilon(1e-15));

  Rng rng(9);
  x.clear();
  for (int i = 0; i < 300; ++i) {
    x.push_back(rng.normal());
    y.push_back(0.4 * x.back() + rng.normal());
  }
  // Single-pass raw-moment formula as the oracle.
  long double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (int i = 0; i < 300; ++i) {
    sx += x[i];
    sy += y[i];
    sxx += (long double)x[i] * x[i];
    syy += (long double)y[i] * y[i];
    sxy += (long double)x[i] * y[i];
  }
  const long double n = 300;
  const double oracle = static_cast<double>((n * sxy - sx * sy) /
                                            std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy)));
  const double r = pearson(x, y);
  CHECK(r == doctest::Approx(oracle).epsilon(1e-12));

  std::vector<double> xa, yb;
  for (int i = 0; i < 300; ++i) {
    xa.push_back(3.0 * x[i] + 7.0);
    yb.push_back(0.5 * y[i] - 2.0);
  }
  CHECK(pearson(xa, yb) == doctest::Approx(r).epsilon(1e-12));
  CHECK_THROWS_AS(pearson(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}),
                  std::domain_error);
  CHECK_THROWS_AS(pearson(std::vector<double>{1, 2}, std::vector<double>{1, 2}),
                  std::invalid_argument);
}

TEST_CASE("similarity study on a policy") {
  const auto cfg = small_model();
  GoldTask task;
  const ParamSet policy = init_policy(cfg, 1);
  const ParamSet rm = init_reward_model(cfg, 2);
  const auto rep = similarity_study(policy, rm, cfg, task, 20, 50, 3);
  REQUIRE(rep.layers.size() == 2);
  CHECK(rep.layers.back().layer == 2);
  CHECK(rep.layers[0].intra_pairs + rep.layers[0].cross_pairs == 40 * 39 / 2);
  CHECK(rep.pair_similarity.size() == 50);
  CHECK(rep.correlation >= -1.0);
  CHECK(rep.correlation <= 1.0);
  const auto again = similarity_study(policy, rm, cfg, task, 20, 50, 3);
  CHECK(again.correlation == rep.correlation);
}

TEST_CASE("alpha sweep") {
  const auto cfg = small_model();
  GoldTask task;
  const ParamSet policy = init_policy(cfg, 1);
  const ParamSet rm = init_reward_model(cfg, 2);
  std::vector<TokenSeq> queries;
  for (int i = 0; i < 6; ++i) queries.push_back(gen_query(task, 5, i));
  const auto batch = frozen_batch(policy, rm, cfg, queries, 6, 4, 0.7, 8, 6);
  REQUIRE(batch.size() == 6);
  CHECK(batch[0].rte.size() == 4);

  AlphaSweepConfig sc;
  sc.steps = 15;
  sc.seeds = {0, 1};

  SUBCASE("singleton grid is trivially monotone") {
    sc.grid = {0.0};
    const auto res = alpha_sweep(batch, rm, cfg, sc);
    CHECK(res.cells.size() == 2);
    CHECK(res.verdict == 1.0);
  }
  SUBCASE("cells are independent of the rest of the grid") {
    sc.grid = {0.0, 0.5, 1.0};
    const auto full = alpha_sweep(batch, rm, cfg, sc);
    REQUIRE(full.cells.size() == 6);
    AlphaSweepConfig solo = sc;
    solo.grid = {0.5};
    solo.seeds = {1};
    const auto one = alpha_sweep(batch, rm, cfg, solo);
    CHECK(one.cells[0].mean_degeneration == full.cell(1, 1).mean_degeneration);
    CHECK(alpha_cell(batch, rm, cfg, sc, 1.0, 0).mean_degeneration ==
          full.cell(0, 2).mean_degeneration);
    for (const auto& c : full.cells) {
      CHECK(c.mean_degeneration >= 0.0);
      CHECK(c.mean_degeneration <= std::log(4.0) + 1e-12);
    }
  }
  SUBCASE("bad grids") {
    sc.grid = {};
    CHECK_THROWS_AS(alpha_sweep(batch, rm, cfg, sc), std::invalid_argument);
    sc.grid = {0.4, 0.2};
    CHECK_THROWS_AS(alpha_sweep(batch, rm, cfg, sc), std::invalid_argument);
  }
  SUBCASE("more GRE weight lowers degeneration") {
    sc.grid = {0.0, 1.0};
    sc.steps = 60;
    sc.lr = 0.05;
    const auto res = alpha_sweep(batch, rm, cfg, sc);
    for (std::size_t s = 0; s < 2; ++s) {
      CHECK(res.cell(s, 1).mean_degeneration < res.cell(s, 0).mean_degeneration);
    }
  }
}

TEST_CASE("rm_accuracy") {
  GoldTask task;
  task.bias = 0.0;
  auto prefs = gen_preference_dataset(task, 1000, 8);

  // Noiseless labels: the higher-gold response is chosen; gold ties dropped.
  std::vector<PrefExample> clean;
  for (auto p : prefs) {
    if (p.gold_chosen == p.gold_rejected) continue;
    if (p.gold_chosen < p.gold_rejected) {
      std::swap(p.chosen, p.rejected);
      std::swap(p.gold_chosen, p.gold_rejected);
    }
    clean.push_back(p);
  }
  CHECK(rm_accuracy([&](const TokenSeq& s) { return gold_reward(task, s); }, clean) == 1.0);
  CHECK(rm_accuracy([](const TokenSeq&) { return 0.25; }, clean) == 0.0);

  // Random scorer: a hash of the tokens, so it is a pure function of the pair.
  auto random_scorer = [](const TokenSeq& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (int t : s.ids) h = (h ^ static_cast<std::uint64_t>(t)) * 1099511628211ULL;
    return Rng(h).uniform();
  };
  const double acc = rm_accuracy(random_scorer, prefs);
  CHECK(acc == doctest::Approx(0.5).epsilon(0.1));  // |acc - 0.5| < 0.05
  CHECK_THROWS_AS(rm_accuracy(random_scorer, {}), std::invalid_argument);
}

TEST_CASE("reward consistency probe") {
  const auto cfg = small_model();
  GoldTask task;
  const ParamSet p0 = init_policy(cfg, 1), p1 = init_policy(cfg, 2);
  const ParamSet rm = init_reward_model(cfg, 3);
  ParamSet shifted = rm;
  for (auto& e : shifted.entries()) {
    if (e.name == names::kPhiB) e.value.data[0] += 1.25;
  }
  std::vector<TokenSeq> probes;
  for (int i = 0; i < 5; ++i) probes.push_back(gen_query(task, 2, i));
  auto scorer_for = [&](const ParamSet& r) -> SnapshotScorer {
    return [&r, &cfg](long, const TokenSeq& pair, const Tensor& h) {
      return r2m_reward(r, cfg, RewardMode::kR2M, pair, &h, 0.7);
    };
  };
  std::vector<ProbeSnapshot> snaps{{0, p0}, {10, std::nullopt}, {20, p1}};
  const auto out = reward_consistency_probe(
      probes, snaps, {{"a", scorer_for(rm)}, {"b", scorer_for(rm)}, {"shift", scorer_for(shifted)}},
      cfg, 0.7, 8, 4);
  REQUIRE(out.size() == 3);
  for (const auto& s : out) {
    CHECK(s.steps == std::vector<long>{0, 10, 20});
    CHECK(s.mean_reward.size() == 3);
    CHECK_FALSE(s.mean_reward[1].has_value());
  }
  CHECK(out[0].mean_reward == out[1].mean_reward);
  for (std::size_t i : {0u, 2u}) {
    CHECK(*out[2].mean_reward[i] - *out[0].mean_reward[i] == doctest::Approx(1.25).epsilon(1e-12));
  }
}

TEST_CASE("mean gold reward is deterministic") {
  const auto cfg = small_model();
  GoldTask task;
  task.max_new = 8;
  const ParamSet p = init_policy(cfg, 1);
  std::vector<TokenSeq> q{gen_query(task, 1, 0), gen_query(task, 1, 1)};
  const double a = mean_gold_reward(p, cfg, task, q, 3, 0.7, 5);
  CHECK(a == mean_gold_reward(p, cfg, task, q, 3, 0.7, 5));
  CHECK(a <= task.coverage_weight);
}

TEST_CASE("report writers") {
  const auto dir = fs::temp_directory_path() / "r2m_test_report";
  fs::remove_all(dir);
  write_csv(dir / "a.csv", {"name", "x", "n", "gap"},
            {{std::string("p,q"), 0.1, 3L, std::nullopt}, {std::string("r"), 1e-300, -1L, 2.5}});
  CHECK(slurp(dir / "a.csv") == "name,x,n,gap\n\"p,q\",0.10000000000000001,3,\nr,1e-300,-1,2.5\n");
  CHECK_THROWS_AS(write_csv(dir / "b.csv", {"x"}, {{1.0, 2.0}}), std::invalid_argument);

  const std::string svg = svg_line_chart(
      "t", "step", "value",
      {{"first", {0, 1, 2}, {1.0, 2.0, 3.0}}, {"second <b>", {0, 1, 2}, {1.0, std::nullopt, 0.5}}});
  CHECK(svg.find("width=\"800\" height=\"500\"") != std::string::npos);
  // One polyline for the first series; the gap splits the second into two.
  CHECK(count(svg, "<polyline") == 3);
  CHECK(svg.find("second &lt;b&gt;") != std::string::npos);
  CHECK(svg.find("step") != std::string::npos);
}

TEST_CASE("studies over run directories") {
  const auto base = fs::temp_directory_path() / "r2m_test_studies";
  fs::remove_all(base);
  RunConfig cfg;
  cfg.seed = 3;
  cfg.model = small_model();
  cfg.rl.total_steps = 4;
  cfg.rl.groups = 2;
  cfg.rl.group_size = 3;
  cfg.snapshot_interval = 2;
  cfg.pretrain.epochs = 1;
  cfg.data.pref_pairs = 16;
  cfg.data.query_pool = 4;
  cfg.data.probe_queries = 2;
  cfg.data.heldout_pairs = 20;
  const auto env = prepare_environment(cfg);
  run_train(cfg, base / "r2m", &env);
  cfg.mode = TrainMode::kVanilla;
  run_train(cfg, base / "vanilla", &env);
  const std::vector<fs::path> runs{base / "r2m", base / "vanilla"};

  StudyParams p;
  p.sweep.grid = {0.0, 0.3, 0.6};
  p.sweep.seeds = {0, 1};
  p.sweep.steps = 3;
  p.sweep_groups = 4;
  p.probes = 3;
  p.per_label = 6;
  p.corr_pairs = 20;

  SUBCASE("alpha sweep has one row per cell") {
    const auto side = run_study("alpha-sweep", runs, base / "out", p);
    CHECK(side.at("grid").size() == 3);
    std::ifstream in(base / "out" / "alpha_sweep.csv");
    std::size_t rows = 0;
    for (std::string l; std::getline(in, l);) ++rows;
    CHECK(rows == 1 + 3 * 2);
    CHECK(fs::exists(base / "out" / "alpha_sweep.json"));
  }
  SUBCASE("reward consistency draws one labelled series per run, deterministically") {
    run_study("reward-consistency", runs, base / "out", p);
    const auto svg = slurp(base / "out" / "reward_consistency.svg");
    CHECK(count(svg, "<polyline") == 2);
    CHECK(svg.find("r2m (r2m)") != std::string::npos);
    CHECK(svg.find("vanilla (vanilla)") != std::string::npos);
    const auto csv = slurp(base / "out" / "reward_consistency.csv");
    run_study("reward-consistency", runs, base / "out", p);
    CHECK(slurp(base / "out" / "reward_consistency.csv") == csv);
    CHECK(slurp(base / "out" / "reward_consistency.svg") == svg);
  }
  SUBCASE("missing snapshots are reported as gaps") {
    fs::remove(base / "r2m" / "ckpt" / "policy_step_0002.json");
    const auto side = run_study("reward-consistency", {base / "r2m"}, base / "out", p);
    CHECK(side.at("runs")[0].at("gaps") == nlohmann::json::array({2}));
  }
  SUBCASE("divergence, accuracy and similarity") {
    const auto div = run_study("divergence", runs, base / "out", p);
    CHECK(div.at("runs")[0].at("steps") == 4);
    const auto acc = run_study("rm-accuracy", runs, base / "out", p);
    CHECK(acc.at("runs").size() == 2);
    const auto sim = run_study("similarity", runs, base / "out", p);
    CHECK(sim.at("policy_step") == 4);
    CHECK(fs::exists(base / "out" / "similarity_layers.csv"));
  }
  SUBCASE("missing inputs fail per study") {
    CHECK_THROWS_AS(run_study("divergence", {base / "absent"}, base / "out", p), StudyError);
    CHECK_THROWS_AS(run_study("rm-accuracy", {}, base / "out", p), StudyError);
    CHECK_THROWS_AS(run_study("nonsense", runs, base / "out", p), StudyError);
    fs::remove(base / "vanilla" / "ckpt" / "rm_step_0004.json");
    CHECK_THROWS_AS(run_study("rm-accuracy", runs, base / "out", p), StudyError);
  }
}
