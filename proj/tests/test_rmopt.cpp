#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "doctest.h"
#include "r2m/grad_check.hpp"
#include "r2m/numeric.hpp"
#include "r2m/rmopt.hpp"

using namespace r2m;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.vocab = 16;
  cfg.policy_dim = 8;
  cfg.rm_dim = 8;
  cfg.xattn_dim = 4;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.max_len = 12;
  return cfg;
}

// Entropy of softmax((r - mean) / max(std, eps)), written out directly.
double gre_oracle(const std::vector<double>& r, double eps) {
  const double k = static_cast<double>(r.size());
  double mean = 0.0;
  for (double v : r) mean += v;
  mean /= k;
  double var = 0.0;
  for (double v : r) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / k);
  std::vector<double> e;
  double z = 0.0;
  for (double v : r) {
    e.push_back(std::exp((v - mean) / std::max(sd, eps)));
    z += e.back();
  }
  double h = 0.0;
  for (double v : e) h -= v / z * std::log(v / z);
  return h;
}

struct Fixture {
  ModelConfig cfg = tiny_config();
  ParamSet policy;
  ParamSet rm;
  std::vector<Group> batch;
};

// Groups with refreshed hidden states, embeddings and R2M rewards.
Fixture make_fixture(int groups, int k, std::uint64_t seed) {
  Fixture f;
  f.policy = init_policy(f.cfg, seed);
  f.rm = init_reward_model(f.cfg, seed + 1);
  for (int i = 0; i < groups; ++i) {
    Rng rng(seed, {static_cast<std::uint64_t>(i)});
    TokenSeq q{{1, 4 + i % 8, 6 + i % 5, 2}, 4};
    Group g = sample_group(f.policy, f.cfg, q, k, 1.0, 6, rng);
    for (std::size_t j = 0; j < g.size(); ++j) {
      g.rte.push_back(rm_backbone_rte(f.rm, f.cfg, g.responses[j]));
      g.rewards.push_back(r2m_reward(f.rm, RewardMode::kR2M, g.rte[j], &g.hidden[j], 0.7));
    }
    f.batch.push_back(std::move(g));
  }
  return f;
}

ParamSet head_only(const ParamSet& rm) {
  ParamSet out;
  for (const auto& e : rm.entries()) {
    if (e.name.rfind(names::kBackbonePrefix, 0) != 0) out.add(e.name, e.value, e.trainable);
  }
  return out;
}

}  // namespace

TEST_CASE("preference pair construction") {
  auto p = build_preference_pair(std::vector<double>{0.1, 0.9, 0.5});
  CHECK(p.winner == 1);
  CHECK(p.loser == 0);
  p = build_preference_pair(std::vector<double>{2.0, 2.0, 2.0});
  CHECK(p.winner == 0);
  CHECK(p.loser == 1);
  p = build_preference_pair(std::vector<double>{1.0, 3.0, 3.0, 1.0});
  CHECK(p.winner == 1);
  CHECK(p.loser == 0);
  CHECK_THROWS_AS(build_preference_pair(std::vector<double>{1.0}), std::invalid_argument);

  // Same responses selected under any permutation of distinct rewards.
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> r(6);
    for (auto& v : r) v = rng.normal(0.0, 1.0);
    const auto base = build_preference_pair(r);
    std::vector<std::size_t> perm(r.size());
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.index(i + 1)]);
    std::vector<double> shuffled(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) shuffled[i] = r[perm[i]];
    const auto q = build_preference_pair(shuffled);
    CHECK(perm[q.winner] == base.winner);
    CHECK(perm[q.loser] == base.loser);
  }
}

TEST_CASE("bt loss") {
  CHECK(bt_loss(0.4, 0.4) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(bt_loss(std::log(3.0), 0.0) == doctest::Approx(std::log(4.0 / 3.0)).epsilon(1e-12));
  CHECK(bt_loss(std::log(3.0), 0.0) == doctest::Approx(0.2877).epsilon(1e-4));
  const double far = bt_loss(800.0, 0.0);
  CHECK(far >= 0.0);
  CHECK(far < 1e-300);
  CHECK(std::isfinite(bt_loss(0.0, 800.0)));
  double prev = bt_loss(-5.0, 0.0);
  for (double m = -4.5; m <= 5.0; m += 0.5) {
    const double cur = bt_loss(m, 0.0);
    CHECK(cur < prev);
    CHECK(cur > 0.0);
    prev = cur;
  }
}

TEST_CASE("gre loss") {
  for (std::size_t k : {2, 3, 4, 7, 8}) {
    CHECK(gre_loss(std::vector<double>(k, 1.7), 1e-6) == std::log(static_cast<double>(k)));
  }
  const double v = gre_loss(std::vector<double>{0.0, 1.0}, 0.0);
  CHECK(v == doctest::Approx(gre_oracle({0.0, 1.0}, 0.0)).epsilon(1e-12));
  CHECK(std::abs(v - 0.3653) < 1e-4);

  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 2 + rng.index(7);
    std::vector<double> r(k);
    for (auto& x : r) x = rng.normal(0.0, 2.0);
    const double g = gre_loss(r, 1e-6);
    CHECK(g >= 0.0);
    CHECK(g <= std::log(static_cast<double>(k)) + 1e-12);
    CHECK(g == doctest::Approx(gre_oracle(r, 1e-6)).epsilon(1e-10));
    const double a = 0.1 + rng.uniform() * 5.0, b = rng.normal(0.0, 10.0);
    std::vector<double> t(k);
    for (std::size_t j = 0; j < k; ++j) t[j] = a * r[j] + b;
    CHECK(std::abs(gre_loss(t, 1e-6) - g) < 1e-9);
  }
  CHECK_THROWS_AS(gre_loss(std::vector<double>{1.0}, 1e-6), std::invalid_argument);
}

TEST_CASE("grebt and degeneration degree") {
  CHECK(grebt_loss(0.6931, 0.3653, 0.0) == 0.6931);
  CHECK(grebt_loss(0.6931, 0.3653, 1.0) == 0.3653);
  CHECK(grebt_loss(0.6931, 0.3653, 0.3) == doctest::Approx(0.5948).epsilon(1e-4));
  CHECK_THROWS_AS(grebt_loss(1.0, 1.0, 1.5), std::invalid_argument);
  CHECK_THROWS_AS(grebt_loss(1.0, 1.0, -0.1), std::invalid_argument);

  CHECK(degeneration_degree(std::vector<double>(4, 0.2)) == std::log(4.0));
  // Standardised scores cap a single outlier at z = sqrt(K - 1), so the
  // limit is approached by growing the group around one dominant reward.
  double prev = std::log(8.0);
  for (std::size_t k : {8, 32, 128, 512}) {
    std::vector<double> dominant(k, 0.0);
    dominant[k / 2] = 1.0;
    const double c = degeneration_degree(dominant);
    CHECK(c < prev);
    prev = c;
  }
  CHECK(prev < 1e-5);
  Rng rng(4);
  std::vector<double> r(5);
  for (auto& x : r) x = rng.normal(0.0, 1.0);
  CHECK(degeneration_degree(r) == gre_loss(r, 1e-6));
}

TEST_CASE("loss gradients pass finite-difference checks") {
  for (int point = 0; point < 10; ++point) {
    Rng rng(200 + point);
    ParamSet p;
    const std::size_t k = std::size_t{2} << (point % 3);
    Tensor r = Tensor::matrix(1, k);
    for (auto& v : r.data) v = rng.normal(0.0, 1.5);
    p.add("r", r);
    const double alpha = rng.uniform();
    const auto pair = build_preference_pair(r.data);

    auto bt = [&](Tape& t, const ParamSet& ps) {
      Var row = t.param(ps, "r");
      return bt_loss(ad::entry(row, 0, pair.winner), ad::entry(row, 0, pair.loser));
    };
    auto gre = [&](Tape& t, const ParamSet& ps) { return gre_loss(t.param(ps, "r"), 1e-6); };
    auto mix = [&](Tape& t, const ParamSet& ps) {
      Var row = t.param(ps, "r");
      return grebt_loss(bt_loss(ad::entry(row, 0, pair.winner), ad::entry(row, 0, pair.loser)),
                        gre_loss(row, 1e-6), alpha);
    };
    CHECK(grad_check(bt, p, 1e-5).passed(1e-4));
    CHECK(grad_check(gre, p, 1e-5).passed(1e-4));
    CHECK(grad_check(mix, p, 1e-5).passed(1e-4));
  }
}

TEST_CASE("GREBT gradient through the full reward path") {
  for (int point = 0; point < 10; ++point) {
    auto f = make_fixture(2, 4, 300 + point);
    const double w = 0.6 + 0.04 * point;
    const double alpha = 0.1 * (point % 10);
    auto loss = [&](Tape& t, const ParamSet& ps) {
      HeadVars head = bind_head(t, ps);
      std::vector<Var> terms;
      for (const auto& g : f.batch) {
        std::vector<Var> rewards;
        for (std::size_t j = 0; j < g.size(); ++j) {
          Var e = t.constant(g.rte[j]);
          rewards.push_back(score(head, fuse_rte(e, cross_attend(head, e, t.constant(g.hidden[j])), w)));
        }
        Var row = ad::stack_scalars(rewards);
        const auto pair = build_preference_pair(row.value().data);
        terms.push_back(grebt_loss(bt_loss(rewards[pair.winner], rewards[pair.loser]),
                                   gre_loss(row, 1e-6), alpha));
      }
      return ad::mean(ad::stack_scalars(terms));
    };
    const auto head = head_only(f.rm);
    const auto rep = grad_check(loss, head, 1e-5);
    CHECK(rep.passed(1e-4));
    CHECK(rep.per_param.size() == 6);

    // grebt_batch agrees with the hand-built graph.
    RMOptConfig opt;
    opt.alpha = alpha;
    const auto eval = grebt_batch(f.batch, f.rm, f.cfg, opt, w, RmUpdateMode::kR2M);
    Tape t;
    const Var l = loss(t, head);
    t.backward(l);
    CHECK(eval.stats.loss == doctest::Approx(l.value().data[0]).epsilon(1e-12));
    for (const auto& [name, g] : t.param_grads()) {
      REQUIRE(eval.grads.count(name) == 1);
      for (std::size_t i = 0; i < g.size(); ++i) {
        CHECK(eval.grads.at(name).data[i] == doctest::Approx(g.data[i]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("update_rm") {
  auto f = make_fixture(4, 4, 11);
  RMOptConfig opt;
  const double w = 0.7;
  const auto backbone = f.rm.checksum(names::kBackbonePrefix);

  SUBCASE("zero learning rate leaves the head unchanged") {
    opt.lr = 0.0;
    const auto before = f.rm;
    const auto stats = update_rm(f.batch, f.rm, f.cfg, opt, w, RmUpdateMode::kR2M);
    CHECK(stats.updated);
    CHECK(f.rm == before);
  }
  SUBCASE("small step does not increase the batch loss") {
    opt.lr = 1e-3;
    const double before = grebt_batch(f.batch, f.rm, f.cfg, opt, w, RmUpdateMode::kR2M).stats.loss;
    update_rm(f.batch, f.rm, f.cfg, opt, w, RmUpdateMode::kR2M);
    const double after =
        grebt_batch(f.batch, f.rm, f.cfg, opt, w, RmUpdateMode::kR2M, 0, false).stats.loss;
    CHECK(after <= before);
  }
  SUBCASE("backbone is frozen in every mode") {
    opt.lr = 0.05;
    for (auto mode : {RmUpdateMode::kR2M, RmUpdateMode::kR2MNoise, RmUpdateMode::kIterativeHead,
                      RmUpdateMode::kNone}) {
      for (int i = 0; i < 5; ++i) update_rm(f.batch, f.rm, f.cfg, opt, w, mode, 7 + i);
      CHECK(f.rm.checksum(names::kBackbonePrefix) == backbone);
    }
  }
  SUBCASE("iterative head updates phi only") {
    opt.lr = 0.05;
    const auto before = f.rm;
    update_rm(f.batch, f.rm, f.cfg, opt, w, RmUpdateMode::kIterativeHead);
    for (const char* n : {names::kWq, names::kWk, names::kWv, names::kWo}) {
      CHECK(f.rm.get(n) == before.get(n));
    }
    CHECK_FALSE(f.rm.get(names::kPhiW) == before.get(names::kPhiW));
    // Feedback is not needed in this mode.
    for (auto& g : f.batch) g.hidden.clear();
    CHECK_NOTHROW(update_rm(f.batch, f.rm, f.cfg, opt, w, RmUpdateMode::kIterativeHead));
  }
  SUBCASE("r2m updates the cross-attention weights") {
    opt.lr = 0.05;
    const auto before = f.rm;
    update_rm(f.batch, f.rm, f.cfg, opt, w, RmUpdateMode::kR2M);
    CHECK_FALSE(f.rm.get(names::kWq) == before.get(names::kWq));
    CHECK_FALSE(f.rm.get(names::kPhiW) == before.get(names::kPhiW));
  }
  SUBCASE("no-update mode is a no-op") {
    const auto before = f.rm;
    CHECK_FALSE(update_rm(f.batch, f.rm, f.cfg, opt, w, RmUpdateMode::kNone).updated);
    CHECK(f.rm == before);
  }
  SUBCASE("noise mode is reproducible per seed") {
    opt.lr = 0.05;
    auto a = f.rm, b = f.rm, c = f.rm;
    update_rm(f.batch, a, f.cfg, opt, w, RmUpdateMode::kR2MNoise, 5);
    update_rm(f.batch, b, f.cfg, opt, w, RmUpdateMode::kR2MNoise, 5);
    update_rm(f.batch, c, f.cfg, opt, w, RmUpdateMode::kR2MNoise, 6);
    CHECK(a == b);
    CHECK_FALSE(a == c);
  }
  SUBCASE("feedback modes require hidden states") {
    for (auto& g : f.batch) g.hidden.clear();
    CHECK_THROWS_AS(update_rm(f.batch, f.rm, f.cfg, opt, w, RmUpdateMode::kR2M), std::logic_error);
  }
  SUBCASE("full scope also moves the backbone") {
    opt.lr = 0.05;
    opt.scope = UpdateScope::kFull;
    update_rm(f.batch, f.rm, f.cfg, opt, w, RmUpdateMode::kR2M);
    CHECK(f.rm.checksum(names::kBackbonePrefix) != backbone);
  }
  SUBCASE("alpha outside [0, 1] is rejected") {
    opt.alpha = 1.2;
    CHECK_THROWS_AS(update_rm(f.batch, f.rm, f.cfg, opt, w, RmUpdateMode::kR2M),
                    std::invalid_argument);
  }
}
