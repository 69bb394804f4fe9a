#include "r2m/rmopt.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "r2m/numeric.hpp"
#include "r2m/optim.hpp"
#include "r2m/parallel.hpp"

namespace r2m {

PreferencePair build_preference_pair(std::span<const double> rewards) {
  if (rewards.size() < 2) throw std::invalid_argument("build_preference_pair: K must be >= 2");
  std::size_t w = 0;
  for (std::size_t j = 1; j < rewards.size(); ++j) {
    if (rewards[j] > rewards[w]) w = j;
  }
  std::size_t l = w == 0 ? 1 : 0;
  for (std::size_t j = 0; j < rewards.size(); ++j) {
    if (j != w && rewards[j] < rewards[l]) l = j;
  }
  return {w, l};
}

PreferencePair build_preference_pair(const Group& group) {
  if (group.rewards.size() != group.size()) {
    throw std::logic_error("build_preference_pair: group rewards not annotated");
  }
  return build_preference_pair(group.rewards);
}

double bt_loss(double r_w, double r_l) { return -log_sigmoid(r_w - r_l); }

namespace {

struct Standardized {
  double mean = 0.0;
  double std = 0.0;
  double denom = 0.0;
  std::vector<double> z;
  std::vector<double> p;
  double entropy = 0.0;
};

Standardized standardize(std::span<const double> r, double eps_std) {
  if (r.size() < 2) throw std::invalid_argument("gre_loss: K must be >= 2");
  Standardized s;
  const double K = static_cast<double>(r.size());
  if (std::all_of(r.begin(), r.end(), [&](double v) { return v == r[0]; })) {
    // Fully degenerate group: uniform distribution, entropy exactly ln K.
    s.mean = r[0];
    s.denom = eps_std;
    s.z.assign(r.size(), 0.0);
    s.p.assign(r.size(), 1.0 / K);
    s.entropy = std::log(K);
    return s;
  }
  const auto ms = mean_std_pop(r);
  s.mean = ms.mean;
  s.std = ms.std;
  // The guard only engages below eps_std, so groups with real spread are
  // standardised exactly and keep affine invariance.
  s.denom = std::max(ms.std, eps_std);
  if (!(s.denom > 0.0)) throw std::domain_error("gre_loss: zero spread with eps_std = 0");
  s.z.resize(r.size());
  for (std::size_t j = 0; j < r.size(); ++j) s.z[j] = (r[j] - s.mean) / s.denom;
  s.p = softmax(s.z);
  s.entropy = entropy(s.p);
  return s;
}

}  // namespace

double gre_loss(std::span<const double> rewards, double eps_std) {
  return standardize(rewards, eps_std).entropy;
}

double grebt_loss(double bt, double gre, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("grebt_loss: alpha outside [0, 1]");
  return (1.0 - alpha) * bt + alpha * gre;
}

double degeneration_degree(std::span<const double> rewards, double eps_std) {
  return gre_loss(rewards, eps_std);
}

Var bt_loss(Var r_w, Var r_l) {
  const double m = r_w.value().data.at(0) - r_l.value().data.at(0);
  return r_w.tape->record(Tensor::scalar(-log_sigmoid(m)), {r_w, r_l},
                          [r_w, r_l, m](Tape& t, const Tensor& g) {
                            const double d = -sigmoid(-m) * g.data[0];
                            if (t.requires_grad(r_w)) t.grad_slot(r_w).data[0] += d;
                            if (t.requires_grad(r_l)) t.grad_slot(r_l).data[0] -= d;
                          });
}

Var gre_loss(Var rewards, double eps_std) {
  const std::vector<double> r = rewards.value().data;
  auto s = standardize(r, eps_std);
  const double value = s.entropy;
  return rewards.tape->record(
      Tensor::scalar(value), {rewards},
      [rewards, r, s = std::move(s)](Tape& t, const Tensor& g) {
        // Uniform scores sit at the entropy maximum: zero gradient.
        if (s.std == 0.0) return;
        const std::size_t K = r.size();
        std::vector<double> gz(K);
        double gz_mean = 0.0, gz_dot = 0.0;
        for (std::size_t j = 0; j < K; ++j) {
          const double lp = s.p[j] > 0.0 ? std::log(s.p[j]) : 0.0;
          gz[j] = -s.p[j] * (lp + s.entropy) * g.data[0];
          gz_mean += gz[j];
          gz_dot += gz[j] * (r[j] - s.mean);
        }
        gz_mean /= static_cast<double>(K);
        // d std / d r_i = (r_i - mean) / (K std); the denominator is constant
        // while the guard is active.
        const double std_term =
            s.denom == s.std
                ? gz_dot / (static_cast<double>(K) * s.std * s.denom * s.denom)
                : 0.0;
        auto& gr = t.grad_slot(rewards).data;
        for (std::size_t i = 0; i < K; ++i) {
          gr[i] += (gz[i] - gz_mean) / s.denom - (r[i] - s.mean) * std_term;
        }
      });
}

Var grebt_loss(Var bt, Var gre, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("grebt_loss: alpha outside [0, 1]");
  return ad::add(ad::scale(bt, 1.0 - alpha), ad::scale(gre, alpha));
}

void RMOptConfig::validate() const {
  if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("rm opt: alpha outside [0, 1]");
  if (lr < 0.0) throw std::invalid_argument("rm opt: learning rate must be >= 0");
  if (eps_std < 0.0) throw std::invalid_argument("rm opt: eps_std must be >= 0");
}

GrebtEval grebt_batch(const std::vector<Group>& batch, const ParamSet& rm, const ModelConfig& cfg,
                      const RMOptConfig& opt, double w, RmUpdateMode mode,
                      std::uint64_t noise_seed, bool with_grad) {
  opt.validate();
  if (mode == RmUpdateMode::kNone) throw std::invalid_argument("grebt_batch: no update mode");
  if (batch.empty()) throw std::invalid_argument("grebt_batch: empty batch");
  const bool feedback = mode != RmUpdateMode::kIterativeHead;
  const bool full = opt.scope == UpdateScope::kFull;

  std::vector<GradMap> grads(batch.size());
  std::vector<RmUpdateStats> parts(batch.size());
  parallel_for(batch.size(), [&](std::size_t gi) {
    const Group& g = batch[gi];
    if (g.rte.size() != g.size()) throw std::logic_error("update_rm: group lacks embeddings");
    if (feedback && g.hidden.size() != g.size()) {
      throw std::logic_error("update_rm: feedback mode needs refreshed hidden states");
    }
    Tape tape(with_grad);
    HeadVars head = bind_head(tape, rm, /*train_cross_attention=*/feedback);
    std::vector<Var> rewards;
    for (std::size_t j = 0; j < g.size(); ++j) {
      Var e;
      if (full) {
        auto vars = transformer_forward(tape, rm, rm_backbone_spec(cfg), g.responses[j].ids);
        const std::size_t last = g.responses[j].size() - 1;
        e = ad::slice_rows(vars.final_hidden, last, last + 1);
      } else {
        e = tape.constant(g.rte[j]);
      }
      if (!feedback) {
        rewards.push_back(score(head, e));
        continue;
      }
      Var h;
      if (mode == RmUpdateMode::kR2MNoise) {
        Rng nr(noise_seed, {gi, j});
        h = tape.constant(noise_like(g.hidden[j], nr));
      } else {
        h = tape.constant(g.hidden[j]);
      }
      rewards.push_back(score(head, fuse_rte(e, cross_attend(head, e, h), w)));
    }
    Var row = ad::stack_scalars(rewards);
    const auto pair = build_preference_pair(row.value().data);
    Var bt = bt_loss(rewards[pair.winner], rewards[pair.loser]);
    Var gre = gre_loss(row, opt.eps_std);
    Var loss = grebt_loss(bt, gre, opt.alpha);
    parts[gi] = {bt.value().data[0], gre.value().data[0], loss.value().data[0], false};
    if (with_grad) {
      tape.backward(loss);
      grads[gi] = tape.param_grads();
    }
  });

  GrebtEval out;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    out.stats.bt += parts[i].bt * inv;
    out.stats.gre += parts[i].gre * inv;
    out.stats.loss += parts[i].loss * inv;
    if (with_grad) accumulate(out.grads, grads[i], inv);
  }
  return out;
}

RmUpdateStats update_rm(const std::vector<Group>& batch, ParamSet& rm, const ModelConfig& cfg,
                        const RMOptConfig& opt, double w, RmUpdateMode mode,
                        std::uint64_t noise_seed) {
  if (mode == RmUpdateMode::kNone) return {};
  auto eval = grebt_batch(batch, rm, cfg, opt, w, mode, noise_seed, true);
  if (!std::isfinite(eval.stats.loss)) {
    throw std::runtime_error("update_rm: non-finite GREBT loss");
  }
  if (opt.scope == UpdateScope::kHeadOnly) {
    for (auto it = eval.grads.begin(); it != eval.grads.end();) {
      it = it->first.rfind(names::kBackbonePrefix, 0) == 0 ? eval.grads.erase(it) : std::next(it);
    }
  }
  sgd_step(rm, eval.grads, opt.lr);
  eval.stats.updated = true;
  return eval.stats;
}

}  // namespace r2m
