#include "r2m/rlcore.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "r2m/numeric.hpp"
#include "r2m/optim.hpp"
#include "r2m/parallel.hpp"

namespace r2m {

AdvantageEstimator parse_estimator(const std::string& s) {
  if (s == "rloo") return AdvantageEstimator::kRloo;
  if (s == "grpo") return AdvantageEstimator::kGrpo;
  throw std::invalid_argument("unknown advantage estimator: " + s);
}

std::string to_string(AdvantageEstimator e) {
  return e == AdvantageEstimator::kRloo ? "rloo" : "grpo";
}

void RLConfig::validate() const {
  if (groups < 1) throw std::invalid_argument("rl config: groups must be >= 1");
  if (group_size < 2) throw std::invalid_argument("rl config: group size K must be >= 2");
  if (!(clip > 0.0 && clip < 1.0)) throw std::invalid_argument("rl config: clip must be in (0, 1)");
  if (kl_coef < 0.0) throw std::invalid_argument("rl config: KL coefficient must be >= 0");
  if (!(temperature > 0.0)) throw std::invalid_argument("rl config: temperature must be > 0");
  if (epochs < 1) throw std::invalid_argument("rl config: epochs must be >= 1");
  if (policy_lr < 0.0) throw std::invalid_argument("rl config: learning rate must be >= 0");
  if (total_steps < 1) throw std::invalid_argument("rl config: total steps must be >= 1");
  if (max_new < 1) throw std::invalid_argument("rl config: max_new must be >= 1");
}

std::size_t Group::response_tokens() const {
  std::size_t n = 0;
  for (const auto& lp : old_logp) n += lp.size();
  return n;
}

Group sample_group(const ParamSet& policy, const ModelConfig& cfg, const TokenSeq& query,
                   int group_size, double temperature, int max_new, Rng& rng) {
  if (group_size < 2) throw std::invalid_argument("sample_group: K must be >= 2");
  Group g;
  g.query = query;
  for (int j = 0; j < group_size; ++j) {
    TokenSeq s = sample_response(policy, cfg, query, temperature, max_new, rng);
    const auto out = policy_forward(policy, cfg, s);
    g.old_logp.push_back(response_logprobs(out, s));
    g.hidden.push_back(out.hidden);
    g.responses.push_back(std::move(s));
  }
  return g;
}

void attach_ref_logprobs(Group& group, const ParamSet& ref, const ModelConfig& cfg) {
  group.ref_logp.clear();
  for (const auto& s : group.responses) {
    group.ref_logp.push_back(response_logprobs(policy_forward(ref, cfg, s), s));
  }
}

std::vector<double> rloo_advantages(std::span<const double> rewards) {
  const std::size_t K = rewards.size();
  if (K < 2) throw std::invalid_argument("rloo_advantages: K must be >= 2");
  double total = 0.0;
  for (double r : rewards) total += r;
  std::vector<double> adv(K);
  const double inv = 1.0 / static_cast<double>(K - 1);
  for (std::size_t j = 0; j < K; ++j) adv[j] = rewards[j] - (total - rewards[j]) * inv;
  return adv;
}

std::vector<double> grpo_advantages(std::span<const double> rewards, double eps_std) {
  if (rewards.size() < 2) throw std::invalid_argument("grpo_advantages: K must be >= 2");
  std::vector<double> adv(rewards.size(), 0.0);
  // A constant group has no signal; avoid dividing mean rounding error by eps.
  if (std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards[0]; })) {
    return adv;
  }
  const auto ms = mean_std_pop(rewards);
  for (std::size_t j = 0; j < rewards.size(); ++j) {
    adv[j] = (rewards[j] - ms.mean) / (ms.std + eps_std);
  }
  return adv;
}

void compute_advantages(Group& group, AdvantageEstimator est, double grpo_eps) {
  if (group.rewards.size() != group.size()) {
    throw std::logic_error("compute_advantages: group rewards not annotated");
  }
  group.advantages = est == AdvantageEstimator::kRloo ? rloo_advantages(group.rewards)
                                                      : grpo_advantages(group.rewards, grpo_eps);
}

double kl_token_estimate(std::span<const double> logp_theta, std::span<const double> logp_ref) {
  if (logp_theta.size() != logp_ref.size()) {
    throw std::invalid_argument("kl_token_estimate: length mismatch");
  }
  if (logp_theta.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < logp_theta.size(); ++i) s += logp_theta[i] - logp_ref[i];
  return s / static_cast<double>(logp_theta.size());
}

double clipped_term(double ratio, double advantage, double clip) {
  const double clipped = std::clamp(ratio, 1.0 - clip, 1.0 + clip);
  return std::min(ratio * advantage, clipped * advantage);
}

Var clipped_surrogate(Var logp, std::span<const double> old_logp, std::span<const double> ref_logp,
                      double advantage, double clip, double beta, double normalizer) {
  const Tensor& lp = logp.value();
  if (lp.size() != old_logp.size() || lp.size() != ref_logp.size()) {
    throw std::invalid_argument("clipped_surrogate: token count mismatch");
  }
  std::vector<double> old(old_logp.begin(), old_logp.end());
  std::vector<double> ref(ref_logp.begin(), ref_logp.end());
  double value = 0.0;
  for (std::size_t t = 0; t < lp.size(); ++t) {
    const double ratio = std::exp(lp.data[t] - old[t]);
    value += -clipped_term(ratio, advantage, clip) + beta * (lp.data[t] - ref[t]);
  }
  value /= normalizer;
  return logp.tape->record(
      Tensor::scalar(value), {logp},
      [logp, old = std::move(old), advantage, clip, beta, normalizer](Tape& t, const Tensor& g) {
        const auto& lpv = t.value(logp).data;
        auto& gl = t.grad_slot(logp).data;
        for (std::size_t i = 0; i < lpv.size(); ++i) {
          const double ratio = std::exp(lpv[i] - old[i]);
          const double clipped = std::clamp(ratio, 1.0 - clip, 1.0 + clip);
          // The unclipped branch is the active one when it attains the min.
          const bool unclipped_active = ratio * advantage <= clipped * advantage;
          const double d_sur = unclipped_active ? ratio * advantage : 0.0;
          gl[i] += g.data[0] * (-d_sur + beta) / normalizer;
        }
      });
}

PolicyLoss clipped_policy_objective(Tape& tape, const ParamSet& policy, const ModelConfig& cfg,
                                    const Group& group, double clip, double beta) {
  if (group.advantages.size() != group.size()) {
    throw std::logic_error("clipped_policy_objective: advantages not set");
  }
  if (group.old_logp.size() != group.size() || group.ref_logp.size() != group.size()) {
    throw std::logic_error("clipped_policy_objective: log-probabilities missing");
  }
  const double n_tokens = static_cast<double>(group.response_tokens());
  const auto spec = policy_spec(cfg);
  PolicyLoss out;
  std::vector<Var> terms;
  double kl_sum = 0.0, sur_sum = 0.0;
  for (std::size_t j = 0; j < group.size(); ++j) {
    const TokenSeq& s = group.responses[j];
    auto vars = transformer_forward(tape, policy, spec, s.ids);
    out.hidden.push_back(vars.final_hidden.value().head_rows(s.size() - 1));
    const auto resp = s.response();
    if (resp.empty()) continue;
    std::vector<int> cols(resp.begin(), resp.end());
    Var lp = ad::gather(ad::log_softmax_rows(vars.logits), s.query_len - 1, cols);
    terms.push_back(clipped_surrogate(lp, group.old_logp[j], group.ref_logp[j],
                                      group.advantages[j], clip, beta, n_tokens));
    const auto& lpv = lp.value().data;
    for (std::size_t t = 0; t < lpv.size(); ++t) {
      kl_sum += lpv[t] - group.ref_logp[j][t];
      sur_sum += clipped_term(std::exp(lpv[t] - group.old_logp[j][t]), group.advantages[j], clip);
    }
  }
  if (terms.empty()) {
    out.loss = tape.constant(Tensor::scalar(0.0));
    return out;
  }
  out.loss = ad::sum(ad::stack_scalars(terms));
  out.kl = kl_sum / n_tokens;
  out.surrogate = sur_sum / n_tokens;
  return out;
}

void refresh_hidden(std::vector<Group>& batch, const ParamSet& policy, const ModelConfig& cfg) {
  parallel_for(batch.size(), [&](std::size_t i) {
    auto& g = batch[i];
    for (std::size_t j = 0; j < g.size(); ++j) {
      g.hidden[j] = policy_forward(policy, cfg, g.responses[j]).hidden;
    }
  });
}

PolicyOptStats optimize_policy(std::vector<Group>& batch, ParamSet& policy,
                               const ModelConfig& cfg, const RLConfig& rl) {
  rl.validate();
  if (batch.empty()) throw std::invalid_argument("optimize_policy: empty batch");
  PolicyOptStats stats;
  const double inv_groups = 1.0 / static_cast<double>(batch.size());
  for (int epoch = 0; epoch < rl.epochs; ++epoch) {
    std::vector<GradMap> grads(batch.size());
    std::vector<PolicyLoss> losses(batch.size());
    std::vector<double> values(batch.size());
    parallel_for(batch.size(), [&](std::size_t i) {
      Tape tape;
      auto pl = clipped_policy_objective(tape, policy, cfg, batch[i], rl.clip, rl.kl_coef);
      values[i] = pl.loss.value().data[0];
      tape.backward(pl.loss);
      grads[i] = tape.param_grads();
      pl.loss = Var{};
      losses[i] = std::move(pl);
    });
    GradMap total;
    stats = {};
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (!std::isfinite(values[i])) {
        throw std::runtime_error("optimize_policy: non-finite policy loss in group " +
                                 std::to_string(i));
      }
      accumulate(total, grads[i], inv_groups);
      stats.loss += values[i] * inv_groups;
      stats.surrogate += losses[i].surrogate * inv_groups;
      stats.kl += losses[i].kl * inv_groups;
    }
    sgd_step(policy, total, rl.policy_lr);
  }
  refresh_hidden(batch, policy, cfg);
  return stats;
}

}  // namespace r2m
