#pragma once

#include <span>
#include <string>
#include <vector>

#include "r2m/autodiff.hpp"
#include "r2m/models.hpp"
#include "r2m/rng.hpp"

namespace r2m {

enum class AdvantageEstimator { kRloo, kGrpo };
AdvantageEstimator parse_estimator(const std::string& s);
std::string to_string(AdvantageEstimator e);

struct RLConfig {
  int groups = 8;         // queries per step
  int group_size = 4;     // responses per query
  double clip = 0.2;
  double kl_coef = 0.05;
  double temperature = 0.7;
  int epochs = 2;         // policy epochs per step
  double policy_lr = 0.05;
  int total_steps = 40;
  int max_new = 12;
  AdvantageEstimator estimator = AdvantageEstimator::kRloo;
  double grpo_eps = 1e-6;

  void validate() const;
};

/// One query with K sampled responses and everything computed about them.
/// The per-response vectors are filled in pipeline order: sampling fills
/// responses/hidden/old_logp, annotation fills rte/rewards, advantage
/// estimation fills advantages.
struct Group {
  TokenSeq query;
  std::vector<TokenSeq> responses;            // query + response
  std::vector<Tensor> hidden;                 // (S-1) x D_p policy feedback
  std::vector<std::vector<double>> old_logp;  // per response token, under pi_old
  std::vector<std::vector<double>> ref_logp;  // per response token, under pi_ref
  std::vector<Tensor> rte;                    // RM reward-token embeddings
  std::vector<double> rewards;
  std::vector<double> advantages;

  std::size_t size() const { return responses.size(); }
  std::size_t response_tokens() const;
};

/// Draws K responses from `policy` (acting as pi_old) and freezes their
/// hidden states and log-probabilities.
Group sample_group(const ParamSet& policy, const ModelConfig& cfg, const TokenSeq& query,
                   int group_size, double temperature, int max_new, Rng& rng);

/// Fills ref_logp from the reference policy.
void attach_ref_logprobs(Group& group, const ParamSet& ref, const ModelConfig& cfg);

std::vector<double> rloo_advantages(std::span<const double> rewards);
std::vector<double> grpo_advantages(std::span<const double> rewards, double eps_std);
void compute_advantages(Group& group, AdvantageEstimator est, double grpo_eps = 1e-6);

/// Mean over response tokens of logp_theta - logp_ref.
double kl_token_estimate(std::span<const double> logp_theta, std::span<const double> logp_ref);

/// Clipped surrogate for one response given its current log-probabilities
/// (L x 1). Returns the sum over tokens of
///   -min(rho A, clip(rho, 1-eps, 1+eps) A) + beta (logp - logp_ref)
/// divided by `normalizer`. Differentiable w.r.t. `logp` only.
Var clipped_surrogate(Var logp, std::span<const double> old_logp, std::span<const double> ref_logp,
                      double advantage, double clip, double beta, double normalizer);

/// Surrogate value min(rho A, clip(rho) A) for a single ratio.
double clipped_term(double ratio, double advantage, double clip);

struct PolicyLoss {
  Var loss;
  double surrogate = 0.0;  // token mean of the clipped surrogate
  double kl = 0.0;         // token mean of logp_theta - logp_ref
  std::vector<Tensor> hidden;  // last-layer states of this forward pass
};

/// Group objective (to minimise) under the policy bound on `tape`.
PolicyLoss clipped_policy_objective(Tape& tape, const ParamSet& policy, const ModelConfig& cfg,
                                    const Group& group, double clip, double beta);

struct PolicyOptStats {
  double loss = 0.0;
  double surrogate = 0.0;
  double kl = 0.0;
};

/// k epochs of full-batch gradient descent on the mean group objective.
/// On return every group's hidden matrices are the last-layer states of the
/// returned policy.
PolicyOptStats optimize_policy(std::vector<Group>& batch, ParamSet& policy,
                               const ModelConfig& cfg, const RLConfig& rl);

/// Replaces every group's hidden matrices with the current policy's states.
void refresh_hidden(std::vector<Group>& batch, const ParamSet& policy, const ModelConfig& cfg);

}  // namespace r2m
