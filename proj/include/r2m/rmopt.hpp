#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "r2m/autodiff.hpp"
#include "r2m/models.hpp"
#include "r2m/rlcore.hpp"

namespace r2m {

/// Winner/loser indices within a group.
struct PreferencePair {
  std::size_t winner = 0;
  std::size_t loser = 1;
};

/// Winner = first argmax, loser = first argmin other than the winner.
PreferencePair build_preference_pair(std::span<const double> rewards);
PreferencePair build_preference_pair(const Group& group);

/// -log sigmoid(r_w - r_l)
double bt_loss(double r_w, double r_l);
/// Entropy (nats) of softmax over the group-standardised rewards
/// (r - mean) / max(std_pop, eps_std).
double gre_loss(std::span<const double> rewards, double eps_std);
double grebt_loss(double bt, double gre, double alpha);
/// Same quantity as gre_loss, under the name used when it is read as a
/// measure of how uniformly the RM scores a group.
double degeneration_degree(std::span<const double> rewards, double eps_std = 1e-6);

Var bt_loss(Var r_w, Var r_l);
/// `rewards` is a 1 x K row.
Var gre_loss(Var rewards, double eps_std);
Var grebt_loss(Var bt, Var gre, double alpha);

enum class UpdateScope { kHeadOnly, kFull };

struct RMOptConfig {
  double alpha = 0.3;
  double lr = 1e-3;
  double eps_std = 1e-6;
  UpdateScope scope = UpdateScope::kHeadOnly;

  void validate() const;
};

/// How the reward model is refreshed after each policy phase.
enum class RmUpdateMode {
  kNone,          // frozen RM (vanilla, pretrained-rm, r2m-frozen)
  kR2M,           // recompute rewards with fresh feedback, update head + phi
  kR2MNoise,      // as kR2M with feedback replaced by matched Gaussian noise
  kIterativeHead  // feedback-free scores, phi only
};

struct RmUpdateStats {
  double bt = 0.0;
  double gre = 0.0;
  double loss = 0.0;
  bool updated = false;
};

/// Mean GREBT over the batch and its gradient w.r.t. the trainable head.
/// Rewards are recomputed with the current head; preference pairs are
/// rebuilt from them. `noise_seed` addresses the noise streams in noise mode.
struct GrebtEval {
  RmUpdateStats stats;
  GradMap grads;
};
GrebtEval grebt_batch(const std::vector<Group>& batch, const ParamSet& rm, const ModelConfig& cfg,
                      const RMOptConfig& opt, double w, RmUpdateMode mode,
                      std::uint64_t noise_seed = 0, bool with_grad = true);

/// One gradient step of mean GREBT on the head. Backbone parameters are never
/// written unless scope is kFull.
RmUpdateStats update_rm(const std::vector<Group>& batch, ParamSet& rm, const ModelConfig& cfg,
                        const RMOptConfig& opt, double w, RmUpdateMode mode,
                        std::uint64_t noise_seed = 0);

}  // namespace r2m
