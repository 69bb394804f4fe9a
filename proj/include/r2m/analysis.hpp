#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "r2m/models.hpp"
#include "r2m/rlcore.hpp"
#include "r2m/rmopt.hpp"
#include "r2m/synthenv.hpp"

namespace r2m {

/// Column-wise mean of an (S-1) x D hidden matrix, as a 1 x D row.
Tensor mean_hidden(const Tensor& h);

/// Cosine similarity mapped from [-1, 1] to [0, 1] by (c + 1) / 2.
double regularized_cosine(std::span<const double> a, std::span<const double> b);

struct SimilarityStudy {
  int layer = 0;
  double mu_intra = 0.0;
  double mu_cross = 0.0;
  std::size_t intra_pairs = 0;
  std::size_t cross_pairs = 0;
};

/// Mean regularized similarity over all unordered pairs, split by whether
/// the two labels agree. Every label needs at least two samples.
SimilarityStudy similarity_gap(const std::vector<Tensor>& vectors, const std::vector<int>& labels,
                               int layer);

/// Pearson correlation. Throws std::domain_error on zero variance.
double pearson(std::span<const double> x, std::span<const double> y);

struct SimilarityReport {
  std::vector<SimilarityStudy> layers;  // one per policy layer, shallow to deep
  std::vector<double> pair_similarity;  // deepest layer, sampled pairs
  std::vector<double> pair_reward_gap;  // |r_a - r_b| for the same pairs
  double correlation = 0.0;
};

/// Builds n_per_label chosen and n_per_label rejected samples from clean
/// preference pairs, takes the policy's per-layer mean hidden vectors and
/// compares them. The reward gap uses the vanilla RM score.
SimilarityReport similarity_study(const ParamSet& policy, const ParamSet& rm,
                                  const ModelConfig& cfg, const GoldTask& task,
                                  std::size_t n_per_label, std::size_t corr_pairs,
                                  std::uint64_t seed);

/// Groups sampled from `policy` over `queries` with RTEs precomputed; rewards
/// and advantages are left empty.
std::vector<Group> frozen_batch(const ParamSet& policy, const ParamSet& rm, const ModelConfig& cfg,
                                const std::vector<TokenSeq>& queries, std::size_t groups,
                                int group_size, double temperature, int max_new,
                                std::uint64_t seed);

/// Mean degeneration degree of the R2M rewards over a batch.
double mean_degeneration(const std::vector<Group>& batch, const ParamSet& rm, double w,
                         double eps_std = 1e-6);

struct AlphaSweepConfig {
  std::vector<double> grid{0.0, 0.2, 0.4, 0.6};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  int steps = 300;
  double lr = 0.2;
  double w = 0.6;
  double eps_std = 1e-6;
};

struct AlphaCell {
  double alpha = 0.0;
  std::uint64_t seed = 0;
  double mean_degeneration = 0.0;
  double final_loss = 0.0;
};

struct AlphaSweepResult {
  std::vector<double> grid;
  std::vector<std::uint64_t> seeds;
  std::vector<AlphaCell> cells;  // seed-major
  std::vector<bool> strictly_decreasing;  // per seed
  double verdict = 0.0;  // fraction of seeds strictly decreasing along the grid

  const AlphaCell& cell(std::size_t seed_index, std::size_t alpha_index) const;
};

/// One cell: fresh cross attention drawn from `seed`, phi from `rm`, then
/// `steps` GREBT updates of the head on the frozen batch.
AlphaCell alpha_cell(const std::vector<Group>& batch, const ParamSet& rm, const ModelConfig& cfg,
                     const AlphaSweepConfig& sc, double alpha, std::uint64_t seed);
AlphaSweepResult alpha_sweep(const std::vector<Group>& batch, const ParamSet& rm,
                             const ModelConfig& cfg, const AlphaSweepConfig& sc);

/// Scores one query-response pair.
using Scorer = std::function<double(const TokenSeq& pair)>;

/// Fraction of pairs with score(chosen) > score(rejected); ties count as wrong.
double rm_accuracy(const Scorer& scorer, const std::vector<PrefExample>& heldout);

Scorer vanilla_scorer(const ParamSet& rm, const ModelConfig& cfg);
/// R2M score with feedback from `policy` at fusion weight w.
Scorer r2m_scorer(const ParamSet& rm, const ModelConfig& cfg, const ParamSet& policy, double w);

/// Mean gold reward of `samples` responses per query drawn from `policy`.
double mean_gold_reward(const ParamSet& policy, const ModelConfig& cfg, const GoldTask& task,
                        const std::vector<TokenSeq>& queries, int samples, double temperature,
                        std::uint64_t seed);

struct ProbeSnapshot {
  long step = 0;
  std::optional<ParamSet> policy;  // missing snapshots become gaps
};

/// Scores a sampled pair given the sampling snapshot's step and hidden states.
using SnapshotScorer = std::function<double(long step, const TokenSeq& pair, const Tensor& hidden)>;

struct ConsistencySeries {
  std::string name;
  std::vector<long> steps;
  std::vector<std::optional<double>> mean_reward;  // nullopt marks a gap
};

/// For each snapshot, samples one response per probe from that snapshot's
/// policy (stream keyed by the step) and averages every variant's score.
std::vector<ConsistencySeries> reward_consistency_probe(
    const std::vector<TokenSeq>& probes, const std::vector<ProbeSnapshot>& snapshots,
    const std::vector<std::pair<std::string, SnapshotScorer>>& variants, const ModelConfig& cfg,
    double temperature, int max_new, std::uint64_t seed);

}  // namespace r2m
