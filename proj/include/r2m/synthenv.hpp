#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "r2m/models.hpp"
#include "r2m/rng.hpp"

namespace r2m {

namespace tokens {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kSep = 2;
inline constexpr int kEos = 3;
inline constexpr int kFirstContent = 4;
}  // namespace tokens

/// Synthetic task. A query is [BOS, t_1..t_m, SEP] where t_i are the target
/// tokens; the gold reward pays for covering the targets and charges for
/// length. The spurious n-gram is worth nothing under the gold reward.
struct GoldTask {
  int vocab = 64;
  int min_targets = 2;
  int max_targets = 3;
  double coverage_weight = 4.0;
  double length_penalty = 1.0;  // lambda
  int max_new = 12;
  std::vector<int> ngram{61, 62, 63};
  double bias = 0.7;

  void validate() const;
  /// Content tokens that can serve as targets (never part of the n-gram).
  std::vector<int> target_pool() const;
};

TokenSeq gen_query(const GoldTask& task, Rng& rng);
/// Query number `index` of the stream rooted at `seed`.
TokenSeq gen_query(const GoldTask& task, std::uint64_t seed, std::uint64_t index);
/// Target tokens encoded in a query prefix.
std::vector<int> query_targets(std::span<const int> query);

/// Response length charged by the gold reward: tokens before the first EOS.
std::size_t response_length(std::span<const int> response, int eos = tokens::kEos);
bool contains_ngram(std::span<const int> response, std::span<const int> ngram);

/// coverage_weight * (fraction of targets present) - lambda * len / max_new.
double gold_reward(const GoldTask& task, const TokenSeq& pair);

/// Query + response concatenation.
TokenSeq join_pair(std::span<const int> query, std::span<const int> response);

/// Off-policy response used for preference data: a mix of targets and filler
/// of random length, with the n-gram inserted about half the time.
std::vector<int> gen_response(const GoldTask& task, std::span<const int> query, Rng& rng);

struct PrefExample {
  std::vector<int> query;
  std::vector<int> chosen;    // response tokens only
  std::vector<int> rejected;
  double gold_chosen = 0.0;
  double gold_rejected = 0.0;
  /// The bias rule fired and set the label (it may agree with the BT draw).
  bool bias_flipped = false;

  TokenSeq chosen_pair() const { return join_pair(query, chosen); }
  TokenSeq rejected_pair() const { return join_pair(query, rejected); }
};

/// Example i draws from Rng(seed, {i}), so datasets are prefix-stable.
std::vector<PrefExample> gen_preference_dataset(const GoldTask& task, std::size_t n,
                                                std::uint64_t seed);
/// Same, with example i asked on queries[i % queries.size()].
std::vector<PrefExample> gen_preference_dataset(const GoldTask& task, std::size_t n,
                                                std::uint64_t seed,
                                                const std::vector<TokenSeq>& queries);

void write_pref_jsonl(std::ostream& out, const std::vector<PrefExample>& data);
std::vector<PrefExample> read_pref_jsonl(std::istream& in);

struct PretrainConfig {
  int epochs = 12;
  double lr = 3e-3;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;  // minibatch order
};

struct PretrainReport {
  double final_loss = 0.0;
  double train_accuracy = 0.0;
  int epochs = 0;
};

/// BT training of backbone + phi with Adam over minibatches. The
/// cross-attention weights are left untouched.
PretrainReport pretrain_vanilla_rm(ParamSet& rm, const ModelConfig& cfg,
                                   const std::vector<PrefExample>& prefs,
                                   const PretrainConfig& pc);

/// Vanilla scores of chosen vs rejected, strict inequality.
double vanilla_accuracy(const ParamSet& rm, const ModelConfig& cfg,
                        const std::vector<PrefExample>& prefs);

struct MisalignmentReport {
  double raw = 0.0;         // mean |r_rm - r*|
  double normalized = 0.0;  // after removing the median offset
  std::size_t count = 0;
};

/// Both errors from paired scores. The normalising offset is the median of
/// r_rm - r*, which minimises the mean absolute error over all constant
/// shifts, so normalized <= raw always holds.
MisalignmentReport misalignment_from_scores(std::span<const double> rm_scores,
                                            std::span<const double> gold);

/// Scores a sampled pair given the sampling policy's hidden states.
using PairScorer = std::function<double(const TokenSeq& pair, const Tensor& hidden)>;

/// Samples one response per probe query from `policy` and compares the
/// scorer with the gold reward.
MisalignmentReport misalignment_error(const PairScorer& scorer, const ParamSet& policy,
                                      const ModelConfig& cfg, const std::vector<TokenSeq>& probes,
                                      const GoldTask& task, double temperature, Rng& rng);

/// 0.5 * sum |p - q|
double tv_distance(std::span<const double> p, std::span<const double> q);

/// Next-token TV between two policies averaged over the response positions
/// of the given trajectories (each position weighted equally).
double tv_shift_on(const ParamSet& policy_t, const ParamSet& policy_0, const ModelConfig& cfg,
                   const std::vector<TokenSeq>& trajectories);

/// Samples one trajectory per probe from policy_t, then tv_shift_on.
double tv_shift(const ParamSet& policy_t, const ParamSet& policy_0, const ModelConfig& cfg,
                const std::vector<TokenSeq>& probes, double temperature, int max_new, Rng& rng);

}  // namespace r2m
