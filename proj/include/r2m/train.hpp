#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "r2m/config.hpp"

namespace r2m {

/// Random stream roots. Every consumer draws from Rng(seed, {stream, ...}).
namespace streams {
inline constexpr std::uint64_t kPrefs = 1;
inline constexpr std::uint64_t kQueries = 2;
inline constexpr std::uint64_t kProbes = 3;
inline constexpr std::uint64_t kPolicyInit = 4;
inline constexpr std::uint64_t kRmInit = 5;
inline constexpr std::uint64_t kSample = 6;
inline constexpr std::uint64_t kNoise = 7;
inline constexpr std::uint64_t kNoiseUpdate = 8;
inline constexpr std::uint64_t kProbeSample = 9;
inline constexpr std::uint64_t kPretrain = 10;
inline constexpr std::uint64_t kOffline = 11;
inline constexpr std::uint64_t kHeldout = 12;
inline constexpr std::uint64_t kAnalysis = 13;
}  // namespace streams

/// 64-bit seed for a sub-component, derived from the run seed and a path.
std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path);

struct MetricsRecord {
  long step = 0;
  std::string mode;
  double proxy_reward = 0.0;
  double gold_reward = 0.0;
  double kl = 0.0;
  double policy_loss = 0.0;
  std::optional<double> bt_loss;
  std::optional<double> gre_loss;
  std::optional<double> omega;
  std::optional<double> eps_normalized;
  double tv_shift = 0.0;
  std::optional<double> wall_clock_seconds;

  nlohmann::json to_json() const;
  static MetricsRecord from_json(const nlohmann::json& j);
};

/// Everything fixed before the RL loop starts.
struct Environment {
  std::vector<PrefExample> prefs;    // biased pretraining set
  std::vector<TokenSeq> query_pool;  // RL training queries
  std::vector<TokenSeq> probes;      // TV-shift probes
  ParamSet policy;                   // initial policy, also pi_ref
  ParamSet rm;                       // pretrained RM with a fresh R2M head
  PretrainReport pretrain;
  std::optional<PretrainReport> offline;  // pretrained-rm mode only
};

/// Pretrains the vanilla RM (and, in pretrained-rm mode, runs the extra
/// offline pass). Depends only on the seed, model, task, pretrain and data
/// settings, so runs that share them can share one environment.
Environment prepare_environment(const RunConfig& cfg);

/// Clean preference pairs used for accuracy studies; disjoint stream from
/// the pretraining set.
std::vector<PrefExample> heldout_pairs(const RunConfig& cfg);

/// The R2M training loop, one step at a time.
class Trainer {
 public:
  explicit Trainer(const RunConfig& cfg);
  Trainer(const RunConfig& cfg, Environment env);

  bool done() const { return step_ >= cfg_.rl.total_steps; }
  long step() const { return step_; }
  /// Runs the current step and advances. Throws std::runtime_error naming the
  /// step and tensor if any parameter becomes non-finite.
  MetricsRecord run_step();

  const RunConfig& config() const { return cfg_; }
  const Environment& environment() const { return env_; }
  const ParamSet& policy() const { return policy_; }
  const ParamSet& rm() const { return rm_; }
  /// Annotation rewards of the last step, group-major.
  const std::vector<double>& last_rewards() const { return last_rewards_; }

 private:
  RunConfig cfg_;
  Environment env_;
  ParamSet policy_;
  ParamSet rm_;
  long step_ = 0;
  std::vector<double> last_rewards_;
};

struct TrainResult {
  std::vector<MetricsRecord> metrics;
  ParamSet policy;
  ParamSet rm;
  std::vector<double> first_step_rewards;
};

/// Runs a whole training job. When `out_dir` is set, writes config.json,
/// metrics.jsonl (flushed per step), timing.jsonl, prefs.jsonl, summary.json
/// and checkpoints under ckpt/ at every snapshot_interval steps.
TrainResult run_train(const RunConfig& cfg, const std::optional<std::filesystem::path>& out_dir,
                      const Environment* shared_env = nullptr);

/// Checkpoint paths inside a run directory.
std::filesystem::path policy_ckpt_path(const std::filesystem::path& run, long step);
std::filesystem::path rm_ckpt_path(const std::filesystem::path& run, long step);

}  // namespace r2m
