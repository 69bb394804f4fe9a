#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "r2m/models.hpp"
#include "r2m/rlcore.hpp"
#include "r2m/rmopt.hpp"
#include "r2m/synthenv.hpp"

namespace r2m {

enum class TrainMode { kVanilla, kR2M, kR2MFrozen, kR2MNoise, kIterativeHead, kPretrainedRm };
TrainMode parse_train_mode(const std::string& s);
std::string to_string(TrainMode m);
/// How annotation-phase rewards are computed in each mode.
RewardMode annotation_mode(TrainMode m);
/// Which RM refresh runs after the policy phase.
RmUpdateMode update_mode(TrainMode m);
/// Whether the mode fuses policy feedback (and therefore reports omega).
bool fuses_feedback(TrainMode m);

enum class Ablation { kNone, kNoBt, kNoGre };
Ablation parse_ablation(const std::string& s);
std::string to_string(Ablation a);

struct DataConfig {
  int pref_pairs = 512;      // biased preference set for RM pretraining
  int query_pool = 128;      // RL training queries, cycled through
  int probe_queries = 16;    // TV-shift probes
  int heldout_pairs = 512;   // clean pairs for accuracy studies
  /// pretrained-rm mode: extra offline BT pass on clean pairs drawn over
  /// the RL query pool.
  int offline_pairs = 512;
  int offline_epochs = 6;
};

struct RunConfig {
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::kR2M;
  Ablation ablation = Ablation::kNone;
  double omega_floor = 0.6;
  int snapshot_interval = 10;
  /// Wall-clock seconds in metrics records; off by default so reruns are
  /// byte-identical (timings always go to timing.jsonl).
  bool log_wall_clock = false;
  std::string out_dir = "runs/default";

  ModelConfig model;
  RLConfig rl;
  RMOptConfig rm;
  GoldTask task;
  PretrainConfig pretrain;
  DataConfig data;

  /// Mixing weight after the ablation flags.
  double effective_alpha() const;
  RMOptConfig effective_rm() const;
  void validate() const;
};

/// Missing keys keep their defaults; unknown keys and type errors throw
/// std::invalid_argument naming the key.
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& c);
RunConfig load_config(const std::filesystem::path& path);

}  // namespace r2m
