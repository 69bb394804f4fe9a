#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "r2m/analysis.hpp"
#include "r2m/config.hpp"

namespace r2m {

/// Missing or unusable study inputs.
class StudyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StudyParams {
  AlphaSweepConfig sweep;
  std::size_t sweep_groups = 32;
  std::size_t probes = 128;
  std::size_t per_label = 100;
  std::size_t corr_pairs = 300;
  std::optional<long> step;  // similarity: policy snapshot, default final
};

inline const std::vector<std::string>& study_names() {
  static const std::vector<std::string> names{"alpha-sweep", "reward-consistency", "similarity",
                                              "rm-accuracy", "divergence"};
  return names;
}

/// A finished training run on disk.
struct RunDir {
  std::filesystem::path path;
  RunConfig config;

  static RunDir open(const std::filesystem::path& path);
  ParamSet policy(long step) const;
  ParamSet rm(long step) const;
  bool has_snapshot(long step) const;
  /// Steps at which run_train writes snapshots: 0, every interval, and T.
  std::vector<long> snapshot_steps() const;
  std::string label() const;
};

/// Runs one study over the given run directories and writes its CSV, JSON
/// sidecar and (for time series) SVG into out_dir. Returns the sidecar.
nlohmann::json run_study(const std::string& name, const std::vector<std::filesystem::path>& runs,
                         const std::filesystem::path& out_dir, const StudyParams& params = {});

}  // namespace r2m
