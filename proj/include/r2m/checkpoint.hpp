#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "r2m/tensor.hpp"

namespace r2m {

inline constexpr int kCheckpointSchemaVersion = 1;

/// A checkpoint is a JSON manifest plus a sibling binary blob holding every
/// tensor as little-endian float64, row-major, in manifest order. Each
/// manifest entry records the tensor's byte offset into the blob, and loading
/// goes by offset, so manifest order is free.
struct Checkpoint {
  ParamSet params;
  long step = 0;
  std::string mode;
};

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kIo, kFormat, kVersion, kTruncated, kShape, kChecksum };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Writes `<manifest>` and `<manifest minus .json>.bin`.
void save_checkpoint(const ParamSet& params, const std::filesystem::path& manifest, long step,
                     const std::string& mode);
Checkpoint load_checkpoint(const std::filesystem::path& manifest);

}  // namespace r2m
