#include "r2m/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <vector>

#include "json.hpp"

namespace r2m {

namespace fs = std::filesystem;
using Kind = CheckpointError::Kind;

namespace {

void put_f64(std::vector<unsigned char>& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

double get_f64(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
  return std::bit_cast<double>(bits);
}

std::uint64_t fnv1a(const std::vector<unsigned char>& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

fs::path blob_path(const fs::path& manifest) {
  fs::path p = manifest;
  p.replace_extension(".bin");
  return p;
}

}  // namespace

void save_checkpoint(const ParamSet& params, const fs::path& manifest, long step,
                     const std::string& mode) {
  std::vector<unsigned char> blob;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& e : params.entries()) {
    tensors.push_back({{"name", e.name},
                       {"shape", e.value.shape},
                       {"offset", blob.size()},
                       {"trainable", e.trainable}});
    for (double v : e.value.data) put_f64(blob, v);
  }
  const fs::path bin = blob_path(manifest);
  nlohmann::json m{{"schema_version", kCheckpointSchemaVersion},
                   {"step", step},
                   {"mode", mode},
                   {"blob", bin.filename().string()},
                   {"blob_bytes", blob.size()},
                   // Hex string: JSON readers often lose precision on u64.
                   {"checksum", [&] {
                      char buf[17];
                      std::snprintf(buf, sizeof buf, "%016llx",
                                    static_cast<unsigned long long>(fnv1a(blob)));
                      return std::string(buf);
                    }()},
                   {"tensors", tensors}};
  if (manifest.has_parent_path()) fs::create_directories(manifest.parent_path());
  std::ofstream b(bin, std::ios::binary);
  b.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  std::ofstream j(manifest);
  j << m.dump(2) << '\n';
  if (!b || !j) throw CheckpointError(Kind::kIo, "cannot write checkpoint " + manifest.string());
}

Checkpoint load_checkpoint(const fs::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw CheckpointError(Kind::kIo, "cannot open manifest " + manifest.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::kFormat, std::string("manifest is not valid JSON: ") + e.what());
  }
  try {
    const int version = m.at("schema_version").get<int>();
    if (version != kCheckpointSchemaVersion) {
      throw CheckpointError(Kind::kVersion, "checkpoint schema version " + std::to_string(version) +
                                                " (expected " +
                                                std::to_string(kCheckpointSchemaVersion) + ")");
    }
    const fs::path bin = manifest.parent_path() / m.at("blob").get<std::string>();
    std::ifstream b(bin, std::ios::binary);
    if (!b) throw CheckpointError(Kind::kIo, "cannot open blob " + bin.string());
    const std::vector<unsigned char> blob{std::istreambuf_iterator<char>(b), {}};
    const auto expected_bytes = m.at("blob_bytes").get<std::size_t>();
    if (blob.size() != expected_bytes) {
      throw CheckpointError(Kind::kTruncated, "blob has " + std::to_string(blob.size()) +
                                                  " bytes, manifest says " +
                                                  std::to_string(expected_bytes));
    }
    const auto want = std::stoull(m.at("checksum").get<std::string>(), nullptr, 16);
    if (fnv1a(blob) != want) {
      throw CheckpointError(Kind::kChecksum, "blob checksum mismatch in " + bin.string());
    }
    Checkpoint ck;
    ck.step = m.at("step").get<long>();
    ck.mode = m.at("mode").get<std::string>();
    for (const auto& t : m.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<std::vector<std::size_t>>();
      const auto offset = t.at("offset").get<std::size_t>();
      Tensor v(shape);
      if (offset % 8 != 0 || offset > blob.size() || (blob.size() - offset) / 8 < v.size()) {
        throw CheckpointError(Kind::kShape, "tensor " + name + " with shape " +
                                                shape_string(shape) + " at offset " +
                                                std::to_string(offset) + " overruns the blob");
      }
      for (std::size_t i = 0; i < v.size(); ++i) v.data[i] = get_f64(blob.data() + offset + 8 * i);
      ck.params.add(name, std::move(v), t.at("trainable").get<bool>());
    }
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::kFormat, std::string("malformed manifest: ") + e.what());
  }
}

}  // namespace r2m
