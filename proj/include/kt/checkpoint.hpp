#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>

#include <nlohmann/json.hpp>

#include "kt/core.hpp"

namespace kt::io {

inline constexpr int kCheckpointVersion = 1;

/// Layout: 8-byte magic "KTCORE\0\1", u64 little-endian manifest length, the
/// manifest as compact JSON, then every array of the manifest in order as raw
/// little-endian doubles (row-major).
struct Checkpoint {
  std::unique_ptr<core::CoreModel> model;
  nlohmann::json manifest;

  std::uint64_t vocab_hash() const;
  double calibrated_threshold() const { return manifest.value("calibrated_threshold", 0.0); }
};

std::string hash_hex(std::uint64_t h);

/// `extra` is merged into the manifest (config echo, calibrated threshold).
void save_checkpoint(std::ostream& out, core::CoreModel& model, std::uint64_t vocab_hash, const nlohmann::json& extra);
void save_checkpoint(const std::filesystem::path& path, core::CoreModel& model, std::uint64_t vocab_hash,
                     const nlohmann::json& extra);

/// Throws DataError on a corrupt file and when `expected_vocab_hash` is given
/// and differs from the stored one.
Checkpoint load_checkpoint(std::istream& in, std::optional<std::uint64_t> expected_vocab_hash = std::nullopt);
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::optional<std::uint64_t> expected_vocab_hash = std::nullopt);

}  // namespace kt::io
