#pragma once

#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmatch/encoders.hpp"

namespace vlmatch {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    EncoderConfig config;
    ModelParams params;
    nlohmann::json meta = nlohmann::json::object();
};

/// Binary little-endian layout: "VLMT", u32 version, u64 length + JSON header
/// {config, frozen, meta}, u64 record count, then per parameter: u32 name
/// length + name, u32 rank, u64 dims, f64 values. Written via rename so a
/// crash never leaves a half-written file at `path`.
void save_checkpoint(const ModelParams& params, const EncoderConfig& config,
                     const std::filesystem::path& path,
                     const nlohmann::json& meta = nlohmann::json::object());
std::vector<std::uint8_t> serialize_checkpoint(const ModelParams& params,
                                               const EncoderConfig& config,
                                               const nlohmann::json& meta);

/// Throws MissingInputError, FormatError (bad magic, truncation, malformed
/// header) or VersionError. Nothing is returned unless the whole file parses.
Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

/// Copies the named groups of `source` into `target` after checking that
/// every parameter exists with an identical shape; throws DimensionError or
/// StateError without touching `target` otherwise.
void assign_groups(ModelParams& target, const ModelParams& source,
                   std::span<const std::string_view> group_names);

}  // namespace vlmatch
