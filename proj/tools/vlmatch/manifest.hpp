#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

namespace vlcli {

struct RunManifest {
    std::string command;
    std::string config_path;
    nlohmann::json config = nlohmann::json::object();  ///< resolved flat snapshot
    std::map<std::string, std::string> inputs;
    std::map<std::string, std::string> outputs;
    std::uint64_t seed = 0;
    double duration_s = 0.0;
    int exit_status = 0;
    std::string error;

    nlohmann::json to_json() const;
    static RunManifest from_json(const nlohmann::json& j);
};

/// "<output>.manifest.json"; a trailing separator on a directory is ignored.
std::filesystem::path manifest_path(const std::filesystem::path& output);

void write_manifest(const RunManifest& m, const std::filesystem::path& path);
/// MissingInputError / FormatError.
RunManifest read_manifest(const std::filesystem::path& path);

}  // namespace vlcli
