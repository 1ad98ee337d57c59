#include "vlmatch/manifest.hpp"

#include "vlmatch/error.hpp"
#include "vlmatch/io.hpp"

namespace vlcli {

nlohmann::json RunManifest::to_json() const {
    nlohmann::json j = {{"command", command},
                        {"config_path", config_path},
                        {"config", config},
                        {"inputs", inputs},
                        {"outputs", outputs},
                        {"seed", seed},
                        {"duration_s", duration_s},
                        {"exit_status", exit_status}};
    if (!error.empty()) j["error"] = error;
    return j;
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
    RunManifest m;
    try {
        m.command = j.at("command").get<std::string>();
        m.config_path = j.value("config_path", std::string());
        m.config = j.at("config");
        m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
        m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
        m.seed = j.value("seed", std::uint64_t{0});
        m.duration_s = j.value("duration_s", 0.0);
        m.exit_status = j.value("exit_status", 0);
        m.error = j.value("error", std::string());
    } catch (const nlohmann::json::exception& e) {
        throw vlmatch::FormatError(std::string("manifest: ") + e.what());
    }
    if (!m.config.is_object()) throw vlmatch::FormatError("manifest: config must be an object");
    return m;
}

std::filesystem::path manifest_path(const std::filesystem::path& output) {
    auto p = output;
    if (!p.has_filename()) p = p.parent_path();
    p += ".manifest.json";
    return p;
}

void write_manifest(const RunManifest& m, const std::filesystem::path& path) {
    vlmatch::write_file_atomic(path, m.to_json().dump(2) + "\n");
}

RunManifest read_manifest(const std::filesystem::path& path) {
    const std::string text = vlmatch::read_file_text(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw vlmatch::FormatError(path.string() + ": " + e.what());
    }
    return RunManifest::from_json(j);
}

}  // namespace vlcli
