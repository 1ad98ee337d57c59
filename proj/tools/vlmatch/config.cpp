#include "vlmatch/config.hpp"

#include <fstream>
#include <set>

#include "vlmatch/error.hpp"
#include "vlmatch/metrics.hpp"
#include "vlmatch/synthdata.hpp"
#include "vlmatch/trainer.hpp"

namespace vlcli {

using vlmatch::ValidationError;

namespace {

void flatten_into(const nlohmann::json& j, const std::string& prefix, Flat& out) {
    for (const auto& [k, v] : j.items()) {
        const std::string key = prefix.empty() ? k : prefix + "." + k;
        if (v.is_object()) {
            flatten_into(v, key, out);
        } else {
            out[key] = v;
        }
    }
}

std::set<std::string> keys_of(const nlohmann::json& j) {
    std::set<std::string> out;
    for (const auto& [k, v] : j.items()) out.insert(k);
    return out;
}

std::set<std::string> train_keys() {
    auto k = keys_of(vlmatch::TrainConfig{}.to_json());
    k.erase("stage");
    k.erase("seed");
    return k;
}

const std::map<std::string, std::set<std::string>, std::less<>>& known_sections() {
    static const std::map<std::string, std::set<std::string>, std::less<>> sections = [] {
        std::map<std::string, std::set<std::string>, std::less<>> s;
        auto gen = keys_of(vlmatch::GenConfig{}.to_json());
        gen.erase("seed");
        s["gen"] = gen;
        s["encoder"] = keys_of(vlmatch::EncoderConfig{}.to_json());
        s["pretrain"] = train_keys();
        s["relevance"] = train_keys();
        s["retrieval"] = train_keys();
        s["index"] = {"ann", "m", "ef_construction"};
        s["match"] = {"k_retrieve", "k_final", "use_ann", "ef_search", "queries", "query_sample"};
        s["eval"] = keys_of(vlmatch::EvalConfig{}.to_json());
        s["ablation"] = {"lambdas"};
        return s;
    }();
    return sections;
}

}  // namespace

Flat flatten(const nlohmann::json& j) {
    if (!j.is_object()) throw ValidationError("config: top level must be a JSON object");
    Flat out = Flat::object();
    flatten_into(j, "", out);
    return out;
}

Flat load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw vlmatch::MissingInputError(path.string());
    try {
        return flatten(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

void apply_set(Flat& flat, std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw ValidationError("--set expects key=value, got '" + std::string(assignment) + "'");
    }
    const std::string key(assignment.substr(0, eq));
    const std::string text(assignment.substr(eq + 1));
    auto value = nlohmann::json::parse(text, nullptr, false);
    flat[key] = value.is_discarded() ? nlohmann::json(text) : value;
}

void check_keys(const Flat& flat) {
    const auto& sections = known_sections();
    for (const auto& [key, value] : flat.items()) {
        if (key == "seed") continue;
        const auto dot = key.find('.');
        const auto it = sections.find(key.substr(0, dot));
        if (dot == std::string::npos || it == sections.end() ||
            !it->second.count(key.substr(dot + 1))) {
            throw ValidationError("config: unknown key '" + key + "'");
        }
    }
}

nlohmann::json section(const Flat& flat, std::string_view name) {
    nlohmann::json out = nlohmann::json::object();
    const std::string prefix = std::string(name) + ".";
    for (const auto& [key, value] : flat.items()) {
        if (key.rfind(prefix, 0) == 0) out[key.substr(prefix.size())] = value;
    }
    return out;
}

void store_section(Flat& flat, std::string_view name, const nlohmann::json& resolved) {
    for (const auto& [k, v] : resolved.items()) flat[std::string(name) + "." + k] = v;
}

std::uint64_t seed_of(const Flat& flat) {
    const auto it = flat.find("seed");
    if (it == flat.end()) return 1;
    if (!it->is_number_unsigned()) throw ValidationError("config: seed must be a non-negative integer");
    return it->get<std::uint64_t>();
}

}  // namespace vlcli
