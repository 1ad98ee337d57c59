#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace vlcli {

/// Flat configuration: a JSON object keyed by dotted names such as
/// "gen.n_items" or "retrieval.lambda", plus the top-level "seed".
using Flat = nlohmann::json;

/// Reads a JSON config file. Nested objects are flattened into dotted keys,
/// so {"gen": {"n_items": 8}} and {"gen.n_items": 8} are equivalent.
Flat load_config(const std::filesystem::path& path);

Flat flatten(const nlohmann::json& j);

/// Applies "key=value"; the value is parsed as JSON when possible and kept
/// as a string otherwise.
void apply_set(Flat& flat, std::string_view assignment);

/// Throws ValidationError on a key outside the known sections or a field a
/// section does not define.
void check_keys(const Flat& flat);

/// Fields of one section with the prefix stripped, e.g. section(f, "gen").
nlohmann::json section(const Flat& flat, std::string_view name);

/// Writes every field of `resolved` back as "<name>.<field>".
void store_section(Flat& flat, std::string_view name, const nlohmann::json& resolved);

std::uint64_t seed_of(const Flat& flat);

}  // namespace vlcli
