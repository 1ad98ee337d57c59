#pragma once

#include <cstdint>
#include <string>
#include <type_traits>

#include <nlohmann/json.hpp>

#include "vlmatch/error.hpp"

namespace vlmatch {

/// j[key] converted to T, or `fallback` when absent. Unsigned targets accept
/// only non-negative integers (ValidationError otherwise); other mismatches
/// surface as nlohmann exceptions.
template <class T>
T json_field(const nlohmann::json& j, const std::string& key, T fallback) {
    const auto it = j.find(key);
    if (it == j.end()) return fallback;
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
        if (!it->is_number_integer() || (!it->is_number_unsigned() && it->get<std::int64_t>() < 0)) {
            throw ValidationError(key + " must be a non-negative integer, got " + it->dump());
        }
    }
    return it->get<T>();
}

}  // namespace vlmatch
