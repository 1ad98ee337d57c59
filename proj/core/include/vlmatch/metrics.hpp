#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

namespace vlmatch {

struct EvalConfig {
    std::vector<std::size_t> ks{1, 5, 10};
    std::size_t query_sample = 0;  ///< 0 = every eligible query
    std::size_t top_m = 15;        ///< results per query for diversity / irrelevant ratio
    std::size_t relscore_k = 10;
    int irrelevant_degree = 0;

    /// Throws ValidationError.
    void validate() const;
    nlohmann::json to_json() const;
    static EvalConfig from_json(const nlohmann::json& j);
};

/// Ranked image ids returned for one query.
struct RankedQuery {
    std::uint64_t query_id = 0;
    std::vector<std::uint64_t> image_ids;
};

/// Degree of a (query, image) pair, or nullopt when unknown.
using DegreeLookup = std::function<std::optional<int>(std::uint64_t, std::uint64_t)>;

/// Mean over queries of 1[truth in top k]. rankings and truth are parallel;
/// a size mismatch (a query without ground truth) is a ValidationError.
double recall_at_k(const std::vector<std::vector<std::uint64_t>>& rankings,
                   std::span<const std::uint64_t> truth, std::size_t k);

/// Mann-Whitney AUC with ties counted 1/2 (computed through midranks).
/// labels must be 0/1 with both classes present, else ValidationError.
double auc(std::span<const double> scores, std::span<const int> labels);

/// |union of retrieved ids| / catalog size; an id outside the catalog is a
/// ValidationError.
double diversity_ratio(const std::vector<std::vector<std::uint64_t>>& retrieved,
                       std::span<const std::uint64_t> catalog_ids);

/// Fraction of returned pairs whose degree equals `irrelevant_degree`.
double irrelevant_ratio(const std::vector<RankedQuery>& results, const DegreeLookup& degree,
                        int irrelevant_degree = 0);

/// Mean degree of each query's top-k, averaged over queries.
double relscore_at_k(const std::vector<RankedQuery>& results, const DegreeLookup& degree,
                     std::size_t k);

}  // namespace vlmatch
