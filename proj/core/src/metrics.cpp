#include "vlmatch/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <unordered_set>

#include "vlmatch/error.hpp"
#include "vlmatch/json_field.hpp"

namespace vlmatch {

void EvalConfig::validate() const {
    if (ks.empty()) throw ValidationError("eval config: ks must not be empty");
    for (std::size_t i = 0; i < ks.size(); ++i) {
        if (ks[i] == 0) throw ValidationError("eval config: K values must be positive");
        if (i > 0 && ks[i] <= ks[i - 1]) throw ValidationError("eval config: K values must ascend");
    }
    if (top_m < 1) throw ValidationError("eval config: top_m must be >= 1");
    if (relscore_k < 1) throw ValidationError("eval config: relscore_k must be >= 1");
    if (irrelevant_degree < 0 || irrelevant_degree > 2) {
        throw ValidationError("eval config: irrelevant_degree outside {0,1,2}");
    }
}

nlohmann::json EvalConfig::to_json() const {
    return {{"ks", ks},
            {"query_sample", query_sample},
            {"top_m", top_m},
            {"relscore_k", relscore_k},
            {"irrelevant_degree", irrelevant_degree}};
}

EvalConfig EvalConfig::from_json(const nlohmann::json& j) {
    EvalConfig c;
    try {
        c.ks = json_field(j, "ks", c.ks);
        c.query_sample = json_field(j, "query_sample", c.query_sample);
        c.top_m = json_field(j, "top_m", c.top_m);
        c.relscore_k = json_field(j, "relscore_k", c.relscore_k);
        c.irrelevant_degree = json_field(j, "irrelevant_degree", c.irrelevant_degree);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("eval config: ") + e.what());
    }
    c.validate();
    return c;
}

double recall_at_k(const std::vector<std::vector<std::uint64_t>>& rankings,
                   std::span<const std::uint64_t> truth, std::size_t k) {
    if (k < 1) throw ParameterError("recall_at_k: k must be >= 1");
    if (rankings.empty()) throw ValidationError("recall_at_k: no rankings");
    if (truth.size() != rankings.size()) {
        throw ValidationError("recall_at_k: " + std::to_string(rankings.size()) + " rankings but " +
                              std::to_string(truth.size()) + " ground-truth ids");
    }
    std::size_t hits = 0;
    for (std::size_t q = 0; q < rankings.size(); ++q) {
        const auto& r = rankings[q];
        const auto end = r.begin() + static_cast<std::ptrdiff_t>(std::min(k, r.size()));
        if (std::find(r.begin(), end, truth[q]) != end) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(rankings.size());
}

double auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw ValidationError("auc: scores/labels size mismatch");
    std::size_t pos = 0;
    for (const int l : labels) {
        if (l != 0 && l != 1) throw ValidationError("auc: labels must be 0 or 1");
        pos += static_cast<std::size_t>(l);
    }
    const std::size_t neg = labels.size() - pos;
    if (pos == 0 || neg == 0) throw ValidationError("auc: both classes must be present");
    for (const double s : scores) {
        if (std::isnan(s)) throw ValidationError("auc: NaN score");
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // Sum of positive midranks (1-based), exact in double at desk scale.
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t t = i; t < j; ++t) {
            if (labels[order[t]] == 1) rank_sum += midrank;
        }
        i = j;
    }
    const double p = static_cast<double>(pos), n = static_cast<double>(neg);
    return (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

double diversity_ratio(const std::vector<std::vector<std::uint64_t>>& retrieved,
                       std::span<const std::uint64_t> catalog_ids) {
    if (catalog_ids.empty()) throw ValidationError("diversity_ratio: empty catalog");
    const std::unordered_set<std::uint64_t> catalog(catalog_ids.begin(), catalog_ids.end());
    std::unordered_set<std::uint64_t> seen;
    for (const auto& list : retrieved) {
        for (const auto id : list) {
            if (!catalog.count(id)) {
                throw ValidationError("diversity_ratio: id " + std::to_string(id) +
                                      " not in catalog");
            }
            seen.insert(id);
        }
    }
    return static_cast<double>(seen.size()) / static_cast<double>(catalog.size());
}

namespace {

int lookup(const DegreeLookup& degree, std::uint64_t q, std::uint64_t i) {
    const auto d = degree(q, i);
    if (!d) {
        throw ValidationError("missing degree for pair (" + std::to_string(q) + ", " +
                              std::to_string(i) + ")");
    }
    return *d;
}

}  // namespace

double irrelevant_ratio(const std::vector<RankedQuery>& results, const DegreeLookup& degree,
                        int irrelevant_degree) {
    std::size_t total = 0, bad = 0;
    for (const auto& r : results) {
        for (const auto id : r.image_ids) {
            ++total;
            if (lookup(degree, r.query_id, id) == irrelevant_degree) ++bad;
        }
    }
    if (total == 0) throw ValidationError("irrelevant_ratio: no returned pairs");
    return static_cast<double>(bad) / static_cast<double>(total);
}

double relscore_at_k(const std::vector<RankedQuery>& results, const DegreeLookup& degree,
                     std::size_t k) {
    if (k < 1) throw ParameterError("relscore_at_k: k must be >= 1");
    double acc = 0.0;
    std::size_t queries = 0;
    for (const auto& r : results) {
        const std::size_t n = std::min(k, r.image_ids.size());
        if (n == 0) continue;
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += lookup(degree, r.query_id, r.image_ids[i]);
        acc += s / static_cast<double>(n);
        ++queries;
    }
    if (queries == 0) throw ValidationError("relscore_at_k: no results");
    return acc / static_cast<double>(queries);
}

}  // namespace vlmatch
