#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmatch/encoders.hpp"
#include "vlmatch/metrics.hpp"
#include "vlmatch/pipeline.hpp"
#include "vlmatch/synthdata.hpp"

namespace vlmatch {

using PairScorer = std::function<double(std::uint64_t query_id, std::uint64_t image_id)>;

/// Cosine of the projected query text and item image.
PairScorer cosine_scorer(const ModelParams& params, const EncoderConfig& config, const Dataset& data);
/// Positive-class probability of the relevance head.
PairScorer relevance_scorer(const ModelParams& params, const EncoderConfig& config,
                            const Dataset& data);

/// AUC over relevance pairs whose query is held out.
double heldout_relevance_auc(const Dataset& data, const PairScorer& score);

/// Ground-truth degree lookup backed by the dataset latents.
DegreeLookup dataset_degrees(const Dataset& data);

/// Held-out query ids in ascending order, truncated to query_sample if set.
std::vector<std::uint64_t> heldout_queries(const Dataset& data, std::size_t query_sample = 0);

struct RetrievalMetrics {
    std::map<std::size_t, double> recall;  ///< K -> Recall@K
    double relscore = 0.0;
    double irrelevant_ratio = 0.0;
    double diversity_ratio = 0.0;
    std::size_t queries = 0;
    std::size_t click_pairs = 0;

    nlohmann::json to_json(const EvalConfig& config) const;
};

/// Exact search of every held-out query over all item images. Recall@K runs
/// over held-out click pairs; Relscore, Irrelevant and Diversity ratios over
/// the held-out queries' rankings.
RetrievalMetrics evaluate_retrieval(const Dataset& data, const ModelParams& retrieval,
                                    const EncoderConfig& config, const EvalConfig& eval);

/// Same metrics computed from a match report (final ranked lists).
RetrievalMetrics evaluate_matches(const std::vector<MatchResult>& results, const Dataset& data,
                                  const EvalConfig& eval);

}  // namespace vlmatch
