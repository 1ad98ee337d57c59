#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "vlmatch/encoders.hpp"
#include "vlmatch/index.hpp"
#include "vlmatch/synthdata.hpp"

namespace vlmatch {

struct MatchEntry {
    std::uint64_t image_id = 0;
    double retrieval_score = 0.0;
    double relevance_score = 0.0;
    friend bool operator==(const MatchEntry&, const MatchEntry&) = default;
};

struct MatchResult {
    std::uint64_t query_id = 0;
    std::vector<MatchEntry> results;
    std::int64_t retrieve_us = 0;
    std::int64_t rerank_us = 0;
    friend bool operator==(const MatchResult&, const MatchResult&) = default;
};

struct MatchOptions {
    std::size_t k_retrieve = 15;
    std::size_t k_final = 5;
    bool use_ann = true;  ///< ANN when the index has a graph, exact otherwise
    std::size_t ef_search = 32;
    bool record_timings = false;  ///< timings stay 0 so reports are reproducible
};

/// One unit vector per item image from the retrieval model's vision tower.
/// StateError when the checkpoint does not fit `config`.
EmbeddingExport embed_catalog(std::span<const Item> items, const ModelParams& retrieval,
                              const EncoderConfig& config);

/// Stage-two scorer: relevance-model probability for (query, catalog image).
/// Catalog image embeddings are computed once at construction.
class Reranker {
public:
    Reranker(const ModelParams& relevance, const EncoderConfig& config, std::span<const Item> catalog);

    Tensor query_embedding(std::span<const int> tokens) const;
    double score(const Tensor& query_emb, std::uint64_t image_id) const;

private:
    const ModelParams* relevance_;
    EncoderConfig config_;
    std::unordered_map<std::uint64_t, Tensor> image_emb_;
};

/// Retrieve k_retrieve candidates with the retrieval tower, rerank them by
/// relevance probability, keep k_final. Order: relevance desc, retrieval
/// desc, id asc.
MatchResult match(std::uint64_t query_id, std::span<const int> query_tokens,
                  const EmbeddingIndex& index, const ModelParams& retrieval,
                  const Reranker& reranker, const EncoderConfig& config,
                  const MatchOptions& options = {});

/// Applies the final ordering rule in place.
void sort_match_entries(std::vector<MatchEntry>& entries);

std::string match_report_jsonl(const std::vector<MatchResult>& results);
void write_match_report(const std::vector<MatchResult>& results, const std::filesystem::path& path);
std::vector<MatchResult> read_match_report(const std::filesystem::path& path);

}  // namespace vlmatch
