#include "vlmatch/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>

#include <nlohmann/json.hpp>

#include "vlmatch/error.hpp"
#include "vlmatch/finetune.hpp"
#include "vlmatch/io.hpp"

namespace vlmatch {

namespace {

void check_model(const ModelParams& params, const EncoderConfig& config, const char* what) {
    try {
        config.validate();
        const auto& w = params.at(groups::kProjectionVision, "proj.w");
        const auto& t = params.at(groups::kProjectionText, "proj.w");
        const auto& patch = params.at(groups::kVision, "patch.w");
        if (w.shape() != Shape{config.dim, config.proj_dim} ||
            t.shape() != Shape{config.dim, config.proj_dim} ||
            patch.shape() != Shape{config.patch_dim, config.dim}) {
            throw DimensionError("shape mismatch");
        }
    } catch (const Error& e) {
        throw StateError(std::string(what) + " checkpoint does not match the encoder config: " +
                         e.what());
    }
}

std::int64_t micros_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - t0)
        .count();
}

}  // namespace

EmbeddingExport embed_catalog(std::span<const Item> items, const ModelParams& retrieval,
                              const EncoderConfig& config) {
    check_model(retrieval, config, "retrieval");
    NoGradGuard no_grad;
    EmbeddingExport out;
    out.dim = config.proj_dim;
    for (const auto& it : items) {
        const Tensor e = image_embedding(it.patches, retrieval, config);
        out.ids.push_back(it.id);
        out.vectors.insert(out.vectors.end(), e.data().begin(), e.data().end());
    }
    return out;
}

Reranker::Reranker(const ModelParams& relevance, const EncoderConfig& config,
                   std::span<const Item> catalog)
    : relevance_(&relevance), config_(config) {
    check_model(relevance, config, "relevance");
    if (!relevance.has_group(groups::kRelevanceHead)) {
        throw StateError("relevance checkpoint lacks the relevance head");
    }
    NoGradGuard no_grad;
    for (const auto& it : catalog) {
        image_emb_.emplace(it.id, image_embedding(it.patches, relevance, config).detach());
    }
}

Tensor Reranker::query_embedding(std::span<const int> tokens) const {
    NoGradGuard no_grad;
    return vlmatch::query_embedding(tokens, *relevance_, config_).detach();
}

double Reranker::score(const Tensor& query_emb, std::uint64_t image_id) const {
    const auto it = image_emb_.find(image_id);
    if (it == image_emb_.end()) {
        throw IndexError("reranker: image " + std::to_string(image_id) + " not in catalog");
    }
    return teacher_score(query_emb, it->second, relevance_);
}

void sort_match_entries(std::vector<MatchEntry>& entries) {
    std::sort(entries.begin(), entries.end(), [](const MatchEntry& a, const MatchEntry& b) {
        if (a.relevance_score != b.relevance_score) return a.relevance_score > b.relevance_score;
        if (a.retrieval_score != b.retrieval_score) return a.retrieval_score > b.retrieval_score;
        return a.image_id < b.image_id;
    });
}

MatchResult match(std::uint64_t query_id, std::span<const int> query_tokens,
                  const EmbeddingIndex& index, const ModelParams& retrieval,
                  const Reranker& reranker, const EncoderConfig& config,
                  const MatchOptions& options) {
    if (options.k_final < 1) throw ParameterError("match: k_final must be >= 1");
    if (options.k_final > options.k_retrieve) {
        throw ParameterError("match: k_final (" + std::to_string(options.k_final) +
                             ") exceeds k_retrieve (" + std::to_string(options.k_retrieve) + ")");
    }
    if (index.empty()) throw StateError("match: empty index");
    MatchResult out;
    out.query_id = query_id;

    const auto t0 = std::chrono::steady_clock::now();
    std::vector<SearchHit> hits;
    {
        NoGradGuard no_grad;
        const Tensor q = query_embedding(query_tokens, retrieval, config);
        if (options.use_ann && index.has_graph()) {
            hits = index.search_ann(q.data(), options.k_retrieve,
                                    std::max(options.ef_search, options.k_retrieve));
        } else {
            hits = index.search_exact(q.data(), options.k_retrieve);
        }
    }
    if (options.record_timings) out.retrieve_us = micros_since(t0);

    const auto t1 = std::chrono::steady_clock::now();
    const Tensor rq = reranker.query_embedding(query_tokens);
    for (const auto& h : hits) out.results.push_back({h.id, h.score, reranker.score(rq, h.id)});
    sort_match_entries(out.results);
    if (out.results.size() > options.k_final) out.results.resize(options.k_final);
    if (options.record_timings) out.rerank_us = micros_since(t1);
    return out;
}

std::string match_report_jsonl(const std::vector<MatchResult>& results) {
    std::string out;
    for (const auto& r : results) {
        nlohmann::json list = nlohmann::json::array();
        for (const auto& e : r.results) {
            list.push_back({{"image_id", e.image_id},
                            {"retrieval_score", e.retrieval_score},
                            {"relevance_score", e.relevance_score}});
        }
        const nlohmann::json j = {{"query_id", r.query_id},
                                  {"results", std::move(list)},
                                  {"timings_us", {{"retrieve", r.retrieve_us}, {"rerank", r.rerank_us}}}};
        out += j.dump() + "\n";
    }
    return out;
}

void write_match_report(const std::vector<MatchResult>& results, const std::filesystem::path& path) {
    write_file_atomic(path, match_report_jsonl(results));
}

std::vector<MatchResult> read_match_report(const std::filesystem::path& path) {
    std::istringstream in(read_file_text(path));
    std::vector<MatchResult> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            MatchResult r;
            r.query_id = j.at("query_id").get<std::uint64_t>();
            for (const auto& e : j.at("results")) {
                r.results.push_back({e.at("image_id").get<std::uint64_t>(),
                                     e.at("retrieval_score").get<double>(),
                                     e.at("relevance_score").get<double>()});
            }
            r.retrieve_us = j.at("timings_us").at("retrieve").get<std::int64_t>();
            r.rerank_us = j.at("timings_us").at("rerank").get<std::int64_t>();
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace vlmatch
