#include "vlmatch/eval.hpp"

#include <algorithm>
#include <unordered_map>

#include "vlmatch/error.hpp"
#include "vlmatch/finetune.hpp"

namespace vlmatch {

namespace {

struct EmbeddingCache {
    std::vector<Tensor> query;
    std::vector<Tensor> image;
};

std::shared_ptr<EmbeddingCache> embed_all(const ModelParams& params, const EncoderConfig& config,
                                          const Dataset& data) {
    NoGradGuard no_grad;
    auto cache = std::make_shared<EmbeddingCache>();
    for (const auto& it : data.items) {
        cache->query.push_back(query_embedding(it.query_tokens, params, config).detach());
        cache->image.push_back(image_embedding(it.patches, params, config).detach());
    }
    return cache;
}

double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

std::vector<std::uint64_t> ids_of(const std::vector<MatchEntry>& entries) {
    std::vector<std::uint64_t> ids;
    for (const auto& e : entries) ids.push_back(e.image_id);
    return ids;
}

RetrievalMetrics metrics_from_rankings(const std::map<std::uint64_t, std::vector<std::uint64_t>>& rankings,
                                       const Dataset& data, const EvalConfig& eval) {
    RetrievalMetrics m;
    m.queries = rankings.size();
    if (rankings.empty()) throw ValidationError("evaluation: no queries");
    std::vector<std::vector<std::uint64_t>> lists;
    std::vector<std::uint64_t> truth;
    for (const auto& c : data.clicks) {
        const auto it = rankings.find(c.query_id);
        if (it == rankings.end()) continue;
        lists.push_back(it->second);
        truth.push_back(c.image_id);
    }
    m.click_pairs = truth.size();
    if (!truth.empty()) {
        for (const auto k : eval.ks) m.recall[k] = recall_at_k(lists, truth, k);
    }
    std::vector<RankedQuery> top_m, top_rel;
    std::vector<std::vector<std::uint64_t>> retrieved;
    for (const auto& [q, ids] : rankings) {
        const auto cut = [&](std::size_t k) {
            return std::vector<std::uint64_t>(ids.begin(),
                                              ids.begin() + static_cast<std::ptrdiff_t>(std::min(k, ids.size())));
        };
        top_m.push_back({q, cut(eval.top_m)});
        top_rel.push_back({q, cut(eval.relscore_k)});
        retrieved.push_back(top_m.back().image_ids);
    }
    const auto degrees = dataset_degrees(data);
    std::vector<std::uint64_t> catalog;
    for (const auto& it : data.items) catalog.push_back(it.id);
    m.relscore = relscore_at_k(top_rel, degrees, eval.relscore_k);
    m.irrelevant_ratio = irrelevant_ratio(top_m, degrees, eval.irrelevant_degree);
    m.diversity_ratio = diversity_ratio(retrieved, catalog);
    return m;
}

}  // namespace

PairScorer cosine_scorer(const ModelParams& params, const EncoderConfig& config, const Dataset& data) {
    auto cache = embed_all(params, config, data);
    return [cache](std::uint64_t q, std::uint64_t i) {
        return dot(cache->query.at(q).data(), cache->image.at(i).data());
    };
}

PairScorer relevance_scorer(const ModelParams& params, const EncoderConfig& config,
                            const Dataset& data) {
    auto cache = embed_all(params, config, data);
    const ModelParams* p = &params;
    return [cache, p](std::uint64_t q, std::uint64_t i) {
        return teacher_score(cache->query.at(q), cache->image.at(i), p);
    };
}

double heldout_relevance_auc(const Dataset& data, const PairScorer& score) {
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& r : data.relevance) {
        if (!data.is_heldout(r.query_id)) continue;
        scores.push_back(score(r.query_id, r.image_id));
        labels.push_back(degree_to_label(r.degree));
    }
    return auc(scores, labels);
}

DegreeLookup dataset_degrees(const Dataset& data) {
    const Dataset* d = &data;
    return [d](std::uint64_t q, std::uint64_t i) -> std::optional<int> {
        if (q >= d->items.size() || i >= d->items.size()) return std::nullopt;
        return d->degree(q, i);
    };
}

std::vector<std::uint64_t> heldout_queries(const Dataset& data, std::size_t query_sample) {
    std::vector<std::uint64_t> out;
    for (const auto& it : data.items) {
        if (data.is_heldout(it.id)) out.push_back(it.id);
    }
    if (query_sample > 0 && out.size() > query_sample) out.resize(query_sample);
    return out;
}

nlohmann::json RetrievalMetrics::to_json(const EvalConfig& config) const {
    nlohmann::json j;
    for (const auto& [k, v] : recall) j["recall@" + std::to_string(k)] = v;
    j["relscore@" + std::to_string(config.relscore_k)] = relscore;
    j["irrelevant_ratio"] = irrelevant_ratio;
    j["diversity_ratio"] = diversity_ratio;
    j["queries"] = queries;
    j["click_pairs"] = click_pairs;
    return j;
}

RetrievalMetrics evaluate_retrieval(const Dataset& data, const ModelParams& retrieval,
                                    const EncoderConfig& config, const EvalConfig& eval) {
    eval.validate();
    const auto catalog = embed_catalog(data.items, retrieval, config);
    const auto index = EmbeddingIndex::build(catalog.ids, catalog.vectors, catalog.dim, false);
    const std::size_t depth =
        std::max({eval.ks.back(), eval.top_m, eval.relscore_k});
    std::map<std::uint64_t, std::vector<std::uint64_t>> rankings;
    NoGradGuard no_grad;
    for (const auto q : heldout_queries(data, eval.query_sample)) {
        const Tensor e = query_embedding(data.items[q].query_tokens, retrieval, config);
        std::vector<std::uint64_t> ids;
        for (const auto& h : index.search_exact(e.data(), depth)) ids.push_back(h.id);
        rankings.emplace(q, std::move(ids));
    }
    return metrics_from_rankings(rankings, data, eval);
}

RetrievalMetrics evaluate_matches(const std::vector<MatchResult>& results, const Dataset& data,
                                  const EvalConfig& eval) {
    eval.validate();
    std::map<std::uint64_t, std::vector<std::uint64_t>> rankings;
    for (const auto& r : results) {
        if (!rankings.emplace(r.query_id, ids_of(r.results)).second) {
            throw ValidationError("evaluation: duplicate query " + std::to_string(r.query_id));
        }
    }
    return metrics_from_rankings(rankings, data, eval);
}

}  // namespace vlmatch
