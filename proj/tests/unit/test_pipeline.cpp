#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <thread>

#include "vlmatch/error.hpp"
#include "vlmatch/finetune.hpp"
#include "vlmatch/pipeline.hpp"

using namespace vlmatch;
using Catch::Matchers::WithinAbs;
namespace fs = std::filesystem;

namespace {

struct World {
    Dataset data;
    EncoderConfig enc;
    ModelParams retrieval;
    ModelParams relevance;

    explicit World(std::size_t n = 40, std::uint64_t seed = 5) {
        GenConfig gen;
        gen.n_items = n;
        gen.seed = seed;
        gen.click_candidates = std::min<std::size_t>(8, n - 1);
        gen.relevance_per_query = 3;
        data = generate_dataset(gen);
        EncoderConfig small;
        small.dim = 8;
        small.layers = 1;
        small.heads = 2;
        small.ffn_dim = 16;
        small.proj_dim = 8;
        small.relevance_hidden = 8;
        small.init_std = 0.3;
        enc = encoder_config_for(gen, small);
        Rng a(seed * 2 + 1), b(seed * 2 + 2);
        retrieval = init_model(enc, a);
        relevance = init_model(enc, b);
    }

    EmbeddingIndex index(bool ann) const {
        auto e = embed_catalog(data.items, retrieval, enc);
        return EmbeddingIndex::build(e.ids, e.vectors, e.dim, ann);
    }
};

// Scores every catalog item independently and applies the ordering rule.
std::vector<MatchEntry> global_rerank(const World& w, const Item& query, std::size_t k_final) {
    NoGradGuard no_grad;
    const Tensor rq = query_embedding(query.query_tokens, w.retrieval, w.enc);
    const Tensor lq = query_embedding(query.query_tokens, w.relevance, w.enc);
    std::vector<MatchEntry> all;
    for (const auto& it : w.data.items) {
        const Tensor ri = image_embedding(it.patches, w.retrieval, w.enc);
        double s = 0.0;
        for (std::size_t d = 0; d < w.enc.proj_dim; ++d) s += rq[d] * ri[d];
        const Tensor li = image_embedding(it.patches, w.relevance, w.enc);
        all.push_back({it.id, s, teacher_score(lq, li, &w.relevance)});
    }
    std::sort(all.begin(), all.end(), [](const MatchEntry& a, const MatchEntry& b) {
        if (a.relevance_score != b.relevance_score) return a.relevance_score > b.relevance_score;
        if (a.retrieval_score != b.retrieval_score) return a.retrieval_score > b.retrieval_score;
        return a.image_id < b.image_id;
    });
    all.resize(std::min(k_final, all.size()));
    return all;
}

bool same_entries(const std::vector<MatchEntry>& a, const std::vector<MatchEntry>& b, double tol) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].image_id != b[i].image_id) return false;
        if (std::abs(a[i].retrieval_score - b[i].retrieval_score) > tol) return false;
        if (std::abs(a[i].relevance_score - b[i].relevance_score) > tol) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("embed_catalog: empty catalog and determinism", "[pipeline]") {
    World w(12);
    const auto empty = embed_catalog(std::span<const Item>{}, w.retrieval, w.enc);
    CHECK(empty.ids.empty());
    CHECK(empty.dim == w.enc.proj_dim);
    const auto bytes = serialize_embeddings(empty);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "VLEB");
    CHECK(deserialize_embeddings(bytes) == empty);

    const auto a = embed_catalog(w.data.items, w.retrieval, w.enc);
    const auto b = embed_catalog(w.data.items, w.retrieval, w.enc);
    CHECK(serialize_embeddings(a) == serialize_embeddings(b));
    REQUIRE(a.ids.size() == 12);
    for (std::size_t i = 0; i < a.ids.size(); ++i) {
        double n = 0.0;
        for (std::size_t d = 0; d < a.dim; ++d) n += a.vectors[i * a.dim + d] * a.vectors[i * a.dim + d];
        CHECK_THAT(n, WithinAbs(1.0, 1e-12));
    }
}

TEST_CASE("embed_catalog: reloaded export re-scores identically", "[pipeline]") {
    World w(12);
    const auto e = embed_catalog(w.data.items, w.retrieval, w.enc);
    const auto back = deserialize_embeddings(serialize_embeddings(e));
    NoGradGuard no_grad;
    const Tensor q = query_embedding(w.data.items[0].query_tokens, w.retrieval, w.enc);
    for (std::size_t i = 0; i < e.ids.size(); ++i) {
        double a = 0.0, b = 0.0;
        for (std::size_t d = 0; d < e.dim; ++d) {
            a += q[d] * e.vectors[i * e.dim + d];
            b += q[d] * back.vectors[i * e.dim + d];
        }
        CHECK_THAT(a, WithinAbs(b, 1e-12));
    }
}

TEST_CASE("embed_catalog: mismatched checkpoint is a state error", "[pipeline]") {
    World w(8);
    auto wider = w.enc;
    wider.dim = 12;
    CHECK_THROWS_AS(embed_catalog(w.data.items, w.retrieval, wider), StateError);
    CHECK_THROWS_AS(Reranker(w.relevance, wider, w.data.items), StateError);
    const std::string_view towers[] = {groups::kVision, groups::kText, groups::kProjectionVision,
                                       groups::kProjectionText};
    const auto headless = w.relevance.subset(towers);
    CHECK_THROWS_AS(Reranker(headless, w.enc, w.data.items), StateError);
}

TEST_CASE("match: argument errors", "[pipeline]") {
    World w(10);
    const auto idx = w.index(false);
    const Reranker rr(w.relevance, w.enc, w.data.items);
    const auto& q = w.data.items[0].query_tokens;
    MatchOptions o;
    o.k_retrieve = 3;
    o.k_final = 4;
    CHECK_THROWS_AS(match(0, q, idx, w.retrieval, rr, w.enc, o), ParameterError);
    o.k_final = 0;
    CHECK_THROWS_AS(match(0, q, idx, w.retrieval, rr, w.enc, o), ParameterError);
    CHECK_THROWS_AS(match(0, q, EmbeddingIndex{}, w.retrieval, rr, w.enc), StateError);
    CHECK_THROWS_AS(rr.score(rr.query_embedding(q), 999), IndexError);
}

TEST_CASE("match: whole-catalog rerank equals the global oracle", "[pipeline]") {
    World w(40);
    const auto idx = w.index(false);
    const Reranker rr(w.relevance, w.enc, w.data.items);
    MatchOptions o;
    o.k_retrieve = w.data.items.size();
    o.use_ann = false;
    for (std::size_t k_final : {std::size_t{1}, std::size_t{5}, w.data.items.size()}) {
        o.k_final = k_final;
        for (std::size_t qi = 0; qi < w.data.items.size(); qi += 3) {
            const auto& item = w.data.items[qi];
            const auto res = match(item.id, item.query_tokens, idx, w.retrieval, rr, w.enc, o);
            CHECK(res.query_id == item.id);
            CHECK(same_entries(res.results, global_rerank(w, item, k_final), 1e-12));
        }
    }
}

TEST_CASE("match: k_final = 1 picks the best-relevance candidate", "[pipeline]") {
    World w(30);
    const auto idx = w.index(false);
    const Reranker rr(w.relevance, w.enc, w.data.items);
    MatchOptions o;
    o.k_retrieve = 10;
    o.use_ann = false;
    for (std::size_t qi = 0; qi < 10; ++qi) {
        const auto& item = w.data.items[qi];
        o.k_final = 10;
        const auto all = match(item.id, item.query_tokens, idx, w.retrieval, rr, w.enc, o).results;
        o.k_final = 1;
        const auto one = match(item.id, item.query_tokens, idx, w.retrieval, rr, w.enc, o).results;
        REQUIRE(one.size() == 1);
        double best = 0.0;
        for (const auto& e : all) best = std::max(best, e.relevance_score);
        CHECK(one[0].relevance_score == best);
        CHECK(one[0] == all[0]);
    }
}

TEST_CASE("match: equal relevance falls back to retrieval order", "[pipeline]") {
    World w(25);
    for (auto& [name, t] : w.relevance.group(groups::kRelevanceHead)) {
        for (auto& x : t.mutable_data()) x = 0.0;
    }
    const auto idx = w.index(false);
    const Reranker rr(w.relevance, w.enc, w.data.items);
    MatchOptions o;
    o.k_retrieve = 12;
    o.k_final = 12;
    o.use_ann = false;
    const auto& item = w.data.items[3];
    const auto res = match(item.id, item.query_tokens, idx, w.retrieval, rr, w.enc, o);
    NoGradGuard no_grad;
    const auto hits = idx.search_exact(query_embedding(item.query_tokens, w.retrieval, w.enc).data(), 12);
    REQUIRE(res.results.size() == hits.size());
    for (std::size_t i = 0; i < hits.size(); ++i) {
        CHECK(res.results[i].image_id == hits[i].id);
        CHECK(res.results[i].relevance_score == 0.5);
    }
}

TEST_CASE("match: results are stage-one candidates in final order", "[pipeline]") {
    World w(60);
    const auto idx = w.index(true);
    const Reranker rr(w.relevance, w.enc, w.data.items);
    MatchOptions o;
    o.k_retrieve = 15;
    o.k_final = 5;
    o.ef_search = 16;
    for (std::size_t qi = 0; qi < w.data.items.size(); qi += 4) {
        const auto& item = w.data.items[qi];
        const auto res = match(item.id, item.query_tokens, idx, w.retrieval, rr, w.enc, o);
        NoGradGuard no_grad;
        const auto q = query_embedding(item.query_tokens, w.retrieval, w.enc);
        std::set<std::uint64_t> candidates;
        for (const auto& h : idx.search_ann(q.data(), 15, 16)) candidates.insert(h.id);
        CHECK(res.results.size() == 5);
        for (std::size_t i = 0; i < res.results.size(); ++i) {
            CHECK(candidates.count(res.results[i].image_id) == 1);
            if (i > 0) {
                const auto& a = res.results[i - 1];
                const auto& b = res.results[i];
                CHECK((a.relevance_score > b.relevance_score ||
                       (a.relevance_score == b.relevance_score &&
                        (a.retrieval_score > b.retrieval_score ||
                         (a.retrieval_score == b.retrieval_score && a.image_id < b.image_id)))));
            }
        }
    }
}

TEST_CASE("match: top-1 relevance never drops as k_retrieve grows", "[pipeline]") {
    World w(50);
    const auto idx = w.index(false);
    const Reranker rr(w.relevance, w.enc, w.data.items);
    MatchOptions o;
    o.k_final = 1;
    o.use_ann = false;
    for (std::size_t qi = 0; qi < w.data.items.size(); qi += 5) {
        const auto& item = w.data.items[qi];
        double prev = -1.0;
        for (std::size_t k = 1; k <= w.data.items.size(); k += 7) {
            o.k_retrieve = k;
            const double top = match(item.id, item.query_tokens, idx, w.retrieval, rr, w.enc, o)
                                   .results.at(0)
                                   .relevance_score;
            CHECK(top >= prev);
            prev = top;
        }
    }
}

TEST_CASE("match: concurrent queries agree with serial ones", "[pipeline]") {
    World w(30);
    const auto idx = w.index(true);
    const Reranker rr(w.relevance, w.enc, w.data.items);
    std::vector<MatchResult> serial, parallel(w.data.items.size());
    for (const auto& it : w.data.items) serial.push_back(match(it.id, it.query_tokens, idx, w.retrieval, rr, w.enc));
    std::vector<std::thread> workers;
    for (std::size_t t = 0; t < 3; ++t) {
        workers.emplace_back([&, t] {
            for (std::size_t i = t; i < w.data.items.size(); i += 3) {
                const auto& it = w.data.items[i];
                parallel[i] = match(it.id, it.query_tokens, idx, w.retrieval, rr, w.enc);
            }
        });
    }
    for (auto& th : workers) th.join();
    CHECK(serial == parallel);
}

TEST_CASE("match report: JSON-lines round trip", "[pipeline]") {
    World w(20);
    const auto idx = w.index(true);
    const Reranker rr(w.relevance, w.enc, w.data.items);
    std::vector<MatchResult> results;
    for (std::size_t i = 0; i < 6; ++i) {
        const auto& it = w.data.items[i];
        results.push_back(match(it.id, it.query_tokens, idx, w.retrieval, rr, w.enc));
    }
    const auto text = match_report_jsonl(results);
    const auto first = nlohmann::json::parse(text.substr(0, text.find('\n')));
    CHECK(first.contains("query_id"));
    CHECK(first.at("results").at(0).contains("image_id"));
    CHECK(first.at("results").at(0).contains("retrieval_score"));
    CHECK(first.at("results").at(0).contains("relevance_score"));
    CHECK(first.at("timings_us").contains("retrieve"));
    CHECK(first.at("timings_us").contains("rerank"));

    const auto dir = fs::temp_directory_path() / "vlmatch_pipeline_io";
    fs::remove_all(dir);
    fs::create_directories(dir);
    write_match_report(results, dir / "m.jsonl");
    CHECK(read_match_report(dir / "m.jsonl") == results);
    {
        std::ofstream out(dir / "bad.jsonl");
        out << "{\"query_id\": 1, \"results\": [\n";
    }
    CHECK_THROWS_AS(read_match_report(dir / "bad.jsonl"), FormatError);
    fs::remove_all(dir);
}

TEST_CASE("sort_match_entries applies relevance, retrieval, id order", "[pipeline]") {
    std::vector<MatchEntry> e = {{4, 0.1, 0.5}, {2, 0.3, 0.5}, {9, 0.3, 0.5}, {1, 0.9, 0.2}, {7, 0.0, 0.9}};
    sort_match_entries(e);
    std::vector<std::uint64_t> ids;
    for (const auto& x : e) ids.push_back(x.image_id);
    CHECK(ids == std::vector<std::uint64_t>{7, 2, 9, 4, 1});
}
