#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "vlmatch/error.hpp"
#include "vlmatch/eval.hpp"
#include "vlmatch/finetune.hpp"
#include "vlmatch/metrics.hpp"

using namespace vlmatch;
using Catch::Matchers::WithinAbs;

namespace {

double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
    double num = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (y[i] != 1) continue;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (y[j] != 0) continue;
            ++pairs;
            if (s[i] > s[j]) num += 1.0;
            else if (s[i] == s[j]) num += 0.5;
        }
    }
    return num / static_cast<double>(pairs);
}

DegreeLookup table(std::map<std::pair<std::uint64_t, std::uint64_t>, int> t) {
    return [t = std::move(t)](std::uint64_t q, std::uint64_t i) -> std::optional<int> {
        const auto it = t.find({q, i});
        if (it == t.end()) return std::nullopt;
        return it->second;
    };
}

}  // namespace

TEST_CASE("recall_at_k: examples", "[metrics]") {
    const std::vector<std::vector<std::uint64_t>> firsts = {{3, 1}, {5}, {9, 8, 7}};
    const std::vector<std::uint64_t> truth = {3, 5, 9};
    for (std::size_t k : {1, 5, 10}) CHECK(recall_at_k(firsts, truth, k) == 1.0);
    const std::vector<std::uint64_t> absent = {100, 101, 102};
    for (std::size_t k : {1, 5, 10}) CHECK(recall_at_k(firsts, absent, k) == 0.0);

    std::vector<std::vector<std::uint64_t>> ranks(3);
    for (std::uint64_t i = 0; i < 15; ++i) {
        for (auto& r : ranks) r.push_back(1000 + i);
    }
    ranks[0][0] = 7;
    ranks[1][5] = 7;
    ranks[2][11] = 7;
    const std::vector<std::uint64_t> seven = {7, 7, 7};
    CHECK_THAT(recall_at_k(ranks, seven, 1), WithinAbs(1.0 / 3.0, 1e-15));
    CHECK_THAT(recall_at_k(ranks, seven, 5), WithinAbs(1.0 / 3.0, 1e-15));
    CHECK_THAT(recall_at_k(ranks, seven, 10), WithinAbs(2.0 / 3.0, 1e-15));

    const std::vector<std::uint64_t> short_truth = {3, 5};
    CHECK_THROWS_AS(recall_at_k(firsts, short_truth, 1), ValidationError);
    CHECK_THROWS_AS(recall_at_k(firsts, truth, 0), ParameterError);
}

TEST_CASE("recall_at_k: direct count oracle and monotone in K", "[metrics]") {
    Rng rng(1);
    std::vector<std::vector<std::uint64_t>> ranks(200);
    std::vector<std::uint64_t> truth(200);
    for (std::size_t q = 0; q < ranks.size(); ++q) {
        for (std::uint64_t i = 0; i < 30; ++i) ranks[q].push_back(i);
        for (std::size_t i = 29; i > 0; --i) std::swap(ranks[q][i], ranks[q][rng.below(i + 1)]);
        truth[q] = rng.below(40);
    }
    double prev = 0.0;
    for (std::size_t k = 1; k <= 35; ++k) {
        std::size_t hits = 0;
        for (std::size_t q = 0; q < ranks.size(); ++q) {
            const auto end = ranks[q].begin() + static_cast<std::ptrdiff_t>(std::min(k, ranks[q].size()));
            hits += std::find(ranks[q].begin(), end, truth[q]) != end;
        }
        const double r = recall_at_k(ranks, truth, k);
        CHECK(r == static_cast<double>(hits) / 200.0);
        CHECK(r >= prev);
        prev = r;
    }
}

TEST_CASE("auc: examples", "[metrics]") {
    CHECK(auc(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0}) == 1.0);
    CHECK(auc(std::vector<double>{0.3, 0.3, 0.3, 0.3}, std::vector<int>{1, 0, 1, 0}) == 0.5);
    CHECK(auc(std::vector<double>{0.8, 0.6, 0.6, 0.2}, std::vector<int>{1, 0, 1, 0}) == 0.875);
    CHECK_THROWS_AS(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), ValidationError);
    CHECK_THROWS_AS(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 2}), ValidationError);
    CHECK_THROWS_AS(auc(std::vector<double>{0.1}, std::vector<int>{1, 0}), ValidationError);
}

TEST_CASE("auc: pairwise enumeration oracle", "[metrics]") {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 2 + rng.below(60);
        std::vector<double> s(n);
        std::vector<int> y(n);
        const bool coarse = trial % 2 == 0;
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = coarse ? static_cast<double>(rng.below(5)) : rng.normal();
            y[i] = static_cast<int>(rng.below(2));
        }
        y[0] = 1;
        y[1] = 0;
        CHECK_THAT(auc(s, y), WithinAbs(pairwise_auc(s, y), 1e-12));
    }
}

TEST_CASE("auc: monotone transforms and score negation", "[metrics]") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> s(40), t(40), neg(40);
        std::vector<int> y(40);
        for (std::size_t i = 0; i < s.size(); ++i) {
            s[i] = rng.normal();
            t[i] = std::exp(3.0 * s[i]) + 7.0;
            neg[i] = -s[i];
            y[i] = i % 3 == 0 ? 1 : 0;
        }
        const double a = auc(s, y);
        CHECK(auc(t, y) == a);
        CHECK_THAT(a + auc(neg, y), WithinAbs(1.0, 1e-12));
    }
}

TEST_CASE("diversity_ratio: examples and set oracle", "[metrics]") {
    std::vector<std::uint64_t> catalog(10);
    for (std::uint64_t i = 0; i < 10; ++i) catalog[i] = i;
    CHECK_THAT(diversity_ratio({{0, 1}, {2, 3}}, catalog), WithinAbs(0.4, 1e-15));
    CHECK_THAT(diversity_ratio({{4}, {4}, {4}}, catalog), WithinAbs(0.1, 1e-15));
    CHECK(diversity_ratio({{0, 1, 2, 3, 4}, {5, 6, 7, 8, 9}}, catalog) == 1.0);
    CHECK_THROWS_AS(diversity_ratio({{0, 11}}, catalog), ValidationError);

    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<std::vector<std::uint64_t>> r(1 + rng.below(8));
        std::set<std::uint64_t> u;
        for (auto& list : r) {
            for (std::size_t j = 0; j < 1 + rng.below(5); ++j) {
                list.push_back(rng.below(10));
                u.insert(list.back());
            }
        }
        const double d = diversity_ratio(r, catalog);
        CHECK(d == static_cast<double>(u.size()) / 10.0);
        CHECK(d > 0.0);
        CHECK(d <= 1.0);
        std::reverse(r.begin(), r.end());
        CHECK(diversity_ratio(r, catalog) == d);
    }
}

TEST_CASE("irrelevant_ratio and relscore: examples", "[metrics]") {
    const auto deg = table({{{1, 10}, 0}, {{1, 11}, 1}, {{1, 12}, 2}, {{1, 13}, 0}, {{2, 20}, 2}, {{2, 21}, 2}});
    CHECK(irrelevant_ratio({{1, {10, 11, 12, 13}}}, deg) == 0.5);
    CHECK(irrelevant_ratio({{1, {11, 12}}, {2, {20}}}, deg) == 0.0);
    CHECK(irrelevant_ratio({{1, {10, 13}}}, deg) == 1.0);
    CHECK_THROWS_AS(irrelevant_ratio({{1, {99}}}, deg), ValidationError);

    const auto rel = table({{{1, 10}, 2}, {{1, 11}, 1}, {{1, 12}, 0}, {{1, 13}, 1}, {{2, 20}, 2}, {{2, 21}, 2}});
    CHECK(relscore_at_k({{1, {10, 11, 12, 13}}}, rel, 4) == 1.0);
    CHECK(relscore_at_k({{2, {20, 21}}}, rel, 2) == 2.0);
    CHECK(relscore_at_k({{1, {10, 11, 12, 13}}}, rel, 2) == 1.5);
    CHECK_THROWS_AS(relscore_at_k({{1, {10, 77}}}, rel, 2), ValidationError);
    CHECK_THROWS_AS(relscore_at_k({{1, {10}}}, rel, 0), ParameterError);
}

TEST_CASE("irrelevant_ratio and relscore: direct count oracles", "[metrics]") {
    Rng rng(5);
    std::map<std::pair<std::uint64_t, std::uint64_t>, int> degrees;
    std::vector<RankedQuery> results;
    for (std::uint64_t q = 0; q < 30; ++q) {
        RankedQuery r{q, {}};
        const std::size_t len = 1 + rng.below(15);
        for (std::uint64_t i = 0; i < len; ++i) {
            r.image_ids.push_back(100 + i);
            degrees[{q, 100 + i}] = static_cast<int>(rng.below(3));
        }
        results.push_back(r);
    }
    const auto lookup = table(degrees);
    std::size_t zero = 0, total = 0;
    double rel_sum = 0.0;
    for (const auto& r : results) {
        double s = 0.0;
        std::size_t n = 0;
        for (std::size_t j = 0; j < r.image_ids.size(); ++j) {
            const int d = degrees.at({r.query_id, r.image_ids[j]});
            zero += d == 0;
            ++total;
            if (j < 10) {
                s += d;
                ++n;
            }
        }
        rel_sum += s / static_cast<double>(n);
    }
    CHECK_THAT(irrelevant_ratio(results, lookup), WithinAbs(static_cast<double>(zero) / static_cast<double>(total), 1e-15));
    const double rs = relscore_at_k(results, lookup, 10);
    CHECK_THAT(rs, WithinAbs(rel_sum / 30.0, 1e-12));
    CHECK(rs >= 0.0);
    CHECK(rs <= 2.0);
    std::reverse(results.begin(), results.end());
    CHECK_THAT(relscore_at_k(results, lookup, 10), WithinAbs(rs, 1e-12));
}

TEST_CASE("eval config: validation and JSON", "[metrics]") {
    EvalConfig c;
    CHECK_NOTHROW(c.validate());
    c.ks = {5, 1};
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c.ks = {};
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = EvalConfig{};
    c.top_m = 0;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = EvalConfig{};
    c.ks = {2, 4};
    c.top_m = 7;
    const auto back = EvalConfig::from_json(c.to_json());
    CHECK(back.ks == c.ks);
    CHECK(back.top_m == 7);
}

TEST_CASE("evaluate_retrieval: matches a brute-force ranking oracle", "[metrics]") {
    GenConfig gen;
    gen.n_items = 60;
    gen.seed = 7;
    gen.click_candidates = 10;
    gen.relevance_per_query = 4;
    const auto data = generate_dataset(gen);
    EncoderConfig small;
    small.dim = 8;
    small.layers = 1;
    small.heads = 2;
    small.ffn_dim = 16;
    small.proj_dim = 8;
    small.relevance_hidden = 8;
    small.init_std = 0.3;
    const auto enc = encoder_config_for(gen, small);
    Rng rng(8);
    const auto model = init_model(enc, rng);
    EvalConfig ec;
    ec.top_m = 6;
    ec.relscore_k = 4;
    const auto m = evaluate_retrieval(data, model, enc, ec);

    const auto score = cosine_scorer(model, enc, data);
    std::map<std::uint64_t, std::vector<std::uint64_t>> ranking;
    for (const auto q : heldout_queries(data)) {
        std::vector<std::uint64_t> ids(data.items.size());
        for (std::uint64_t i = 0; i < ids.size(); ++i) ids[i] = i;
        std::sort(ids.begin(), ids.end(), [&](std::uint64_t a, std::uint64_t b) {
            const double sa = score(q, a), sb = score(q, b);
            return sa != sb ? sa > sb : a < b;
        });
        ranking[q] = ids;
    }
    REQUIRE(m.queries == ranking.size());

    std::map<std::size_t, std::size_t> hits;
    std::size_t pairs = 0;
    for (const auto& c : data.clicks) {
        if (!ranking.count(c.query_id)) continue;
        ++pairs;
        const auto& r = ranking[c.query_id];
        const auto pos = static_cast<std::size_t>(std::find(r.begin(), r.end(), c.image_id) - r.begin());
        for (auto k : ec.ks) hits[k] += pos < k;
    }
    CHECK(m.click_pairs == pairs);
    for (auto k : ec.ks) {
        CHECK_THAT(m.recall.at(k), WithinAbs(static_cast<double>(hits[k]) / static_cast<double>(pairs), 1e-12));
    }

    std::set<std::uint64_t> seen;
    std::size_t zero = 0, returned = 0;
    double rel = 0.0;
    for (const auto& [q, r] : ranking) {
        double s = 0.0;
        for (std::size_t j = 0; j < ec.top_m; ++j) {
            seen.insert(r[j]);
            zero += data.degree(q, r[j]) == 0;
            ++returned;
            if (j < ec.relscore_k) s += data.degree(q, r[j]);
        }
        rel += s / static_cast<double>(ec.relscore_k);
    }
    CHECK_THAT(m.diversity_ratio, WithinAbs(static_cast<double>(seen.size()) / 60.0, 1e-12));
    CHECK_THAT(m.irrelevant_ratio, WithinAbs(static_cast<double>(zero) / static_cast<double>(returned), 1e-12));
    CHECK_THAT(m.relscore, WithinAbs(rel / static_cast<double>(ranking.size()), 1e-12));

    const auto j = m.to_json(ec);
    CHECK(j.contains("recall@10"));
    CHECK(j.contains("relscore@4"));
}

TEST_CASE("evaluate_matches and held-out AUC", "[metrics]") {
    GenConfig gen;
    gen.n_items = 30;
    gen.seed = 9;
    gen.click_candidates = 8;
    gen.relevance_per_query = 4;
    const auto data = generate_dataset(gen);

    // Scoring by the latent cosine itself is a perfect ranker.
    const PairScorer truth = [&](std::uint64_t q, std::uint64_t i) {
        return latent_cosine(data.items[q].latent, data.items[i].latent);
    };
    const double a = heldout_relevance_auc(data, truth);
    CHECK(a == 1.0);
    const PairScorer flat = [](std::uint64_t, std::uint64_t) { return 0.0; };
    CHECK(heldout_relevance_auc(data, flat) == 0.5);

    std::vector<MatchResult> results;
    for (const auto q : heldout_queries(data)) {
        MatchResult r{q, {}, 0, 0};
        for (std::uint64_t i = 0; i < 3; ++i) r.results.push_back({(q + i) % 30, 0.0, 0.0});
        results.push_back(r);
    }
    EvalConfig ec;
    const auto m = evaluate_matches(results, data, ec);
    CHECK(m.queries == results.size());
    results.push_back(results.front());
    CHECK_THROWS_AS(evaluate_matches(results, data, ec), ValidationError);
    CHECK_THROWS_AS(evaluate_matches({}, data, ec), ValidationError);
    CHECK(heldout_queries(data, 2).size() == 2);
}
