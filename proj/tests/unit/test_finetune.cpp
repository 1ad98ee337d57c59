#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "support/gradcheck.hpp"
#include "vlmatch/error.hpp"
#include "vlmatch/finetune.hpp"
#include "vlmatch/pretrain.hpp"

using namespace vlmatch;
using Catch::Matchers::WithinAbs;

namespace {

std::vector<ClickExample> click_batch(const EncoderConfig& c, std::size_t b, Rng& rng) {
    std::vector<ClickExample> out;
    for (std::size_t i = 0; i < b; ++i) {
        std::vector<int> q(c.max_text_len);
        for (auto& t : q) t = kFirstWordToken + static_cast<int>(rng.below(c.vocab_size - 2));
        out.push_back({q, vltest::random_matrix(c.num_patches(), c.patch_dim, rng), 3});
    }
    return out;
}

std::vector<double> unit(std::vector<double> v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    for (auto& x : v) x /= std::sqrt(n);
    return v;
}

Tensor unit_rows(std::size_t b, std::size_t w, Rng& rng) {
    std::vector<double> v;
    for (std::size_t i = 0; i < b; ++i) {
        std::vector<double> r(w);
        for (auto& x : r) x = rng.normal();
        r = unit(r);
        v.insert(v.end(), r.begin(), r.end());
    }
    return Tensor::matrix(b, w, v);
}

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

}  // namespace

TEST_CASE("degree_to_label", "[finetune]") {
    CHECK(degree_to_label(0) == 0);
    CHECK(degree_to_label(1) == 1);
    CHECK(degree_to_label(2) == 1);
    CHECK_THROWS_AS(degree_to_label(3), ValidationError);
    CHECK_THROWS_AS(degree_to_label(-1), ValidationError);
}

TEST_CASE("relevance_logits examples", "[finetune]") {
    ParamGroup head;
    head.emplace("fc1.w", Tensor::zeros({6, 3}));
    head.emplace("fc1.b", Tensor::vector({0.4, -0.2, 0.9}));
    head.emplace("fc2.w", Tensor::zeros({3, 2}));
    head.emplace("fc2.b", Tensor::vector({0.25, -1.5}));
    const auto q = Tensor::vector({0.6, 0.8});
    const auto i = Tensor::vector({1.0, 0.0});
    const auto z = relevance_logits(q, i, head);
    CHECK(z[0] == 0.25);
    CHECK(z[1] == -1.5);

    // straight-line evaluation of W2^T gelu(W1^T [q; i; q*i] + b1) + b2
    const std::vector<double> w1{0.1, -0.3, 0.2, 0.5, 0.0, -0.1, -0.4, 0.2, 0.3,
                                 0.3, 0.1, -0.2, 0.0, 0.6, 0.1, -0.2, -0.5, 0.4};
    const std::vector<double> b1{0.05, -0.1, 0.2};
    const std::vector<double> w2{0.7, -0.3, -0.6, 0.2, 0.1, 0.9};
    const std::vector<double> b2{0.01, -0.02};
    head["fc1.w"] = Tensor::matrix(6, 3, w1);
    head["fc1.b"] = Tensor::vector(b1);
    head["fc2.w"] = Tensor::matrix(3, 2, w2);
    head["fc2.b"] = Tensor::vector(b2);
    const std::vector<double> f{0.6, 0.8, 1.0, 0.0, 0.6, 0.0};
    double h[3];
    for (int k = 0; k < 3; ++k) {
        double a = b1[k];
        for (int r = 0; r < 6; ++r) a += f[r] * w1[r * 3 + k];
        h[k] = gelu_ref(a);
    }
    const auto y = relevance_logits(q, i, head);
    for (int o = 0; o < 2; ++o) {
        double a = b2[o];
        for (int k = 0; k < 3; ++k) a += h[k] * w2[k * 2 + o];
        CHECK_THAT(y[o], WithinAbs(a, 1e-15));
    }
    CHECK_THROWS_AS(relevance_logits(q, Tensor::vector({1, 0, 0}), head), DimensionError);
}

TEST_CASE("relevance_loss examples", "[finetune]") {
    const auto c = vltest::tiny_config();
    auto p = vltest::tiny_model(c, 1);
    Rng rng(1);
    std::vector<RelevanceExample> batch;
    for (int d : {0, 1, 2, 0}) {
        batch.push_back({{2, 2}, vltest::random_matrix(c.num_patches(), c.patch_dim, rng), d});
    }
    auto& head = p.group(groups::kRelevanceHead);
    for (auto& [name, t] : head) {
        for (auto& x : t.mutable_data()) x = 0.0;
    }
    CHECK_THAT(relevance_loss(batch, p, c).item(), WithinAbs(std::log(2.0), 1e-12));

    // separated: bias +-1000 on the labelled class, one label per batch
    std::vector<RelevanceExample> pos{batch[1], batch[2]};
    head.at("fc2.b").mutable_data()[1] = 1000.0;
    head.at("fc2.b").mutable_data()[0] = -1000.0;
    CHECK(relevance_loss(pos, p, c).item() < 1e-12);

    CHECK_THROWS_AS(relevance_loss(std::span<const RelevanceExample>{}, p, c), ParameterError);
    batch[0].degree = 5;
    CHECK_THROWS_AS(relevance_loss(batch, p, c), ValidationError);
}

TEST_CASE("teacher score examples", "[finetune]") {
    CHECK(positive_probability(Tensor::vector({0, 0})) == 0.5);
    CHECK_THAT(positive_probability(Tensor::vector({-1000, 1000})), WithinAbs(1.0, 1e-15));
    CHECK_THAT(positive_probability(Tensor::vector({1, 2})), WithinAbs(1.0 / (1.0 + std::exp(-1.0)), 1e-15));
    CHECK_THAT(positive_probability(Tensor::vector({1, 2})), WithinAbs(0.7311, 1e-4));
    const auto c = vltest::tiny_config();
    const auto img = Tensor::zeros({c.num_patches(), c.patch_dim});
    CHECK_THROWS_AS(teacher_score(std::vector<int>{2}, img, nullptr, c), StateError);
    CHECK_THROWS_AS(teacher_score(Tensor::vector({1, 0}), Tensor::vector({1, 0}), nullptr), StateError);
}

TEST_CASE("click contrastive loss examples", "[finetune]") {
    const auto same = Tensor::matrix(4, 2, {1, 0, 1, 0, 1, 0, 1, 0});
    CHECK_THAT(click_contrastive_loss(same, same, 0.07).item(), WithinAbs(std::log(4.0), 1e-12));

    const auto q = Tensor::matrix(2, 2, {1, 0, 0, 1});
    const auto i = Tensor::matrix(2, 2, {1, 0, 0, 1});
    CHECK(click_contrastive_loss(q, i, 0.01).item() < 1e-40);
    const auto anti = Tensor::matrix(2, 2, {1, 0, -1, 0});
    CHECK(click_contrastive_loss(anti, anti, 0.01).item() < 1e-40);

    CHECK_THROWS_AS(click_contrastive_loss(Tensor::matrix(1, 2, {1, 0}), Tensor::matrix(1, 2, {1, 0}), 0.07),
                    ParameterError);
    CHECK_THROWS_AS(click_contrastive_loss(q, Tensor::zeros({2, 3}), 0.07), DimensionError);
}

TEST_CASE("click contrastive loss matches a double-loop oracle", "[finetune]") {
    Rng rng(2);
    const std::size_t b = 5;
    const auto q = unit_rows(b, 3, rng);
    const auto i = unit_rows(b, 3, rng);
    const double tau = 0.2;
    const auto s = [&](std::size_t a, std::size_t c) {
        double d = 0.0;
        for (std::size_t k = 0; k < 3; ++k) d += q.at(a, k) * i.at(c, k);
        return d / tau;
    };
    double q2i = 0.0, i2q = 0.0;
    for (std::size_t a = 0; a < b; ++a) {
        double zr = 0.0, zc = 0.0;
        for (std::size_t c = 0; c < b; ++c) {
            zr += std::exp(s(a, c));
            zc += std::exp(s(c, a));
        }
        q2i += std::log(zr) - s(a, a);
        i2q += std::log(zc) - s(a, a);
    }
    CHECK_THAT(click_contrastive_loss(q, i, tau).item(), WithinAbs((q2i + i2q) / (2.0 * b), 1e-12));
}

TEST_CASE("click contrastive loss is permutation invariant", "[finetune][property]") {
    Rng rng(3);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t b = 2 + rng.below(6);
        const auto q = unit_rows(b, 4, rng);
        const auto i = unit_rows(b, 4, rng);
        std::vector<std::size_t> perm(b);
        for (std::size_t k = 0; k < b; ++k) perm[k] = k;
        rng.shuffle(std::span(perm));
        std::vector<double> qp, ip;
        for (const auto k : perm) {
            for (std::size_t j = 0; j < 4; ++j) {
                qp.push_back(q.at(k, j));
                ip.push_back(i.at(k, j));
            }
        }
        CHECK_THAT(click_contrastive_loss(Tensor::matrix(b, 4, qp), Tensor::matrix(b, 4, ip), 0.1).item(),
                   WithinAbs(click_contrastive_loss(q, i, 0.1).item(), 1e-12));
    }
}

TEST_CASE("kd loss examples", "[finetune]") {
    const double one[] = {1.0};
    const double quarter[] = {0.25};
    CHECK(kd_loss(Tensor::vector({1.0}), one).item() == 0.0);
    CHECK(kd_loss(Tensor::vector({-1.0}), one).item() == 1.0);
    CHECK_THAT(kd_loss(Tensor::vector({0.0}), quarter).item(), WithinAbs(0.0625, 1e-15));
    CHECK_THROWS_AS(kd_loss(Tensor::vector({1.5}), one), ValidationError);
    const double bad[] = {1.2};
    CHECK_THROWS_AS(kd_loss(Tensor::vector({0.5}), bad), ValidationError);
    CHECK_THROWS_AS(kd_loss(Tensor::vector({0.5, 0.1}), one), DimensionError);
}

TEST_CASE("kd loss lies in [0,1] and vanishes only at agreement", "[finetune][property]") {
    Rng rng(4);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 1 + rng.below(8);
        std::vector<double> s(n), p(n);
        for (auto& x : s) x = rng.uniform() * 2.0 - 1.0;
        for (auto& x : p) x = rng.uniform();
        const double l = kd_loss(Tensor::vector(s), p).item();
        CHECK(l >= 0.0);
        CHECK(l <= 1.0);
        CHECK(l > 0.0);
        for (std::size_t k = 0; k < n; ++k) p[k] = s[k] * 0.5 + 0.5;
        CHECK(kd_loss(Tensor::vector(s), p).item() == 0.0);
    }
}

TEST_CASE("multitask loss identities", "[finetune]") {
    EncoderConfig c = vltest::tiny_config();
    c.max_text_len = 3;
    c.vocab_size = 6;
    const auto student = vltest::tiny_model(c, 5);
    const auto teacher = vltest::tiny_model(c, 6);
    Rng rng(5);
    const auto batch = click_batch(c, 4, rng);
    const double contrastive = click_contrastive_loss(batch, student, c, 0.1).item();

    const auto zero = multitask_loss(batch, student, &teacher, c, 0.1, 0.0);
    CHECK(zero.total.item() == contrastive);
    CHECK(multitask_loss(batch, student, nullptr, c, 0.1, 0.0).total.item() == contrastive);

    std::vector<double> agree;
    {
        NoGradGuard guard;
        std::vector<Tensor> qs, is;
        for (const auto& ex : batch) {
            qs.push_back(query_embedding(ex.query, student, c));
            is.push_back(image_embedding(ex.image, student, c));
        }
        for (const auto& q : qs) {
            for (const auto& i : is) agree.push_back(dot(q, i).item() * 0.5 + 0.5);
        }
    }
    for (double lambda : {0.5, 1.0, 2.0}) {
        const auto m = multitask_loss(batch, student, nullptr, c, 0.1, lambda, agree);
        CHECK(m.kd.item() < 1e-30);
        CHECK_THAT(m.total.item(), WithinAbs(contrastive, 1e-15));
    }

    // precomputed scores equal the teacher's own B x B matrix
    const auto tm = teacher_matrix(batch, &teacher, c);
    REQUIRE(tm.size() == 16);
    CHECK(tm[1 * 4 + 2] == teacher_score(batch[1].query, batch[2].image, &teacher, c));
    CHECK(multitask_loss(batch, student, &teacher, c, 0.1, 1.0).total.item() ==
          multitask_loss(batch, student, nullptr, c, 0.1, 1.0, tm).total.item());

    CHECK_THROWS_AS(multitask_loss(batch, student, nullptr, c, 0.1, 1.0), StateError);
    CHECK_THROWS_AS(multitask_loss(batch, student, &teacher, c, 0.1, -1.0), ParameterError);
    CHECK_THROWS_AS(multitask_loss(std::span(batch).first(1), student, &teacher, c, 0.1, 1.0), ParameterError);
}

TEST_CASE("teacher receives no gradient from multitask training", "[finetune][property]") {
    EncoderConfig c = vltest::tiny_config();
    c.max_text_len = 3;
    c.vocab_size = 6;
    auto student = vltest::tiny_model(c, 7);
    auto teacher = vltest::tiny_model(c, 8);
    Rng rng(7);
    const auto batch = click_batch(c, 4, rng);
    teacher.zero_grad();
    multitask_loss(batch, student, &teacher, c, 0.1, 1.0).total.backward();
    for (const auto& [name, t] : teacher.flat()) {
        for (double g : t.grad()) CHECK(g == 0.0);
    }
    double s = 0.0;
    for (const auto& [name, t] : student.flat()) {
        for (double g : t.grad()) s += std::abs(g);
    }
    CHECK(s > 0.0);
}

TEST_CASE("fine-tuning losses pass finite-difference checks", "[finetune][gradcheck]") {
    EncoderConfig c = vltest::tiny_config();
    auto p = vltest::tiny_model(c, 9);
    const auto teacher = vltest::tiny_model(c, 10);
    Rng rng(9);
    const auto clicks = click_batch(c, 3, rng);
    std::vector<RelevanceExample> rel;
    for (int d : {0, 2, 1}) {
        rel.push_back({{2, 2}, vltest::random_matrix(c.num_patches(), c.patch_dim, rng), d});
    }
    rel[1].query = {2, 0};
    const auto groups = vltest::groups_of(p, {"text", "vision", "projection_text",
                                              "projection_vision", "relevance_head"});
    const auto tower = vltest::groups_of(p, {"text", "vision", "projection_text", "projection_vision"});
    const auto tm = teacher_matrix(clicks, &teacher, c);

    const auto run = [](const char* name, const std::function<Tensor()>& f, const vltest::Named& params) {
        INFO(name);
        const auto r = vltest::check_gradients(f, params);
        INFO(r.worst);
        CHECK(r.max_rel_error < 1e-5);
    };
    run("relevance", [&] { return relevance_loss(rel, p, c); }, groups);
    run("click", [&] { return click_contrastive_loss(clicks, p, c, 0.3); }, tower);
    run("kd", [&] {
        std::vector<Tensor> qs, is;
        for (const auto& ex : clicks) {
            qs.push_back(query_embedding(ex.query, p, c));
            is.push_back(image_embedding(ex.image, p, c));
        }
        return kd_loss(reshape(matmul_nt(stack_rows(qs), stack_rows(is)), {9}), tm);
    }, tower);
    run("multitask", [&] { return multitask_loss(clicks, p, &teacher, c, 0.3, 1.0).total; }, tower);
}
