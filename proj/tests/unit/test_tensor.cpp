#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "support/gradcheck.hpp"
#include "vlmatch/error.hpp"
#include "vlmatch/tensor.hpp"

using namespace vlmatch;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("matmul examples", "[tensor]") {
    const auto eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
    CHECK(values(matmul(eye, eye)) == values(eye));

    const auto a = Tensor::matrix(2, 3, {1, -2, 3, 0.5, 4, -1});
    const auto z = matmul(a, Tensor::zeros({3, 4}));
    CHECK(z.shape() == Shape{2, 4});
    for (double v : z.data()) CHECK(v == 0.0);

    const auto p = matmul(Tensor::matrix(2, 2, {1, 2, 3, 4}), Tensor::matrix(2, 2, {5, 6, 7, 8}));
    CHECK(values(p) == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("matmul rejects mismatched shapes and names both", "[tensor]") {
    const auto a = Tensor::zeros({2, 3});
    const auto b = Tensor::zeros({2, 3});
    CHECK_THROWS_AS(matmul(a, b), DimensionError);
    try {
        matmul(a, b);
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
    }
}

TEST_CASE("matmul_nt equals matmul with an explicit transpose", "[tensor]") {
    Rng rng(4);
    const auto a = vltest::random_matrix(3, 5, rng);
    const auto b = vltest::random_matrix(4, 5, rng);
    const auto x = matmul_nt(a, b);
    const auto y = matmul(a, transpose(b));
    for (std::size_t i = 0; i < x.size(); ++i) CHECK_THAT(x[i], WithinAbs(y[i], 1e-14));
}

TEST_CASE("softmax examples", "[tensor]") {
    const auto u = softmax(Tensor::vector({0, 0, 0}), 0);
    for (double v : u.data()) CHECK_THAT(v, WithinAbs(1.0 / 3.0, 1e-15));

    const auto big = softmax(Tensor::vector({500.0, 1500.0}), 0);
    CHECK(std::isfinite(big[0]));
    CHECK_THAT(big[0], WithinAbs(0.0, 1e-300));
    CHECK_THAT(big[1], WithinAbs(1.0, 1e-15));

    const auto q = softmax(Tensor::vector({0.0, std::log(3.0)}), 0);
    CHECK_THAT(q[0], WithinAbs(0.25, 1e-15));
    CHECK_THAT(q[1], WithinAbs(0.75, 1e-15));

    CHECK_THROWS_AS(softmax(Tensor::vector({1, 2}), 1), DimensionError);
    CHECK_THROWS_AS(softmax(Tensor::zeros({2, 2}), -3), DimensionError);
}

TEST_CASE("softmax rows sum to one for large inputs", "[tensor][property]") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t rows = 1 + rng.below(6), cols = 1 + rng.below(9);
        std::vector<double> v(rows * cols);
        for (auto& x : v) x = (rng.uniform() * 2.0 - 1.0) * 1e4;
        const auto s = softmax(Tensor::matrix(rows, cols, v), 1);
        for (std::size_t r = 0; r < rows; ++r) {
            double total = 0.0;
            for (std::size_t c = 0; c < cols; ++c) total += s.at(r, c);
            CHECK_THAT(total, WithinAbs(1.0, 1e-12));
        }
        const auto t = softmax(Tensor::matrix(rows, cols, v), 0);
        for (std::size_t c = 0; c < cols; ++c) {
            double total = 0.0;
            for (std::size_t r = 0; r < rows; ++r) total += t.at(r, c);
            CHECK_THAT(total, WithinAbs(1.0, 1e-12));
        }
    }
}

TEST_CASE("layer_norm examples", "[tensor]") {
    const auto ones = Tensor::vector({1, 1});
    const auto zeros = Tensor::vector({0, 0});
    const auto flat = layer_norm(Tensor::matrix(1, 2, {3, 3}), ones, zeros, 1e-5);
    CHECK(flat[0] == 0.0);
    CHECK(flat[1] == 0.0);

    const auto unit = layer_norm(Tensor::matrix(1, 2, {1, -1}), ones, zeros, 1e-300);
    CHECK_THAT(unit[0], WithinAbs(1.0, 1e-15));
    CHECK_THAT(unit[1], WithinAbs(-1.0, 1e-15));

    // mean 2, biased variance 2/3: outputs are (x - 2) / sqrt(2/3 + eps)
    const double eps = 1e-5;
    const auto y = layer_norm(Tensor::matrix(1, 3, {1, 2, 3}), Tensor::vector({1, 1, 1}),
                              Tensor::vector({0, 0, 0}), eps);
    const double sd = std::sqrt(2.0 / 3.0 + eps);
    CHECK_THAT(y[0], WithinAbs(-1.0 / sd, 1e-12));
    CHECK_THAT(y[1], WithinAbs(0.0, 1e-12));
    CHECK_THAT(y[2], WithinAbs(1.0 / sd, 1e-12));
    const double mean = (y[0] + y[1] + y[2]) / 3.0;
    const double var = (y[0] * y[0] + y[1] * y[1] + y[2] * y[2]) / 3.0 - mean * mean;
    CHECK_THAT(mean, WithinAbs(0.0, 1e-9));
    CHECK_THAT(var * (2.0 / 3.0 + eps) / (2.0 / 3.0), WithinAbs(1.0, 1e-9));

    CHECK_THROWS_AS(layer_norm(Tensor::matrix(1, 2, {1, 2}), ones, zeros, 0.0), ParameterError);
    CHECK_THROWS_AS(layer_norm(Tensor::matrix(1, 2, {1, 2}), ones, zeros, -1.0), ParameterError);
}

TEST_CASE("cross_entropy examples", "[tensor]") {
    const std::size_t t0[] = {0};
    const std::size_t t1[] = {1};
    const std::size_t t2[] = {2};
    CHECK_THAT(cross_entropy(Tensor::vector({0, 0}), t0).item(), WithinAbs(std::log(2.0), 1e-15));
    CHECK_THAT(cross_entropy(Tensor::vector({0, 0}), t1).item(), WithinAbs(std::log(2.0), 1e-15));
    CHECK_THAT(cross_entropy(Tensor::vector({1000, -1000}), t0).item(), WithinAbs(0.0, 1e-300));

    const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
    const double ce = cross_entropy(Tensor::vector({1, 2, 3}), t2).item();
    CHECK_THAT(ce, WithinAbs(lse - 3.0, 1e-14));
    CHECK_THAT(ce, WithinAbs(0.40761, 1e-5));

    const std::size_t bad[] = {3};
    CHECK_THROWS_AS(cross_entropy(Tensor::vector({1, 2, 3}), bad), IndexError);
}

TEST_CASE("cosine_similarity examples", "[tensor]") {
    const auto u = Tensor::vector({0.3, -1.2, 2.0});
    CHECK_THAT(cosine_similarity(u, u).item(), WithinAbs(1.0, 1e-15));
    CHECK_THAT(cosine_similarity(u, u * -1.0).item(), WithinAbs(-1.0, 1e-15));
    CHECK_THAT(cosine_similarity(Tensor::vector({1, 0}), Tensor::vector({1, 1})).item(),
               WithinAbs(std::sqrt(2.0) / 2.0, 1e-15));
    CHECK_THROWS_AS(cosine_similarity(Tensor::vector({0, 0}), Tensor::vector({1, 1})),
                    DegenerateInputError);
    CHECK_THROWS_AS(cosine_similarity(Tensor::vector({1, 0}), Tensor::vector({1, 1, 1})),
                    DimensionError);
}

TEST_CASE("cosine_similarity is scale invariant", "[tensor][property]") {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.below(8);
        std::vector<double> a(n), b(n);
        for (auto& x : a) x = rng.normal();
        for (auto& x : b) x = rng.normal();
        const double alpha = std::exp(rng.normal() * 3.0), beta = std::exp(rng.normal() * 3.0);
        const auto u = Tensor::vector(a), v = Tensor::vector(b);
        CHECK_THAT(cosine_similarity(u * alpha, v * beta).item(),
                   WithinAbs(cosine_similarity(u, v).item(), 1e-12));
    }
}

TEST_CASE("backward examples", "[tensor]") {
    auto p = Tensor::parameter({3}, {0.5, -2.0, 7.0});
    sum(p).backward();
    CHECK(values(Tensor::from({3}, {p.grad().begin(), p.grad().end()})) ==
          std::vector<double>{1, 1, 1});

    p.zero_grad();
    dot(p, p).backward();
    CHECK(p.grad()[0] == 1.0);
    CHECK(p.grad()[1] == -4.0);
    CHECK(p.grad()[2] == 14.0);

    CHECK_THROWS_AS((p * 2.0).backward(), DimensionError);
}

TEST_CASE("backward consumes its graph", "[tensor]") {
    auto p = Tensor::parameter({2}, {1.0, 2.0});
    const auto loss = dot(p, p);
    loss.backward();
    CHECK_THROWS_AS(loss.backward(), StateError);
    CHECK(p.grad()[0] == 2.0);
}

TEST_CASE("leaf gradients accumulate across graphs until zero_grad", "[tensor]") {
    auto p = Tensor::parameter({2}, {1.0, 2.0});
    sum(p).backward();
    sum(p * 3.0).backward();
    CHECK(p.grad()[0] == 4.0);
    p.zero_grad();
    CHECK(p.grad()[0] == 0.0);
}

TEST_CASE("no-grad mode records nothing", "[tensor]") {
    auto p = Tensor::parameter({2}, {1.0, 2.0});
    Tensor y;
    {
        NoGradGuard guard;
        CHECK_FALSE(grad_recording_enabled());
        y = sum(p * p);
    }
    CHECK(grad_recording_enabled());
    CHECK_FALSE(y.requires_grad());
    CHECK(y.item() == 5.0);
}

TEST_CASE("only bias broadcasting is supported", "[tensor]") {
    const auto x = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
    const auto y = add_bias(x, Tensor::vector({10, 20, 30}));
    CHECK(values(y) == std::vector<double>{11, 22, 33, 14, 25, 36});
    CHECK_THROWS_AS(add_bias(x, Tensor::vector({1, 2})), DimensionError);
    CHECK_THROWS_AS(add(x, Tensor::vector({1, 2, 3})), DimensionError);
    CHECK_THROWS_AS(mul(x, Tensor::zeros({3, 2})), DimensionError);
}

TEST_CASE("embedding rejects ids outside the table", "[tensor]") {
    const auto table = Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6});
    const int ok[] = {2, 0};
    CHECK(values(embedding(table, ok)) == std::vector<double>{5, 6, 1, 2});
    const int bad[] = {3};
    CHECK_THROWS_AS(embedding(table, bad), IndexError);
    const int neg[] = {-1};
    CHECK_THROWS_AS(embedding(table, neg), IndexError);
}

TEST_CASE("every op passes a finite-difference check", "[tensor][gradcheck]") {
    Rng rng(17);
    auto a = vltest::random_parameter({3, 4}, rng);
    auto b = vltest::random_parameter({4, 2}, rng);
    auto c = vltest::random_parameter({3, 4}, rng);
    auto v = vltest::random_parameter({4}, rng);
    auto w = vltest::random_parameter({4}, rng);
    auto gain = vltest::random_parameter({4}, rng);
    auto bias = vltest::random_parameter({4}, rng);
    auto table = vltest::random_parameter({5, 4}, rng);
    auto lb = vltest::random_parameter({2}, rng);
    const auto probe = vltest::random_matrix(3, 4, rng);
    const auto probe2 = vltest::random_matrix(3, 2, rng);
    const auto probe_t = vltest::random_matrix(4, 3, rng);
    const int ids[] = {4, 1, 1};
    const std::size_t targets[] = {3, 0, 2};

    const std::vector<std::pair<std::string, std::function<Tensor()>>> cases = {
        {"matmul", [&] { return sum(matmul(a, b) * probe2); }},
        {"matmul_nt", [&] { return sum(matmul_nt(a, c) * Tensor::full({3, 3}, 0.7)); }},
        {"linear", [&] { return sum(gelu(linear(a, b, lb)) * probe2); }},
        {"add_sub_mul", [&] { return sum((a + c) * (a - c) * probe); }},
        {"add_bias", [&] { return sum(add_bias(a, v) * probe); }},
        {"scale", [&] { return sum(add_scalar(a * 1.7, 0.3) * probe); }},
        {"softmax_rows", [&] { return sum(softmax(a, 1) * probe); }},
        {"softmax_cols", [&] { return sum(softmax(a, 0) * probe); }},
        {"layer_norm", [&] { return sum(layer_norm(a, gain, bias, 1e-5) * probe); }},
        {"gelu", [&] { return sum(gelu(a) * probe); }},
        {"embedding", [&] { return sum(embedding(table, ids) * probe); }},
        {"concat_rows", [&] { return sum(concat({a, c}, 0) * Tensor::full({6, 4}, 0.3)); }},
        {"concat_cols", [&] { return sum(concat({a, slice_cols(c, 0, 2)}, 1) * concat({a, slice_cols(c, 2, 4)}, 1)); }},
        {"slices", [&] { return sum(slice_rows(a, 1, 3) * slice_rows(c, 0, 2)) + sum(slice_cols(c, 1, 3) * slice_cols(a, 0, 2)); }},
        {"row", [&] { return dot(row(a, 2), v); }},
        {"reshape_transpose", [&] { return sum(transpose(reshape(a, {4, 3})) * c) + sum(transpose(a) * probe_t); }},
        {"mean_rowsum", [&] { return mean(a * a) + sum(row_sum(c * probe) * row_sum(a)); }},
        {"dot", [&] { return dot(v, w) * dot(v, v); }},
        {"l2_normalize_vec", [&] { return dot(l2_normalize(v), w); }},
        {"l2_normalize_rows", [&] { return sum(l2_normalize(a) * probe); }},
        {"cosine", [&] { return cosine_similarity(v, w); }},
        {"cross_entropy", [&] { return cross_entropy(a, targets); }},
    };
    vltest::Named params = {{"a", a}, {"b", b}, {"c", c}, {"v", v}, {"w", w},
                            {"gain", gain}, {"bias", bias}, {"table", table}, {"lb", lb}};
    for (const auto& [name, f] : cases) {
        INFO(name);
        const auto report = vltest::check_gradients(f, params);
        INFO(report.worst);
        CHECK(report.max_rel_error < 1e-5);
    }
}
