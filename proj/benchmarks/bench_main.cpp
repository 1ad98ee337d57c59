#include <benchmark/benchmark.h>

#include <cmath>

#include "vlmatch/encoders.hpp"
#include "vlmatch/finetune.hpp"
#include "vlmatch/index.hpp"
#include "vlmatch/rng.hpp"
#include "vlmatch/tensor.hpp"

using namespace vlmatch;

namespace {

std::vector<double> normals(std::size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return v;
}

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    const auto a = Tensor::matrix(n, n, normals(n * n, rng));
    const auto b = Tensor::matrix(n, n, normals(n * n, rng));
    for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(64)->Arg(128);

void BM_MatmulBackward(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(2);
    const auto a = Tensor::parameter({n, n}, normals(n * n, rng));
    const auto b = Tensor::parameter({n, n}, normals(n * n, rng));
    for (auto _ : state) {
        sum(matmul(a, b)).backward();
    }
}
BENCHMARK(BM_MatmulBackward)->Arg(16)->Arg(64);

void BM_SoftmaxLayerNorm(benchmark::State& state) {
    const std::size_t rows = 32, cols = static_cast<std::size_t>(state.range(0));
    Rng rng(3);
    const auto x = Tensor::matrix(rows, cols, normals(rows * cols, rng));
    const auto g = Tensor::full({cols}, 1.0), b = Tensor::zeros({cols});
    for (auto _ : state) benchmark::DoNotOptimize(softmax(layer_norm(x, g, b, 1e-5), 1));
}
BENCHMARK(BM_SoftmaxLayerNorm)->Arg(64)->Arg(256);

void BM_QueryEmbedding(benchmark::State& state) {
    const EncoderConfig c;
    Rng rng(4);
    const auto p = init_model(c, rng);
    std::vector<int> toks(c.max_text_len, kFirstWordToken);
    NoGradGuard no_grad;
    for (auto _ : state) benchmark::DoNotOptimize(query_embedding(toks, p, c));
}
BENCHMARK(BM_QueryEmbedding);

void BM_ImageEmbedding(benchmark::State& state) {
    const EncoderConfig c;
    Rng rng(5);
    const auto p = init_model(c, rng);
    const auto patches = Tensor::matrix(c.num_patches(), c.patch_dim, normals(c.num_patches() * c.patch_dim, rng));
    NoGradGuard no_grad;
    for (auto _ : state) benchmark::DoNotOptimize(image_embedding(patches, p, c));
}
BENCHMARK(BM_ImageEmbedding);

struct IndexFixture {
    static constexpr std::size_t kDim = 32;
    std::vector<double> queries;
    EmbeddingIndex index;

    explicit IndexFixture(std::size_t n) : index(build(n)) {
        Rng rng(7);
        queries = normals(64 * kDim, rng);
    }

    static EmbeddingIndex build(std::size_t n) {
        Rng rng(6);
        std::vector<std::uint64_t> ids(n);
        for (std::size_t i = 0; i < n; ++i) ids[i] = i;
        auto v = normals(n * kDim, rng);
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t d = 0; d < kDim; ++d) s += v[i * kDim + d] * v[i * kDim + d];
            for (std::size_t d = 0; d < kDim; ++d) v[i * kDim + d] /= std::sqrt(s);
        }
        return EmbeddingIndex::build(ids, v, kDim, true);
    }

    std::span<const double> query(std::size_t i) const { return {queries.data() + (i % 64) * kDim, kDim}; }
};

void BM_IndexExact(benchmark::State& state) {
    static const IndexFixture fx(10000);
    std::size_t i = 0;
    for (auto _ : state) benchmark::DoNotOptimize(fx.index.search_exact(fx.query(i++), 10));
}
BENCHMARK(BM_IndexExact);

void BM_IndexAnn(benchmark::State& state) {
    static const IndexFixture fx(10000);
    const auto ef = static_cast<std::size_t>(state.range(0));
    std::size_t i = 0;
    for (auto _ : state) benchmark::DoNotOptimize(fx.index.search_ann(fx.query(i++), 10, ef));
}
BENCHMARK(BM_IndexAnn)->Arg(16)->Arg(64)->Arg(256);

}  // namespace

BENCHMARK_MAIN();
