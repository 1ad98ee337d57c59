#include "vlmatch/index.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <unordered_set>

#include "binary_io.hpp"
#include "vlmatch/error.hpp"
#include "vlmatch/io.hpp"
#include "vlmatch/rng.hpp"

namespace vlmatch {

namespace {

constexpr char kIndexMagic[5] = "VLIX";
constexpr char kEmbedMagic[5] = "VLEB";
constexpr std::uint32_t kIndexVersion = 1;
constexpr std::uint32_t kFlagGraph = 1;
constexpr std::uint32_t kMaxLevel = 16;

using Scored = std::pair<double, std::uint32_t>;

bool hit_before(const SearchHit& a, const SearchHit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
}

}  // namespace

// ---- build ---------------------------------------------------------------------

EmbeddingIndex EmbeddingIndex::build(std::vector<std::uint64_t> ids, std::vector<double> vectors,
                                     std::size_t dim, bool ann, AnnParams params) {
    if (ids.empty()) throw ValidationError("index: cannot build from an empty set");
    if (dim == 0) throw DimensionError("index: dimension must be positive");
    if (vectors.size() != ids.size() * dim) {
        throw DimensionError("index: " + std::to_string(vectors.size()) + " values for " +
                             std::to_string(ids.size()) + " ids of width " + std::to_string(dim));
    }
    if (ids.size() >= (std::size_t{1} << 32)) throw ValidationError("index: too many items");
    {
        std::unordered_set<std::uint64_t> seen;
        for (const auto id : ids) {
            if (!seen.insert(id).second) {
                throw ValidationError("index: duplicate id " + std::to_string(id));
            }
        }
    }
    for (std::size_t i = 0; i < ids.size(); ++i) {
        double ss = 0.0;
        for (std::size_t d = 0; d < dim; ++d) ss += vectors[i * dim + d] * vectors[i * dim + d];
        if (std::abs(std::sqrt(ss) - 1.0) > 1e-9) {
            throw ValidationError("index: vector for id " + std::to_string(ids[i]) +
                                  " is not unit-norm");
        }
    }
    EmbeddingIndex idx;
    idx.ids_ = std::move(ids);
    idx.vectors_ = std::move(vectors);
    idx.dim_ = dim;
    if (!ann) return idx;

    if (params.m < 2) throw ParameterError("index: M must be at least 2");
    if (params.ef_construction < 1) throw ParameterError("index: ef_construction must be >= 1");
    idx.params_ = params;
    const std::size_t n = idx.ids_.size();
    Rng rng(params.seed);
    const double ml = 1.0 / std::log(static_cast<double>(params.m));
    idx.levels_.resize(n);
    idx.links_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double u = 1.0 - rng.uniform();  // (0, 1]
        const auto l = static_cast<std::uint32_t>(std::floor(-std::log(u) * ml));
        idx.levels_[i] = std::min(l, kMaxLevel);
        idx.links_[i].resize(idx.levels_[i] + 1);
    }
    for (std::uint32_t i = 0; i < n; ++i) idx.insert(i);
    idx.repair_reachability();
    return idx;
}

double EmbeddingIndex::dot(std::span<const double> q, std::size_t node) const {
    const double* v = vectors_.data() + node * dim_;
    double acc = 0.0;
    for (std::size_t d = 0; d < dim_; ++d) acc += q[d] * v[d];
    return acc;
}

std::span<const double> EmbeddingIndex::vector(std::size_t node) const {
    if (node >= ids_.size()) throw IndexError("index: node out of range");
    return {vectors_.data() + node * dim_, dim_};
}

std::vector<Scored> EmbeddingIndex::search_layer(std::span<const double> q,
                                                 const std::vector<std::uint32_t>& entries,
                                                 std::size_t ef, std::size_t layer) const {
    std::vector<std::uint8_t> visited(ids_.size(), 0);
    std::priority_queue<Scored> candidates;  // best first
    std::priority_queue<Scored, std::vector<Scored>, std::greater<>> found;  // worst first
    for (const auto e : entries) {
        if (visited[e]) continue;
        visited[e] = 1;
        const Scored s{dot(q, e), e};
        candidates.push(s);
        found.push(s);
        if (found.size() > ef) found.pop();
    }
    while (!candidates.empty()) {
        const Scored c = candidates.top();
        if (found.size() >= ef && c.first < found.top().first) break;
        candidates.pop();
        for (const auto nb : links_[c.second][layer]) {
            if (visited[nb]) continue;
            visited[nb] = 1;
            const double s = dot(q, nb);
            if (found.size() < ef || s > found.top().first) {
                candidates.push({s, nb});
                found.push({s, nb});
                if (found.size() > ef) found.pop();
            }
        }
    }
    std::vector<Scored> out;
    out.reserve(found.size());
    while (!found.empty()) {
        out.push_back(found.top());
        found.pop();
    }
    std::reverse(out.begin(), out.end());
    return out;
}

std::vector<std::uint32_t> EmbeddingIndex::select_neighbors(const std::vector<Scored>& candidates,
                                                            std::size_t m) const {
    // Keep a candidate only if it is closer to the base than to every kept
    // neighbor; top up with the pruned ones in order.
    std::vector<std::uint32_t> kept, pruned;
    for (const auto& [score, c] : candidates) {
        if (kept.size() >= m) break;
        bool diverse = true;
        for (const auto r : kept) {
            if (dot(vector(c), r) > score) {
                diverse = false;
                break;
            }
        }
        (diverse ? kept : pruned).push_back(c);
    }
    for (std::size_t i = 0; i < pruned.size() && kept.size() < m; ++i) kept.push_back(pruned[i]);
    return kept;
}

void EmbeddingIndex::shrink(std::uint32_t node, std::size_t layer) {
    auto& adj = links_[node][layer];
    std::vector<Scored> cand;
    cand.reserve(adj.size());
    for (const auto nb : adj) cand.push_back({dot(vector(node), nb), nb});
    std::sort(cand.begin(), cand.end(), [](const Scored& a, const Scored& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    adj = select_neighbors(cand, layer == 0 ? 2 * params_.m : params_.m);
}

void EmbeddingIndex::insert(std::uint32_t node) {
    const std::uint32_t level = levels_[node];
    if (node == 0) {
        entry_ = 0;
        max_level_ = level;
        return;
    }
    const auto q = vector(node);
    std::vector<std::uint32_t> ep{entry_};
    for (std::uint32_t lc = max_level_; lc > level; --lc) {
        ep = {search_layer(q, ep, 1, lc).front().second};
    }
    for (std::int64_t lc = std::min(level, max_level_); lc >= 0; --lc) {
        const auto layer = static_cast<std::size_t>(lc);
        const auto w = search_layer(q, ep, params_.ef_construction, layer);
        const std::size_t cap = layer == 0 ? 2 * params_.m : params_.m;
        links_[node][layer] = select_neighbors(w, params_.m);
        for (const auto nb : links_[node][layer]) {
            links_[nb][layer].push_back(node);
            if (links_[nb][layer].size() > cap) shrink(nb, layer);
        }
        ep.clear();
        for (const auto& s : w) ep.push_back(s.second);
    }
    if (level > max_level_) {
        entry_ = node;
        max_level_ = level;
    }
}

void EmbeddingIndex::repair_reachability() {
    const std::size_t n = ids_.size();
    const std::size_t cap = 2 * params_.m;
    for (std::size_t round = 0; round <= n; ++round) {
        std::vector<std::uint8_t> seen(n, 0);
        std::vector<std::uint32_t> stack{entry_};
        seen[entry_] = 1;
        while (!stack.empty()) {
            const auto v = stack.back();
            stack.pop_back();
            for (const auto nb : links_[v][0]) {
                if (!seen[nb]) {
                    seen[nb] = 1;
                    stack.push_back(nb);
                }
            }
        }
        const auto it = std::find(seen.begin(), seen.end(), 0);
        if (it == seen.end()) return;
        const auto u = static_cast<std::uint32_t>(it - seen.begin());
        // Link the orphan from its most similar reachable node, preferring
        // nodes with spare capacity.
        std::int64_t best = -1, best_full = -1;
        double best_s = -2.0, best_full_s = -2.0;
        for (std::uint32_t v = 0; v < n; ++v) {
            if (!seen[v]) continue;
            const double s = dot(vector(u), v);
            if (links_[v][0].size() < cap) {
                if (s > best_s) best_s = s, best = v;
            } else if (s > best_full_s) {
                best_full_s = s, best_full = v;
            }
        }
        if (best >= 0) {
            links_[static_cast<std::size_t>(best)][0].push_back(u);
        } else {
            links_[static_cast<std::size_t>(best_full)][0].back() = u;
        }
    }
    throw StateError("index: could not make the graph reachable");
}

// ---- queries -------------------------------------------------------------------

std::size_t EmbeddingIndex::entry_point() const {
    if (!has_graph()) throw StateError("index: no ANN graph");
    return entry_;
}

std::size_t EmbeddingIndex::max_level() const {
    if (!has_graph()) throw StateError("index: no ANN graph");
    return max_level_;
}

std::size_t EmbeddingIndex::level(std::size_t node) const {
    if (!has_graph()) throw StateError("index: no ANN graph");
    if (node >= levels_.size()) throw IndexError("index: node out of range");
    return levels_[node];
}

const std::vector<std::uint32_t>& EmbeddingIndex::neighbors(std::size_t node,
                                                            std::size_t layer) const {
    if (!has_graph()) throw StateError("index: no ANN graph");
    if (node >= levels_.size() || layer > levels_[node]) {
        throw IndexError("index: node/layer out of range");
    }
    return links_[node][layer];
}

void EmbeddingIndex::check_query(std::span<const double> q) const {
    if (ids_.empty()) throw StateError("index: empty index");
    if (q.size() != dim_) {
        throw DimensionError("index: query width " + std::to_string(q.size()) +
                             " does not match index width " + std::to_string(dim_));
    }
}

std::vector<SearchHit> EmbeddingIndex::search_exact(std::span<const double> query,
                                                    std::size_t k) const {
    check_query(query);
    if (k < 1) throw ParameterError("search: k must be >= 1");
    std::vector<SearchHit> all(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) all[i] = {ids_[i], dot(query, i)};
    const std::size_t take = std::min(k, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take), all.end(),
                      hit_before);
    all.resize(take);
    return all;
}

std::vector<SearchHit> EmbeddingIndex::search_ann(std::span<const double> query, std::size_t k,
                                                  std::size_t ef_search) const {
    check_query(query);
    if (!has_graph()) throw StateError("index: built without an ANN graph");
    if (k < 1) throw ParameterError("search: k must be >= 1");
    if (ef_search < k) throw ParameterError("search_ann: ef_search must be >= k");
    std::vector<std::uint32_t> ep{entry_};
    for (std::uint32_t lc = max_level_; lc > 0; --lc) ep = {search_layer(query, ep, 1, lc).front().second};
    const auto w = search_layer(query, ep, ef_search, 0);
    std::vector<SearchHit> out;
    out.reserve(w.size());
    for (const auto& [s, node] : w) out.push_back({ids_[node], s});
    std::sort(out.begin(), out.end(), hit_before);
    if (out.size() > k) out.resize(k);
    return out;
}

// ---- serialization ---------------------------------------------------------------

std::vector<std::uint8_t> EmbeddingIndex::serialize() const {
    detail::ByteWriter w;
    w.bytes(kIndexMagic, 4);
    w.put<std::uint32_t>(kIndexVersion);
    w.put<std::uint64_t>(ids_.size());
    w.put<std::uint64_t>(dim_);
    w.put<std::uint32_t>(has_graph() ? kFlagGraph : 0);
    w.array(ids_);
    w.array(vectors_);
    if (has_graph()) {
        w.put<std::uint64_t>(params_.m);
        w.put<std::uint64_t>(params_.ef_construction);
        w.put<std::uint64_t>(params_.seed);
        w.put<std::uint32_t>(entry_);
        w.put<std::uint32_t>(max_level_);
        w.array(levels_);
        for (std::uint32_t layer = 0; layer <= max_level_; ++layer) {
            for (std::size_t node = 0; node < levels_.size(); ++node) {
                if (levels_[node] < layer) continue;
                const auto& adj = links_[node][layer];
                w.put<std::uint32_t>(static_cast<std::uint32_t>(adj.size()));
                w.array(adj);
            }
        }
    }
    return std::move(w.buf);
}

EmbeddingIndex EmbeddingIndex::deserialize(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes, "index");
    r.expect_magic(kIndexMagic);
    const auto version = r.get<std::uint32_t>();
    if (version != kIndexVersion) {
        throw VersionError("index: version " + std::to_string(version) + ", expected " +
                           std::to_string(kIndexVersion));
    }
    EmbeddingIndex idx;
    const auto n = r.get<std::uint64_t>();
    const auto dim = r.get<std::uint64_t>();
    const auto flags = r.get<std::uint32_t>();
    if (dim == 0 || n == 0) throw FormatError("index: empty header");
    if (dim > (std::uint64_t{1} << 32)) throw FormatError("index: implausible dimension");
    if (n >= (std::uint64_t{1} << 32)) throw FormatError("index: too many items");
    idx.dim_ = static_cast<std::size_t>(dim);
    idx.ids_ = r.array<std::uint64_t>(n);
    idx.vectors_ = r.array<double>(n * dim);
    if (flags & kFlagGraph) {
        idx.params_.m = static_cast<std::size_t>(r.get<std::uint64_t>());
        idx.params_.ef_construction = static_cast<std::size_t>(r.get<std::uint64_t>());
        idx.params_.seed = r.get<std::uint64_t>();
        idx.entry_ = r.get<std::uint32_t>();
        idx.max_level_ = r.get<std::uint32_t>();
        if (idx.entry_ >= n || idx.max_level_ > kMaxLevel) throw FormatError("index: bad graph header");
        idx.levels_ = r.array<std::uint32_t>(n);
        idx.links_.resize(n);
        for (std::size_t node = 0; node < n; ++node) {
            if (idx.levels_[node] > idx.max_level_) throw FormatError("index: bad node level");
            idx.links_[node].resize(idx.levels_[node] + 1);
        }
        for (std::uint32_t layer = 0; layer <= idx.max_level_; ++layer) {
            for (std::size_t node = 0; node < n; ++node) {
                if (idx.levels_[node] < layer) continue;
                const auto count = r.get<std::uint32_t>();
                auto adj = r.array<std::uint32_t>(count);
                for (const auto nb : adj) {
                    if (nb >= n || idx.levels_[nb] < layer) throw FormatError("index: bad neighbor");
                }
                idx.links_[node][layer] = std::move(adj);
            }
        }
    }
    if (!r.done()) throw FormatError("index: trailing bytes");
    return idx;
}

void EmbeddingIndex::save(const std::filesystem::path& path) const {
    write_file_atomic(path, serialize());
}

EmbeddingIndex EmbeddingIndex::load(const std::filesystem::path& path) {
    return deserialize(read_file_bytes(path));
}

std::vector<std::uint8_t> serialize_embeddings(const EmbeddingExport& e) {
    if (e.vectors.size() != e.ids.size() * e.dim) {
        throw DimensionError("embeddings: vector block does not match ids * dim");
    }
    detail::ByteWriter w;
    w.bytes(kEmbedMagic, 4);
    w.put<std::uint64_t>(e.ids.size());
    w.put<std::uint64_t>(e.dim);
    w.array(e.ids);
    w.array(e.vectors);
    return std::move(w.buf);
}

EmbeddingExport deserialize_embeddings(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes, "embeddings");
    r.expect_magic(kEmbedMagic);
    EmbeddingExport e;
    const auto n = r.get<std::uint64_t>();
    e.dim = static_cast<std::size_t>(r.get<std::uint64_t>());
    e.ids = r.array<std::uint64_t>(n);
    if (e.dim != 0 && n > (std::uint64_t{1} << 40) / e.dim) throw FormatError("embeddings: too large");
    e.vectors = r.array<double>(n * e.dim);
    if (!r.done()) throw FormatError("embeddings: trailing bytes");
    return e;
}

void write_embeddings(const EmbeddingExport& e, const std::filesystem::path& path) {
    write_file_atomic(path, serialize_embeddings(e));
}

EmbeddingExport read_embeddings(const std::filesystem::path& path) {
    return deserialize_embeddings(read_file_bytes(path));
}

}  // namespace vlmatch
