#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace vlmatch {

struct SearchHit {
    std::uint64_t id = 0;
    double score = 0.0;
    friend bool operator==(const SearchHit&, const SearchHit&) = default;
};

struct AnnParams {
    std::size_t m = 8;  ///< neighbors per node on upper layers; 2m on layer 0
    std::size_t ef_construction = 64;
    std::uint64_t seed = 0;
    friend bool operator==(const AnnParams&, const AnnParams&) = default;
};

/// Immutable set of unit vectors searchable by cosine (dot product).
/// With a graph, nodes live on layers 0..level(node) of a hierarchical
/// proximity graph; layer-0 lists hold at most 2m neighbors, higher layers m.
class EmbeddingIndex {
public:
    EmbeddingIndex() = default;

    /// vectors: row-major [ids.size(), dim]. Throws ValidationError for an
    /// empty set, duplicate ids or non-unit rows; DimensionError when the
    /// vector block does not match ids.size() * dim.
    static EmbeddingIndex build(std::vector<std::uint64_t> ids, std::vector<double> vectors,
                                std::size_t dim, bool ann, AnnParams params = {});

    std::size_t size() const noexcept { return ids_.size(); }
    std::size_t dim() const noexcept { return dim_; }
    bool empty() const noexcept { return ids_.empty(); }
    bool has_graph() const noexcept { return !levels_.empty(); }
    const AnnParams& ann_params() const noexcept { return params_; }

    const std::vector<std::uint64_t>& ids() const noexcept { return ids_; }
    std::span<const double> vector(std::size_t node) const;
    const std::vector<double>& vectors() const noexcept { return vectors_; }

    /// Graph accessors (node = position in ids()).
    std::size_t entry_point() const;
    std::size_t max_level() const;
    std::size_t level(std::size_t node) const;
    const std::vector<std::uint32_t>& neighbors(std::size_t node, std::size_t layer) const;

    /// min(k, n) hits, score descending then id ascending.
    std::vector<SearchHit> search_exact(std::span<const double> query, std::size_t k) const;
    /// Beam search over the graph. Requires ef_search >= k; StateError
    /// without a graph.
    std::vector<SearchHit> search_ann(std::span<const double> query, std::size_t k,
                                      std::size_t ef_search = 32) const;

    std::vector<std::uint8_t> serialize() const;
    static EmbeddingIndex deserialize(std::span<const std::uint8_t> bytes);
    void save(const std::filesystem::path& path) const;
    static EmbeddingIndex load(const std::filesystem::path& path);

    friend bool operator==(const EmbeddingIndex&, const EmbeddingIndex&) = default;

private:
    double dot(std::span<const double> q, std::size_t node) const;
    void check_query(std::span<const double> q) const;
    std::vector<std::pair<double, std::uint32_t>> search_layer(
        std::span<const double> q, const std::vector<std::uint32_t>& entries, std::size_t ef,
        std::size_t layer) const;
    std::vector<std::uint32_t> select_neighbors(
        const std::vector<std::pair<double, std::uint32_t>>& candidates, std::size_t m) const;
    void insert(std::uint32_t node);
    void shrink(std::uint32_t node, std::size_t layer);
    void repair_reachability();

    std::vector<std::uint64_t> ids_;
    std::vector<double> vectors_;
    std::size_t dim_ = 0;
    AnnParams params_;
    std::vector<std::uint32_t> levels_;
    std::vector<std::vector<std::vector<std::uint32_t>>> links_;  ///< [node][layer]
    std::uint32_t entry_ = 0;
    std::uint32_t max_level_ = 0;
};

/// Flat embedding export: "VLEB", u64 n, u64 dim, n u64 ids, n*dim f64.
struct EmbeddingExport {
    std::vector<std::uint64_t> ids;
    std::vector<double> vectors;
    std::size_t dim = 0;
    friend bool operator==(const EmbeddingExport&, const EmbeddingExport&) = default;
};

std::vector<std::uint8_t> serialize_embeddings(const EmbeddingExport& e);
EmbeddingExport deserialize_embeddings(std::span<const std::uint8_t> bytes);
void write_embeddings(const EmbeddingExport& e, const std::filesystem::path& path);
EmbeddingExport read_embeddings(const std::filesystem::path& path);

}  // namespace vlmatch
