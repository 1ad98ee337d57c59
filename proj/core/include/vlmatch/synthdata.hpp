#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmatch/encoders.hpp"
#include "vlmatch/rng.hpp"
#include "vlmatch/tensor.hpp"

namespace vlmatch {

struct GenConfig {
    std::size_t n_items = 512;
    std::size_t latent_dim = 8;
    std::size_t vocab_size = 256;
    std::size_t text_len = 12;
    std::size_t patch_grid = 4;
    std::size_t patch_dim = 8;
    std::size_t token_bins = 8;
    double token_noise = 0.1;    ///< per-token dropout to PAD
    double query_synonym_rate = 0.5;  ///< query words drawn from the query-only vocabulary
    double noise_sigma = 0.1;    ///< Gaussian noise on patch values
    double theta_low = 0.4;      ///< degree >= 1 at cos >= theta_low
    double theta_high = 0.8;     ///< degree 2 at cos >= theta_high
    double attractiveness_power = 1.0;  ///< a = u^power, u ~ U(0,1)
    double appeal_strength = 1.0;       ///< weight of the attractiveness pattern in images
    double click_rate = 6.0;            ///< c in lambda = c * max(0, cos) * a
    std::size_t click_candidates = 32;  ///< impressions per query: its nearest items by latent cosine
    std::size_t min_clicks = 2;
    std::size_t relevance_per_query = 9;
    std::size_t heldout_every = 5;  ///< query ids with id % every == every - 1 are held out
    std::uint64_t seed = 1;

    void validate() const;
    nlohmann::json to_json() const;
    static GenConfig from_json(const nlohmann::json& j);
    friend bool operator==(const GenConfig&, const GenConfig&) = default;
};

struct Item {
    std::uint64_t id = 0;
    std::vector<double> latent;
    std::vector<int> tokens;        ///< caption, used for pre-training
    std::vector<int> query_tokens;  ///< the item's text as a search query
    Tensor patches;  ///< [grid^2, patch_dim]
    double attractiveness = 0.0;
};

struct RelevanceRecord {
    std::uint64_t query_id = 0;
    std::uint64_t image_id = 0;
    int degree = 0;
    friend bool operator==(const RelevanceRecord&, const RelevanceRecord&) = default;
};

struct ClickRecord {
    std::uint64_t query_id = 0;
    std::uint64_t image_id = 0;
    int clicks = 0;
    friend bool operator==(const ClickRecord&, const ClickRecord&) = default;
};

struct Dataset {
    GenConfig config;
    std::vector<Item> items;  ///< indexed by id
    std::vector<RelevanceRecord> relevance;
    std::vector<ClickRecord> clicks;
    std::vector<std::string> warnings;

    const Item& item(std::uint64_t id) const;
    bool is_heldout(std::uint64_t query_id) const;
    /// Ground-truth degree from stored latents.
    int degree(std::uint64_t query_id, std::uint64_t image_id) const;
};

double latent_cosine(const std::vector<double>& a, const std::vector<double>& b);
int degree_for_cosine(double cosine, double theta_low, double theta_high);

/// Fixed generator components derived from the seed alone.
struct Generator {
    GenConfig config;
    std::vector<std::vector<double>> token_axes;      ///< per text position, unit [latent]
    std::vector<double> bin_edges;                    ///< token_bins - 1 interior edges
    std::vector<std::vector<int>> token_table;        ///< [position][bin] -> token id
    std::vector<std::vector<int>> query_table;        ///< query-only synonyms, same layout
    std::vector<double> image_map;                    ///< [grid^2*patch_dim, latent] row-major
    std::vector<double> appeal_pattern;               ///< [grid^2*patch_dim]

    explicit Generator(const GenConfig& config);

    std::vector<int> render_text(const std::vector<double>& latent, Rng& noise) const;
    /// Caption words swapped for their query-only synonym at query_synonym_rate.
    std::vector<int> render_query(const std::vector<double>& latent, Rng& noise) const;
    Tensor render_image(const std::vector<double>& latent, double attractiveness,
                        Rng& noise) const;
};

/// Unit vector uniform on the sphere of the given dimension.
std::vector<double> sample_sphere(std::size_t dim, Rng& rng);

std::vector<Item> generate_corpus(const GenConfig& config);
std::vector<RelevanceRecord> generate_relevance_pairs(const std::vector<Item>& items,
                                                      const GenConfig& config,
                                                      std::vector<std::string>* warnings = nullptr);
std::vector<ClickRecord> generate_clicks(const std::vector<Item>& items, const GenConfig& config);
Dataset generate_dataset(const GenConfig& config);

/// Poisson(lambda) click count for one pair.
int sample_clicks(double lambda, Rng& rng);

/// EncoderConfig sized to the generator's vocabulary and patch layout.
EncoderConfig encoder_config_for(const GenConfig& gen, EncoderConfig base = {});

// JSON-lines IO. Files: items.jsonl, relevance.jsonl, clicks.jsonl plus
// gen_config.json under one directory.
void write_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace vlmatch
