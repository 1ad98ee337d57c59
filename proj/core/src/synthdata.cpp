#include "vlmatch/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "vlmatch/error.hpp"
#include "vlmatch/json_field.hpp"
#include "vlmatch/io.hpp"

namespace vlmatch {

namespace fs = std::filesystem;

void GenConfig::validate() const {
    const auto positive = [](std::size_t v, const char* name) {
        if (v == 0) throw ValidationError(std::string("gen config: ") + name + " must be positive");
    };
    positive(n_items, "n_items");
    positive(latent_dim, "latent_dim");
    positive(text_len, "text_len");
    positive(patch_grid, "patch_grid");
    positive(patch_dim, "patch_dim");
    positive(token_bins, "token_bins");
    positive(heldout_every, "heldout_every");
    if (!(query_synonym_rate >= 0.0 && query_synonym_rate <= 1.0)) {
        throw ValidationError("gen config: query_synonym_rate must be in [0, 1]");
    }
    const std::size_t tables = query_synonym_rate > 0.0 ? 2 : 1;
    if (vocab_size < static_cast<std::size_t>(kFirstWordToken) + tables * text_len * token_bins) {
        throw ValidationError("gen config: vocab_size too small for the caption and query words");
    }
    if (!(theta_high > theta_low)) throw ValidationError("gen config: need theta_high > theta_low");
    if (!(noise_sigma >= 0.0)) throw ValidationError("gen config: noise_sigma must be >= 0");
    if (!(token_noise >= 0.0 && token_noise < 1.0)) {
        throw ValidationError("gen config: token_noise must be in [0, 1)");
    }
    if (!(attractiveness_power > 0.0)) {
        throw ValidationError("gen config: attractiveness_power must be positive");
    }
    if (!(click_rate >= 0.0) || !std::isfinite(click_rate)) {
        throw ValidationError("gen config: click_rate must be finite and >= 0");
    }
    if (!std::isfinite(appeal_strength)) throw ValidationError("gen config: bad appeal_strength");
}

nlohmann::json GenConfig::to_json() const {
    return {{"n_items", n_items},
            {"latent_dim", latent_dim},
            {"vocab_size", vocab_size},
            {"text_len", text_len},
            {"patch_grid", patch_grid},
            {"patch_dim", patch_dim},
            {"token_bins", token_bins},
            {"token_noise", token_noise},
            {"query_synonym_rate", query_synonym_rate},
            {"noise_sigma", noise_sigma},
            {"theta_low", theta_low},
            {"theta_high", theta_high},
            {"attractiveness_power", attractiveness_power},
            {"appeal_strength", appeal_strength},
            {"click_rate", click_rate},
            {"click_candidates", click_candidates},
            {"min_clicks", min_clicks},
            {"relevance_per_query", relevance_per_query},
            {"heldout_every", heldout_every},
            {"seed", seed}};
}

GenConfig GenConfig::from_json(const nlohmann::json& j) {
    GenConfig c;
    try {
        c.n_items = json_field(j, "n_items", c.n_items);
        c.latent_dim = json_field(j, "latent_dim", c.latent_dim);
        c.vocab_size = json_field(j, "vocab_size", c.vocab_size);
        c.text_len = json_field(j, "text_len", c.text_len);
        c.patch_grid = json_field(j, "patch_grid", c.patch_grid);
        c.patch_dim = json_field(j, "patch_dim", c.patch_dim);
        c.token_bins = json_field(j, "token_bins", c.token_bins);
        c.token_noise = json_field(j, "token_noise", c.token_noise);
        c.query_synonym_rate = json_field(j, "query_synonym_rate", c.query_synonym_rate);
        c.noise_sigma = json_field(j, "noise_sigma", c.noise_sigma);
        c.theta_low = json_field(j, "theta_low", c.theta_low);
        c.theta_high = json_field(j, "theta_high", c.theta_high);
        c.attractiveness_power = json_field(j, "attractiveness_power", c.attractiveness_power);
        c.appeal_strength = json_field(j, "appeal_strength", c.appeal_strength);
        c.click_rate = json_field(j, "click_rate", c.click_rate);
        c.click_candidates = json_field(j, "click_candidates", c.click_candidates);
        c.min_clicks = json_field(j, "min_clicks", c.min_clicks);
        c.relevance_per_query = json_field(j, "relevance_per_query", c.relevance_per_query);
        c.heldout_every = json_field(j, "heldout_every", c.heldout_every);
        c.seed = json_field(j, "seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("gen config: ") + e.what());
    }
    c.validate();
    return c;
}

const Item& Dataset::item(std::uint64_t id) const {
    if (id >= items.size() || items[id].id != id) {
        throw IndexError("dataset: no item with id " + std::to_string(id));
    }
    return items[id];
}

bool Dataset::is_heldout(std::uint64_t query_id) const {
    return query_id % config.heldout_every == config.heldout_every - 1;
}

int Dataset::degree(std::uint64_t query_id, std::uint64_t image_id) const {
    return degree_for_cosine(latent_cosine(item(query_id).latent, item(image_id).latent),
                             config.theta_low, config.theta_high);
}

double latent_cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw DimensionError("latent_cosine: width mismatch");
    double d = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        d += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) throw DegenerateInputError("latent_cosine: zero vector");
    return d / std::sqrt(na * nb);
}

int degree_for_cosine(double cosine, double theta_low, double theta_high) {
    if (cosine >= theta_high) return 2;
    if (cosine >= theta_low) return 1;
    return 0;
}

std::vector<double> sample_sphere(std::size_t dim, Rng& rng) {
    std::vector<double> v(dim);
    double ss = 0.0;
    do {
        ss = 0.0;
        for (auto& x : v) {
            x = rng.normal();
            ss += x * x;
        }
    } while (ss == 0.0);
    const double inv = 1.0 / std::sqrt(ss);
    for (auto& x : v) x *= inv;
    return v;
}

Generator::Generator(const GenConfig& c) : config(c) {
    c.validate();
    Rng axes = Rng::substream(c.seed, "synth.token_axes");
    for (std::size_t k = 0; k < c.text_len; ++k) token_axes.push_back(sample_sphere(c.latent_dim, axes));

    // Equal-mass bins of a projection u.z for z uniform on the sphere.
    Rng mc = Rng::substream(c.seed, "synth.bin_edges");
    constexpr std::size_t samples = 20000;
    std::vector<double> proj(samples);
    for (auto& p : proj) p = sample_sphere(c.latent_dim, mc)[0];
    std::sort(proj.begin(), proj.end());
    for (std::size_t b = 1; b < c.token_bins; ++b) bin_edges.push_back(proj[b * samples / c.token_bins]);

    Rng perm = Rng::substream(c.seed, "synth.token_table");
    std::vector<int> words(c.vocab_size - kFirstWordToken);
    std::iota(words.begin(), words.end(), kFirstWordToken);
    perm.shuffle(std::span<int>(words));
    const std::size_t n_words = c.text_len * c.token_bins;
    token_table.assign(c.text_len, std::vector<int>(c.token_bins));
    for (std::size_t k = 0; k < c.text_len; ++k) {
        for (std::size_t b = 0; b < c.token_bins; ++b) token_table[k][b] = words[k * c.token_bins + b];
    }
    if (c.query_synonym_rate > 0.0) {
        query_table.assign(c.text_len, std::vector<int>(c.token_bins));
        for (std::size_t k = 0; k < c.text_len; ++k) {
            for (std::size_t b = 0; b < c.token_bins; ++b) {
                query_table[k][b] = words[n_words + k * c.token_bins + b];
            }
        }
    } else {
        query_table = token_table;
    }

    const std::size_t width = c.patch_grid * c.patch_grid * c.patch_dim;
    Rng img = Rng::substream(c.seed, "synth.image_map");
    image_map.resize(width * c.latent_dim);
    for (auto& w : image_map) w = img.normal();
    appeal_pattern.resize(width);
    for (auto& w : appeal_pattern) w = img.normal();
}

namespace {

std::vector<std::size_t> token_bins_of(const Generator& g, const std::vector<double>& latent) {
    std::vector<std::size_t> bins(g.config.text_len);
    for (std::size_t k = 0; k < g.config.text_len; ++k) {
        double t = 0.0;
        for (std::size_t d = 0; d < g.config.latent_dim; ++d) t += g.token_axes[k][d] * latent[d];
        bins[k] = static_cast<std::size_t>(
            std::upper_bound(g.bin_edges.begin(), g.bin_edges.end(), t) - g.bin_edges.begin());
    }
    return bins;
}

// Token dropout to PAD; at least one word survives.
std::vector<int> drop_tokens(const std::vector<int>& tokens, double rate, Rng& noise) {
    std::vector<int> out = tokens;
    for (auto& t : out) {
        if (noise.bernoulli(rate)) t = kPadToken;
    }
    if (std::all_of(out.begin(), out.end(), [](int t) { return t == kPadToken; })) {
        out[0] = tokens[0];
    }
    return out;
}

}  // namespace

std::vector<int> Generator::render_text(const std::vector<double>& latent, Rng& noise) const {
    const auto bins = token_bins_of(*this, latent);
    std::vector<int> tokens(config.text_len);
    for (std::size_t k = 0; k < config.text_len; ++k) tokens[k] = token_table[k][bins[k]];
    return drop_tokens(tokens, config.token_noise, noise);
}

std::vector<int> Generator::render_query(const std::vector<double>& latent, Rng& noise) const {
    const auto bins = token_bins_of(*this, latent);
    std::vector<int> tokens(config.text_len);
    for (std::size_t k = 0; k < config.text_len; ++k) {
        const bool synonym = noise.bernoulli(config.query_synonym_rate);
        tokens[k] = (synonym ? query_table : token_table)[k][bins[k]];
    }
    return drop_tokens(tokens, config.token_noise, noise);
}

Tensor Generator::render_image(const std::vector<double>& latent, double attractiveness,
                               Rng& noise) const {
    const std::size_t rows = config.patch_grid * config.patch_grid;
    const std::size_t width = rows * config.patch_dim;
    std::vector<double> v(width);
    for (std::size_t r = 0; r < width; ++r) {
        double acc = 0.0;
        for (std::size_t d = 0; d < config.latent_dim; ++d) {
            acc += image_map[r * config.latent_dim + d] * latent[d];
        }
        acc += config.appeal_strength * attractiveness * appeal_pattern[r];
        if (config.noise_sigma > 0.0) acc += config.noise_sigma * noise.normal();
        v[r] = acc;
    }
    return Tensor::matrix(rows, config.patch_dim, std::move(v));
}

std::vector<Item> generate_corpus(const GenConfig& config) {
    const Generator gen(config);
    Rng latents = Rng::substream(config.seed, "synth.latents");
    Rng appeal = Rng::substream(config.seed, "synth.attractiveness");
    Rng text_noise = Rng::substream(config.seed, "synth.text_noise");
    Rng image_noise = Rng::substream(config.seed, "synth.image_noise");
    Rng query_noise = Rng::substream(config.seed, "synth.query_noise");
    std::vector<Item> items;
    items.reserve(config.n_items);
    for (std::size_t i = 0; i < config.n_items; ++i) {
        Item it;
        it.id = i;
        it.latent = sample_sphere(config.latent_dim, latents);
        it.attractiveness = std::pow(appeal.uniform(), config.attractiveness_power);
        it.tokens = gen.render_text(it.latent, text_noise);
        it.query_tokens = gen.render_query(it.latent, query_noise);
        it.patches = gen.render_image(it.latent, it.attractiveness, image_noise);
        items.push_back(std::move(it));
    }
    return items;
}

std::vector<RelevanceRecord> generate_relevance_pairs(const std::vector<Item>& items,
                                                      const GenConfig& config,
                                                      std::vector<std::string>* warnings) {
    if (items.size() < 2) throw ValidationError("generate_relevance_pairs: need at least 2 items");
    Rng rng = Rng::substream(config.seed, "synth.relevance");
    std::vector<RelevanceRecord> out;
    std::size_t shortfall[3] = {0, 0, 0};
    std::vector<std::uint64_t> bucket[3];
    for (const auto& q : items) {
        for (auto& b : bucket) b.clear();
        for (const auto& im : items) {
            if (im.id == q.id) continue;
            const int d = degree_for_cosine(latent_cosine(q.latent, im.latent), config.theta_low,
                                            config.theta_high);
            bucket[d].push_back(im.id);
        }
        for (std::size_t k = 0; k < config.relevance_per_query; ++k) {
            const int d = 2 - static_cast<int>(k % 3);
            const auto& pool = bucket[d];
            if (pool.empty()) {
                if (d == 2) {
                    out.push_back({q.id, q.id, 2});
                } else {
                    ++shortfall[d];
                }
                continue;
            }
            out.push_back({q.id, pool[rng.below(pool.size())], d});
        }
    }
    std::sort(out.begin(), out.end(), [](const RelevanceRecord& a, const RelevanceRecord& b) {
        return std::tie(a.query_id, a.image_id, a.degree) < std::tie(b.query_id, b.image_id, b.degree);
    });
    out.erase(std::unique(out.begin(), out.end()), out.end());
    if (warnings != nullptr) {
        for (int d = 0; d < 3; ++d) {
            if (shortfall[d] > 0) {
                warnings->push_back("relevance: " + std::to_string(shortfall[d]) +
                                    " queries lacked a degree-" + std::to_string(d) + " candidate");
            }
        }
    }
    return out;
}

int sample_clicks(double lambda, Rng& rng) {
    if (lambda <= 0.0) return 0;
    return static_cast<int>(rng.poisson(lambda));
}

std::vector<ClickRecord> generate_clicks(const std::vector<Item>& items, const GenConfig& config) {
    if (items.size() < 2) throw ValidationError("generate_clicks: need at least 2 items");
    Rng draw = Rng::substream(config.seed, "synth.click_counts");
    std::vector<ClickRecord> out;
    const std::size_t m = std::min(config.click_candidates, items.size() - 1);
    std::vector<std::pair<double, std::uint64_t>> near;
    for (const auto& q : items) {
        // Impressions: the query's m nearest items by latent cosine.
        near.clear();
        for (const auto& im : items) {
            if (im.id != q.id) near.emplace_back(latent_cosine(q.latent, im.latent), im.id);
        }
        std::partial_sort(near.begin(), near.begin() + static_cast<std::ptrdiff_t>(m), near.end(),
                          [](const auto& a, const auto& b) {
                              return a.first != b.first ? a.first > b.first : a.second < b.second;
                          });
        std::vector<std::pair<std::uint64_t, double>> shown;
        for (std::size_t i = 0; i < m; ++i) shown.emplace_back(near[i].second, near[i].first);
        std::sort(shown.begin(), shown.end());
        for (const auto& [image_id, cos] : shown) {
            const double lambda = config.click_rate * std::max(0.0, cos) * items[image_id].attractiveness;
            const int clicks = sample_clicks(lambda, draw);
            if (clicks >= static_cast<int>(config.min_clicks)) out.push_back({q.id, image_id, clicks});
        }
    }
    return out;
}

Dataset generate_dataset(const GenConfig& config) {
    Dataset d;
    d.config = config;
    d.items = generate_corpus(config);
    d.relevance = generate_relevance_pairs(d.items, config, &d.warnings);
    d.clicks = generate_clicks(d.items, config);
    return d;
}

EncoderConfig encoder_config_for(const GenConfig& gen, EncoderConfig base) {
    base.vocab_size = gen.vocab_size;
    base.patch_grid = gen.patch_grid;
    base.patch_dim = gen.patch_dim;
    base.max_text_len = std::max(base.max_text_len, gen.text_len);
    return base;
}

// ---- IO ------------------------------------------------------------------------

namespace {

std::vector<nlohmann::json> read_jsonl(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingInputError(path.string());
    std::vector<nlohmann::json> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace

void write_dataset(const Dataset& data, const fs::path& dir) {
    fs::create_directories(dir);
    std::string items;
    for (const auto& it : data.items) {
        nlohmann::json patches = nlohmann::json::array();
        const std::size_t cols = it.patches.dim(1);
        const auto v = it.patches.data();
        for (std::size_t r = 0; r < it.patches.dim(0); ++r) {
            patches.push_back(std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(r * cols),
                                                  v.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols)));
        }
        const nlohmann::json j = {{"id", it.id},
                                  {"tokens", it.tokens},
                                  {"query_tokens", it.query_tokens},
                                  {"patches", std::move(patches)},
                                  {"latent", it.latent},
                                  {"attractiveness", it.attractiveness}};
        items += j.dump() + "\n";
    }
    std::string rel;
    for (const auto& r : data.relevance) {
        rel += nlohmann::json{{"query_id", r.query_id}, {"image_id", r.image_id}, {"degree", r.degree}}
                   .dump() +
               "\n";
    }
    std::string clicks;
    for (const auto& c : data.clicks) {
        clicks += nlohmann::json{{"query_id", c.query_id}, {"image_id", c.image_id}, {"clicks", c.clicks}}
                      .dump() +
                  "\n";
    }
    write_file_atomic(dir / "gen_config.json", data.config.to_json().dump(2) + "\n");
    write_file_atomic(dir / "items.jsonl", items);
    write_file_atomic(dir / "relevance.jsonl", rel);
    write_file_atomic(dir / "clicks.jsonl", clicks);
}

Dataset read_dataset(const fs::path& dir) {
    Dataset d;
    const fs::path cfg = dir / "gen_config.json";
    {
        std::ifstream in(cfg);
        if (!in) throw MissingInputError(cfg.string());
        try {
            d.config = GenConfig::from_json(nlohmann::json::parse(in));
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError(cfg.string() + ": " + e.what());
        }
    }
    try {
        for (const auto& j : read_jsonl(dir / "items.jsonl")) {
            Item it;
            it.id = j.at("id").get<std::uint64_t>();
            it.tokens = j.at("tokens").get<std::vector<int>>();
            it.query_tokens = j.at("query_tokens").get<std::vector<int>>();
            it.latent = j.at("latent").get<std::vector<double>>();
            it.attractiveness = j.at("attractiveness").get<double>();
            const auto rows = j.at("patches").get<std::vector<std::vector<double>>>();
            if (rows.empty()) throw FormatError("items.jsonl: item without patches");
            std::vector<double> flat;
            for (const auto& r : rows) {
                if (r.size() != rows[0].size()) throw FormatError("items.jsonl: ragged patches");
                flat.insert(flat.end(), r.begin(), r.end());
            }
            it.patches = Tensor::matrix(rows.size(), rows[0].size(), std::move(flat));
            if (it.id != d.items.size()) throw FormatError("items.jsonl: ids must be 0..n-1 in order");
            d.items.push_back(std::move(it));
        }
        for (const auto& j : read_jsonl(dir / "relevance.jsonl")) {
            d.relevance.push_back({j.at("query_id").get<std::uint64_t>(),
                                   j.at("image_id").get<std::uint64_t>(), j.at("degree").get<int>()});
        }
        for (const auto& j : read_jsonl(dir / "clicks.jsonl")) {
            d.clicks.push_back({j.at("query_id").get<std::uint64_t>(),
                                j.at("image_id").get<std::uint64_t>(), j.at("clicks").get<int>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("dataset: ") + e.what());
    }
    for (const auto& r : d.relevance) {
        if (r.query_id >= d.items.size() || r.image_id >= d.items.size()) {
            throw FormatError("relevance.jsonl: id out of range");
        }
    }
    for (const auto& c : d.clicks) {
        if (c.query_id >= d.items.size() || c.image_id >= d.items.size()) {
            throw FormatError("clicks.jsonl: id out of range");
        }
    }
    return d;
}

}  // namespace vlmatch
