#include "vlmatch/encoders.hpp"

#include <cmath>
#include <cstring>
#include <limits>

#include "vlmatch/error.hpp"
#include "vlmatch/json_field.hpp"

namespace vlmatch {

// ---- EncoderConfig -------------------------------------------------------------

void EncoderConfig::validate() const {
    const std::pair<const char*, std::size_t> fields[] = {
        {"dim", dim},           {"layers", layers},       {"heads", heads},
        {"vocab_size", vocab_size}, {"max_text_len", max_text_len}, {"patch_grid", patch_grid},
        {"patch_dim", patch_dim}, {"proj_dim", proj_dim}, {"ffn_dim", ffn_dim},
        {"relevance_hidden", relevance_hidden}};
    for (const auto& [name, value] : fields) {
        if (value == 0) throw ValidationError(std::string("encoder config: ") + name + " must be positive");
    }
    if (dim % heads != 0) throw ValidationError("encoder config: dim must be divisible by heads");
    if (vocab_size <= static_cast<std::size_t>(kFirstWordToken)) {
        throw ValidationError("encoder config: vocab_size must leave room for word tokens");
    }
    if (!(ln_eps > 0.0)) throw ValidationError("encoder config: ln_eps must be positive");
    if (!(init_std > 0.0)) throw ValidationError("encoder config: init_std must be positive");
}

nlohmann::json EncoderConfig::to_json() const {
    return {{"dim", dim},
            {"layers", layers},
            {"heads", heads},
            {"vocab_size", vocab_size},
            {"max_text_len", max_text_len},
            {"patch_grid", patch_grid},
            {"patch_dim", patch_dim},
            {"proj_dim", proj_dim},
            {"ffn_dim", ffn_dim},
            {"relevance_hidden", relevance_hidden},
            {"ln_eps", ln_eps},
            {"init_std", init_std}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
    EncoderConfig c;
    try {
        c.dim = json_field(j, "dim", c.dim);
        c.layers = json_field(j, "layers", c.layers);
        c.heads = json_field(j, "heads", c.heads);
        c.vocab_size = json_field(j, "vocab_size", c.vocab_size);
        c.max_text_len = json_field(j, "max_text_len", c.max_text_len);
        c.patch_grid = json_field(j, "patch_grid", c.patch_grid);
        c.patch_dim = json_field(j, "patch_dim", c.patch_dim);
        c.proj_dim = json_field(j, "proj_dim", c.proj_dim);
        c.ffn_dim = json_field(j, "ffn_dim", c.ffn_dim);
        c.relevance_hidden = json_field(j, "relevance_hidden", c.relevance_hidden);
        c.ln_eps = json_field(j, "ln_eps", c.ln_eps);
        c.init_std = json_field(j, "init_std", c.init_std);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("encoder config: ") + e.what());
    }
    c.validate();
    return c;
}

// ---- ModelParams ---------------------------------------------------------------

ParamGroup& ModelParams::group(std::string_view name) {
    auto it = groups_.find(name);
    if (it == groups_.end()) it = groups_.emplace(std::string(name), ParamGroup{}).first;
    return it->second;
}

const ParamGroup& ModelParams::group(std::string_view name) const {
    const auto it = groups_.find(name);
    if (it == groups_.end()) throw StateError("model params: no group '" + std::string(name) + "'");
    return it->second;
}

bool ModelParams::has_group(std::string_view name) const { return groups_.contains(name); }

const Tensor& ModelParams::at(std::string_view group_name, std::string_view param) const {
    const auto& g = group(group_name);
    const auto it = g.find(param);
    if (it == g.end()) {
        throw StateError("model params: no parameter '" + std::string(group_name) + "." +
                         std::string(param) + "'");
    }
    return it->second;
}

void ModelParams::set(std::string_view group_name, const std::string& param, Tensor value) {
    group(group_name)[param] = std::move(value);
}

std::vector<std::string> ModelParams::group_names() const {
    std::vector<std::string> out;
    for (const auto& [name, g] : groups_) out.push_back(name);
    return out;
}

void ModelParams::freeze(std::string_view group_name) { frozen_.emplace(group_name); }

void ModelParams::unfreeze(std::string_view group_name) {
    const auto it = frozen_.find(group_name);
    if (it != frozen_.end()) frozen_.erase(it);
}

bool ModelParams::is_frozen(std::string_view group_name) const {
    return frozen_.contains(group_name);
}

std::vector<std::pair<std::string, Tensor>> ModelParams::flat() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& [gname, g] : groups_) {
        for (const auto& [pname, t] : g) out.emplace_back(gname + "." + pname, t);
    }
    return out;
}

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [gname, g] : groups_) {
        for (const auto& [pname, t] : g) n += t.size();
    }
    return n;
}

std::size_t ModelParams::parameter_count(std::span<const std::string_view> group_names) const {
    std::size_t n = 0;
    for (const auto name : group_names) {
        if (!has_group(name)) continue;
        for (const auto& [pname, t] : group(name)) n += t.size();
    }
    return n;
}

void ModelParams::zero_grad() {
    for (auto& [gname, g] : groups_) {
        for (auto& [pname, t] : g) t.zero_grad();
    }
}

ModelParams ModelParams::clone() const {
    ModelParams out;
    for (const auto& [gname, g] : groups_) {
        auto& dst = out.group(gname);
        for (const auto& [pname, t] : g) dst.emplace(pname, t.clone_parameter());
    }
    out.frozen_ = frozen_;
    return out;
}

ModelParams ModelParams::subset(std::span<const std::string_view> group_names) const {
    ModelParams out;
    for (const auto name : group_names) {
        auto& dst = out.group(name);
        for (const auto& [pname, t] : group(name)) dst.emplace(pname, t.clone_parameter());
        if (is_frozen(name)) out.freeze(name);
    }
    return out;
}

bool ModelParams::bitwise_equal(const ModelParams& other) const {
    const auto a = flat();
    const auto b = other.flat();
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].first != b[i].first || a[i].second.shape() != b[i].second.shape()) return false;
        const auto x = a[i].second.data();
        const auto y = b[i].second.data();
        if (std::memcmp(x.data(), y.data(), x.size_bytes()) != 0) return false;
    }
    return true;
}

// ---- initialization ------------------------------------------------------------

namespace {

class GroupBuilder {
public:
    GroupBuilder(ParamGroup& g, Rng& rng, double std) : g_(g), rng_(rng), std_(std) {}

    void weight(const std::string& name, Shape shape) {
        std::vector<double> v(shape_numel(shape));
        for (auto& x : v) x = rng_.normal(0.0, std_);
        g_[name] = Tensor::parameter(std::move(shape), std::move(v));
    }
    void constant(const std::string& name, Shape shape, double value) {
        std::vector<double> v(shape_numel(shape), value);
        g_[name] = Tensor::parameter(std::move(shape), std::move(v));
    }
    void linear(const std::string& name, std::size_t in, std::size_t out) {
        weight(name + ".w", {in, out});
        constant(name + ".b", {out}, 0.0);
    }
    void norm(const std::string& name, std::size_t width) {
        constant(name + ".g", {width}, 1.0);
        constant(name + ".b", {width}, 0.0);
    }
    void attention(const std::string& name, std::size_t dim) {
        for (const char* p : {".q", ".k", ".v", ".o"}) linear(name + p, dim, dim);
    }
    void mlp(const std::string& name, std::size_t dim, std::size_t hidden) {
        linear(name + ".fc1", dim, hidden);
        linear(name + ".fc2", hidden, dim);
    }

private:
    ParamGroup& g_;
    Rng& rng_;
    double std_;
};

std::string block_name(std::size_t i) { return "block" + std::to_string(i); }

void build_group(ParamGroup& g, std::string_view name, const EncoderConfig& c, Rng& rng) {
    g.clear();
    GroupBuilder b(g, rng, c.init_std);
    const std::size_t d = c.dim;
    if (name == groups::kVision || name == groups::kText) {
        if (name == groups::kVision) {
            b.linear("patch", c.patch_dim, d);
            b.weight("pos", {c.num_patches() + 1, d});
        } else {
            b.weight("tok", {c.vocab_size, d});
            b.weight("pos", {c.max_text_len + 1, d});
        }
        b.weight("cls", {d});
        for (std::size_t i = 0; i < c.layers; ++i) {
            const auto p = block_name(i);
            b.norm(p + ".ln1", d);
            b.attention(p + ".attn", d);
            b.norm(p + ".ln2", d);
            b.mlp(p + ".mlp", d, c.ffn_dim);
        }
        b.norm("ln_f", d);
    } else if (name == groups::kFusion) {
        for (std::size_t i = 0; i < c.layers; ++i) {
            const auto p = block_name(i);
            b.norm(p + ".ln1", d);
            b.attention(p + ".self", d);
            b.norm(p + ".ln2", d);
            b.attention(p + ".cross", d);
            b.norm(p + ".ln3", d);
            b.mlp(p + ".mlp", d, c.ffn_dim);
        }
        b.norm("ln_f", d);
        b.linear("mlm", d, c.vocab_size);
    } else if (name == groups::kProjectionVision || name == groups::kProjectionText) {
        b.linear("proj", d, c.proj_dim);
    } else if (name == groups::kItmHead) {
        b.linear("cls", d, 2);
    } else if (name == groups::kRelevanceHead) {
        b.linear("fc1", 3 * c.proj_dim, c.relevance_hidden);
        b.linear("fc2", c.relevance_hidden, 2);
    } else {
        throw ValidationError("init: unknown parameter group '" + std::string(name) + "'");
    }
}

constexpr std::string_view kAllGroups[] = {
    groups::kVision,        groups::kText,    groups::kFusion,        groups::kProjectionVision,
    groups::kProjectionText, groups::kItmHead, groups::kRelevanceHead};

}  // namespace

ModelParams init_model(const EncoderConfig& config, Rng& rng) {
    config.validate();
    const std::uint64_t base = rng.next_u64();
    ModelParams params;
    for (const auto name : kAllGroups) {
        Rng sub = Rng::substream(base, name);
        build_group(params.group(name), name, config, sub);
    }
    return params;
}

void init_group(ModelParams& params, std::string_view group_name, const EncoderConfig& config,
                Rng& rng) {
    config.validate();
    Rng sub = Rng::substream(rng.next_u64(), group_name);
    build_group(params.group(group_name), group_name, config, sub);
}

// ---- forward -------------------------------------------------------------------

namespace {

const Tensor& param(const ParamGroup& g, const std::string& name) {
    const auto it = g.find(name);
    if (it == g.end()) throw StateError("missing parameter '" + name + "'");
    return it->second;
}

Tensor linear_named(const Tensor& x, const ParamGroup& g, const std::string& name) {
    return linear(x, param(g, name + ".w"), param(g, name + ".b"));
}

Tensor norm_named(const Tensor& x, const ParamGroup& g, const std::string& name, double eps) {
    return layer_norm(x, param(g, name + ".g"), param(g, name + ".b"), eps);
}

// Additive key mask: -inf in columns of padded keys, or undefined if none.
Tensor key_mask(std::size_t query_rows, const std::vector<std::uint8_t>& valid) {
    bool any_pad = false;
    for (const auto v : valid) any_pad = any_pad || v == 0;
    if (!any_pad) return {};
    std::vector<double> m(query_rows * valid.size(), 0.0);
    for (std::size_t r = 0; r < query_rows; ++r) {
        for (std::size_t c = 0; c < valid.size(); ++c) {
            if (!valid[c]) m[r * valid.size() + c] = -std::numeric_limits<double>::infinity();
        }
    }
    return Tensor::matrix(query_rows, valid.size(), std::move(m));
}

Tensor attention(const Tensor& xq, const Tensor& xkv, const ParamGroup& g, const std::string& name,
                 std::size_t heads, const Tensor& mask) {
    const Tensor q = linear_named(xq, g, name + ".q");
    const Tensor k = linear_named(xkv, g, name + ".k");
    const Tensor v = linear_named(xkv, g, name + ".v");
    const std::size_t d = q.dim(1);
    const std::size_t dh = d / heads;
    const double s = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const Tensor qh = heads == 1 ? q : slice_cols(q, h * dh, (h + 1) * dh);
        const Tensor kh = heads == 1 ? k : slice_cols(k, h * dh, (h + 1) * dh);
        const Tensor vh = heads == 1 ? v : slice_cols(v, h * dh, (h + 1) * dh);
        Tensor scores = scale(matmul_nt(qh, kh), s);
        if (mask.defined()) scores = add(scores, mask);
        outs.push_back(matmul(softmax(scores, 1), vh));
    }
    const Tensor joined = heads == 1 ? outs[0] : concat(outs, 1);
    return linear_named(joined, g, name + ".o");
}

Tensor mlp(const Tensor& x, const ParamGroup& g, const std::string& name) {
    return linear_named(gelu(linear_named(x, g, name + ".fc1")), g, name + ".fc2");
}

Tensor self_attention_stack(Tensor x, const ParamGroup& g, const EncoderConfig& c,
                            const Tensor& mask) {
    for (std::size_t i = 0; i < c.layers; ++i) {
        const auto p = block_name(i);
        const Tensor h = norm_named(x, g, p + ".ln1", c.ln_eps);
        x = add(x, attention(h, h, g, p + ".attn", c.heads, mask));
        x = add(x, mlp(norm_named(x, g, p + ".ln2", c.ln_eps), g, p + ".mlp"));
    }
    return norm_named(x, g, "ln_f", c.ln_eps);
}

Tensor with_cls(const Tensor& body, const ParamGroup& g, std::size_t dim) {
    const Tensor cls = reshape(param(g, "cls"), {1, dim});
    return body.defined() ? concat({cls, body}, 0) : cls;
}

}  // namespace

Encoded encode_image(const Tensor& patches, const ModelParams& params, const EncoderConfig& config) {
    if (patches.rank() != 2 || patches.dim(0) != config.num_patches() ||
        patches.dim(1) != config.patch_dim) {
        throw DimensionError("encode_image: patches must be [" +
                             std::to_string(config.num_patches()) + "," +
                             std::to_string(config.patch_dim) + "], got " +
                             shape_to_string(patches.shape()));
    }
    const auto& g = params.group(groups::kVision);
    Tensor x = with_cls(linear_named(patches, g, "patch"), g, config.dim);
    x = add(x, param(g, "pos"));
    const Tensor seq = self_attention_stack(std::move(x), g, config, {});
    Encoded out;
    out.cls = row(seq, 0);
    out.seq = seq;
    out.valid.assign(config.num_patches() + 1, 1);
    return out;
}

Encoded encode_text(std::span<const int> tokens, const ModelParams& params,
                    const EncoderConfig& config) {
    if (tokens.size() > config.max_text_len) {
        throw DimensionError("encode_text: " + std::to_string(tokens.size()) +
                             " tokens exceed max_text_len " + std::to_string(config.max_text_len));
    }
    for (const int t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= config.vocab_size) {
            throw IndexError("encode_text: token " + std::to_string(t) + " outside [0, " +
                             std::to_string(config.vocab_size) + ")");
        }
    }
    const auto& g = params.group(groups::kText);
    const std::size_t rows = tokens.size() + 1;
    Tensor body = tokens.empty() ? Tensor{} : embedding(param(g, "tok"), tokens);
    Tensor x = with_cls(body, g, config.dim);
    x = add(x, slice_rows(param(g, "pos"), 0, rows));

    Encoded out;
    out.valid.assign(rows, 1);
    for (std::size_t i = 0; i < tokens.size(); ++i) out.valid[i + 1] = tokens[i] != kPadToken;
    const Tensor seq = self_attention_stack(std::move(x), g, config, key_mask(rows, out.valid));
    out.cls = row(seq, 0);
    out.seq = seq;
    return out;
}

Tensor fuse(const Encoded& text, const Encoded& image, const ModelParams& params,
            const EncoderConfig& config) {
    if (text.seq.rank() != 2 || image.seq.rank() != 2 || text.seq.dim(1) != config.dim ||
        image.seq.dim(1) != config.dim) {
        throw DimensionError("fuse: width mismatch, text " + shape_to_string(text.seq.shape()) +
                             " vs image " + shape_to_string(image.seq.shape()));
    }
    const auto& g = params.group(groups::kFusion);
    const double eps = config.ln_eps;
    const Tensor self_mask = key_mask(text.seq.dim(0), text.valid);
    const Tensor cross_mask = key_mask(text.seq.dim(0), image.valid);
    Tensor x = text.seq;
    for (std::size_t i = 0; i < config.layers; ++i) {
        const auto p = block_name(i);
        const Tensor h1 = norm_named(x, g, p + ".ln1", eps);
        x = add(x, attention(h1, h1, g, p + ".self", config.heads, self_mask));
        const Tensor h2 = norm_named(x, g, p + ".ln2", eps);
        x = add(x, attention(h2, image.seq, g, p + ".cross", config.heads, cross_mask));
        x = add(x, mlp(norm_named(x, g, p + ".ln3", eps), g, p + ".mlp"));
    }
    return norm_named(x, g, "ln_f", eps);
}

Tensor project(const Tensor& cls, const ParamGroup& head) {
    if (cls.rank() != 1) {
        throw DimensionError("project: expected a vector, got " + shape_to_string(cls.shape()));
    }
    const Tensor& w = param(head, "proj.w");
    if (w.dim(0) != cls.size()) {
        throw DimensionError("project: head expects width " + std::to_string(w.dim(0)) +
                             ", got " + std::to_string(cls.size()));
    }
    return l2_normalize(linear_named(cls, head, "proj"));
}

// ---- momentum ------------------------------------------------------------------

MomentumState make_momentum(const ModelParams& online, double m) {
    if (!(m >= 0.0 && m < 1.0)) throw ParameterError("momentum: m must be in [0, 1)");
    MomentumState state;
    state.m = m;
    for (const auto name : kMomentumGroups) {
        auto& dst = state.shadow.group(name);
        for (const auto& [pname, t] : online.group(name)) dst.emplace(pname, t.detach());
    }
    return state;
}

void momentum_update(const ModelParams& online, MomentumState& state, double m) {
    if (!(m >= 0.0 && m < 1.0)) throw ParameterError("momentum_update: m must be in [0, 1)");
    for (const auto name : kMomentumGroups) {
        const auto& src = online.group(name);
        auto& dst = state.shadow.group(name);
        if (src.size() != dst.size()) {
            throw DimensionError("momentum_update: group '" + std::string(name) +
                                 "' differs from its shadow");
        }
        for (auto& [pname, shadow] : dst) {
            const auto it = src.find(pname);
            if (it == src.end() || it->second.shape() != shadow.shape()) {
                throw DimensionError("momentum_update: shape mismatch for '" + std::string(name) +
                                     "." + pname + "'");
            }
            const auto on = it->second.data();
            auto sh = shadow.mutable_data();
            for (std::size_t i = 0; i < sh.size(); ++i) {
                if (sh[i] != on[i]) sh[i] = m * sh[i] + (1.0 - m) * on[i];
            }
        }
    }
    state.m = m;
}

}  // namespace vlmatch
