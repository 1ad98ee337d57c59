#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmatch/rng.hpp"
#include "vlmatch/tensor.hpp"

namespace vlmatch {

inline constexpr int kPadToken = 0;
inline constexpr int kMaskToken = 1;
/// First id available to ordinary word tokens.
inline constexpr int kFirstWordToken = 2;

namespace groups {
inline constexpr std::string_view kVision = "vision";
inline constexpr std::string_view kText = "text";
inline constexpr std::string_view kFusion = "fusion";
inline constexpr std::string_view kProjectionVision = "projection_vision";
inline constexpr std::string_view kProjectionText = "projection_text";
inline constexpr std::string_view kItmHead = "itm_head";
inline constexpr std::string_view kRelevanceHead = "relevance_head";
}  // namespace groups

struct EncoderConfig {
    std::size_t dim = 32;
    std::size_t layers = 2;
    std::size_t heads = 2;
    std::size_t vocab_size = 128;
    std::size_t max_text_len = 16;
    std::size_t patch_grid = 4;
    std::size_t patch_dim = 8;
    std::size_t proj_dim = 16;
    std::size_t ffn_dim = 64;
    std::size_t relevance_hidden = 32;
    double ln_eps = 1e-5;
    double init_std = 0.02;

    std::size_t num_patches() const { return patch_grid * patch_grid; }
    /// Throws ValidationError.
    void validate() const;

    nlohmann::json to_json() const;
    static EncoderConfig from_json(const nlohmann::json& j);
    friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

using ParamGroup = std::map<std::string, Tensor, std::less<>>;

/// Named parameter groups for the whole model, plus the set of frozen groups.
/// Full parameter names are "<group>.<name>", e.g. "vision.block0.attn.q.w".
class ModelParams {
public:
    ParamGroup& group(std::string_view name);
    const ParamGroup& group(std::string_view name) const;
    bool has_group(std::string_view name) const;
    const Tensor& at(std::string_view group_name, std::string_view param) const;
    void set(std::string_view group_name, const std::string& param, Tensor value);

    const std::map<std::string, ParamGroup, std::less<>>& groups() const { return groups_; }
    std::vector<std::string> group_names() const;

    void freeze(std::string_view group_name);
    void unfreeze(std::string_view group_name);
    bool is_frozen(std::string_view group_name) const;
    const std::set<std::string, std::less<>>& frozen() const { return frozen_; }

    /// (full name, tensor) pairs in lexicographic order.
    std::vector<std::pair<std::string, Tensor>> flat() const;
    std::size_t parameter_count() const;
    std::size_t parameter_count(std::span<const std::string_view> group_names) const;
    void zero_grad();
    /// Deep copy into fresh parameter leaves; frozen set is copied.
    ModelParams clone() const;
    /// Copy containing only the named groups (fresh leaves).
    ModelParams subset(std::span<const std::string_view> group_names) const;
    bool bitwise_equal(const ModelParams& other) const;

private:
    std::map<std::string, ParamGroup, std::less<>> groups_;
    std::set<std::string, std::less<>> frozen_;
};

/// Fresh model with every group: N(0, init_std) weights, zero biases,
/// unit layer-norm gains.
ModelParams init_model(const EncoderConfig& config, Rng& rng);
/// Creates (or re-creates) only the named group.
void init_group(ModelParams& params, std::string_view group_name, const EncoderConfig& config,
                Rng& rng);

struct Encoded {
    Tensor cls;                       ///< [dim]
    Tensor seq;                       ///< [rows, dim]; row 0 is the CLS summary
    std::vector<std::uint8_t> valid;  ///< per row, 0 marks padding
};

/// patches: [grid^2, patch_dim]. Output rows: CLS then one per patch.
Encoded encode_image(const Tensor& patches, const ModelParams& params, const EncoderConfig& config);

/// tokens: ids in [0, vocab_size), at most max_text_len of them; kPadToken
/// positions are masked out of attention. A learned CLS row is prepended, so
/// the sequence has tokens.size() + 1 rows.
Encoded encode_text(std::span<const int> tokens, const ModelParams& params,
                    const EncoderConfig& config);

/// Cross-attention fusion: queries from text rows, keys/values from image
/// rows. Output has the same row count as text.seq.
Tensor fuse(const Encoded& text, const Encoded& image, const ModelParams& params,
            const EncoderConfig& config);

/// Linear head then L2 normalization: unit vector of width proj_dim.
Tensor project(const Tensor& cls, const ParamGroup& head);

/// Shadow (EMA) copies of the single-modal encoders and their projections.
struct MomentumState {
    ModelParams shadow;
    double m = 0.99;
};

inline constexpr std::string_view kMomentumGroups[] = {groups::kVision, groups::kText,
                                                       groups::kProjectionVision,
                                                       groups::kProjectionText};

MomentumState make_momentum(const ModelParams& online, double m);

/// shadow <- m * shadow + (1 - m) * online for the momentum groups.
void momentum_update(const ModelParams& online, MomentumState& state, double m);

}  // namespace vlmatch
