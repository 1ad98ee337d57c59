#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "vlmatch/encoders.hpp"
#include "vlmatch/rng.hpp"
#include "vlmatch/tensor.hpp"

namespace vlmatch {

/// Fixed-capacity FIFO of unit-norm momentum features for one modality.
class NegativeQueue {
public:
    NegativeQueue(std::size_t capacity, std::size_t width);

    /// Appends rows of a [n, width] matrix (or one [width] vector) in order,
    /// evicting the oldest entries past capacity.
    void enqueue(const Tensor& features);
    void enqueue(std::span<const double> row);

    std::size_t size() const noexcept { return size_; }
    std::size_t capacity() const noexcept { return capacity_; }
    std::size_t width() const noexcept { return width_; }
    bool empty() const noexcept { return size_ == 0; }

    /// Entries oldest-first as a constant [size, width] matrix.
    Tensor as_matrix() const;
    std::vector<std::vector<double>> entries() const;

    friend bool operator==(const NegativeQueue&, const NegativeQueue&) = default;

private:
    std::size_t capacity_;
    std::size_t width_;
    std::vector<double> ring_;
    std::size_t head_ = 0;  // slot of the oldest entry
    std::size_t size_ = 0;
};

struct ModalQueues {
    NegativeQueue image;
    NegativeQueue text;

    ModalQueues(std::size_t capacity, std::size_t width)
        : image(capacity, width), text(capacity, width) {}
};

/// Augmentation knobs for the single-modal views.
struct AugmentConfig {
    double token_dropout = 0.1;
    double patch_jitter = 0.05;
    double patch_dropout = 0.1;
};

/// Drops each non-pad token with the given rate, keeping at least one.
std::vector<int> augment_text(std::span<const int> tokens, double dropout, Rng& rng);
/// Gaussian jitter on every value, then zeroes whole patches at the dropout rate.
Tensor augment_image(const Tensor& patches, double jitter, double dropout, Rng& rng);

struct MaskedTokens {
    std::vector<int> tokens;
    std::vector<std::size_t> positions;  ///< indices into tokens
    std::vector<int> labels;             ///< original ids at positions
};

struct MaskOptions {
    double rate = 0.15;
    bool replace_80_10_10 = true;
    std::size_t vocab_size = 128;
};

/// BERT-style masking over non-pad positions. Throws DegenerateInputError when
/// every position is padding.
MaskedTokens mask_tokens(std::span<const int> tokens, const MaskOptions& options, Rng& rng);

struct PretrainExample {
    std::vector<int> tokens;
    Tensor patches;
};

struct PretrainItem {
    std::vector<int> text_views[2];
    Tensor image_views[2];
    MaskedTokens masked;
};

struct PretrainBatch {
    std::vector<PretrainItem> items;
    std::size_t size() const { return items.size(); }
};

/// Draws both augmented views of every example plus its MLM mask plan.
PretrainBatch make_pretrain_batch(std::span<const PretrainExample> examples,
                                  const AugmentConfig& augment, const MaskOptions& masking,
                                  Rng& augment_rng, Rng& mask_rng);

/// -log softmax of the positive among {positive} U negatives, with cosine
/// similarities scaled by 1/tau.
Tensor info_nce(const Tensor& anchor, const Tensor& positive, const std::vector<Tensor>& negatives,
                double tau);

/// Row-wise InfoNCE for unit-norm anchors [B,p] against positives [B,p].
/// With a defined negatives matrix [K,p] every row shares those negatives;
/// otherwise the other rows of `positives` act as in-batch negatives.
Tensor info_nce_rows(const Tensor& anchors, const Tensor& positives, const Tensor& negatives,
                     double tau);

/// Online encodings shared by the three pre-training losses.
struct OnlineEncodings {
    std::vector<Encoded> images;  ///< view 1 of each image
    std::vector<Encoded> texts;   ///< view 1 of each text
    Tensor image_features;        ///< [B, proj_dim], unit rows
    Tensor text_features;         ///< [B, proj_dim], unit rows
};

OnlineEncodings encode_online(const PretrainBatch& batch, const ModelParams& params,
                              const EncoderConfig& config);

struct MomentumFeatures {
    Tensor image[2];  ///< [B, proj_dim] per view, constants
    Tensor text[2];
};

MomentumFeatures encode_momentum(const PretrainBatch& batch, const MomentumState& momentum,
                                 const EncoderConfig& config);

struct ItcResult {
    Tensor loss;
    double image_to_text = 0.0;
    double text_to_image = 0.0;
    double image_to_image = 0.0;
    double text_to_text = 0.0;
};

/// Mean of the four InfoNCE terms: image->text, text->image, image->image
/// and text->text. Cross-modal positives are the paired item's momentum
/// feature, single-modal positives the momentum feature of the second view.
/// Negatives come from the momentum queues; with an empty queue the other
/// in-batch momentum features are used instead (requires B >= 2).
ItcResult itc_multiview(const PretrainBatch& batch, const OnlineEncodings& online,
                        const MomentumFeatures& momentum, const ModalQueues& queues, double tau);

ItcResult itc_multiview(const PretrainBatch& batch, const ModelParams& params,
                        const MomentumState& momentum, const ModalQueues& queues,
                        const EncoderConfig& config, double tau);

/// Pushes the batch's first-view momentum features onto the queues.
void enqueue_momentum(ModalQueues& queues, const MomentumFeatures& momentum);

struct MlmResult {
    Tensor loss;  ///< scalar; 0 constant when skipped
    std::size_t masked_positions = 0;
    bool skipped = false;
};

/// Cross-entropy of vocabulary logits from the fused (vision-conditioned)
/// sequence at every masked position in the batch.
MlmResult mlm_loss(const PretrainBatch& batch, const OnlineEncodings& online,
                   const ModelParams& params, const EncoderConfig& config);

struct HardNegatives {
    std::vector<std::size_t> text_for_image;  ///< negative text index per image
    std::vector<std::size_t> image_for_text;  ///< negative image index per text
};

/// similarity: [B,B] image-row x text-column ITC similarities. Each image
/// draws one text j != i with probability softmax(sim[i,j]/tau); each text
/// draws one image the same way over its column.
HardNegatives itm_hard_negatives(const Tensor& similarity, double tau, Rng& rng);

/// 2-way classifier over the fused CLS row. Positives are the true pairs,
/// negatives the mined pairs; positive and negative means are weighted
/// equally.
Tensor itm_loss(const OnlineEncodings& online, const ModelParams& params,
                const EncoderConfig& config, const HardNegatives& negatives);

/// Logits [2] of the ITM head for one text/image pair.
Tensor itm_logits(const Encoded& text, const Encoded& image, const ModelParams& params,
                  const EncoderConfig& config);

struct PretrainWeights {
    double itc = 1.0;
    double mlm = 1.0;
    double itm = 1.0;
};

struct PretrainLoss {
    Tensor total;
    ItcResult itc;
    MlmResult mlm;
    Tensor itm;
    MomentumFeatures momentum;
};

/// Total weighted pre-training loss for one batch; does not touch queues.
PretrainLoss pretrain_loss(const PretrainBatch& batch, const ModelParams& params,
                           const MomentumState& momentum, const ModalQueues& queues,
                           const EncoderConfig& config, double tau,
                           const PretrainWeights& weights, Rng& sampling_rng);

/// Stacks rank-1 tensors as rows of a matrix.
Tensor stack_rows(const std::vector<Tensor>& rows);

}  // namespace vlmatch
