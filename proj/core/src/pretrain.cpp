#include "vlmatch/pretrain.hpp"

#include <algorithm>
#include <cmath>

#include "vlmatch/error.hpp"

namespace vlmatch {

// ---- NegativeQueue ---------------------------------------------------------------

NegativeQueue::NegativeQueue(std::size_t capacity, std::size_t width)
    : capacity_(capacity), width_(width), ring_(capacity * width, 0.0) {
    if (capacity == 0 || width == 0) {
        throw ParameterError("negative queue: capacity and width must be positive");
    }
}

void NegativeQueue::enqueue(std::span<const double> row) {
    if (row.size() != width_) {
        throw DimensionError("negative queue: feature width " + std::to_string(row.size()) +
                             " does not match queue width " + std::to_string(width_));
    }
    double ss = 0.0;
    for (const double v : row) ss += v * v;
    if (std::abs(std::sqrt(ss) - 1.0) > 1e-9) {
        throw ValidationError("negative queue: entries must be unit-norm");
    }
    std::size_t slot;
    if (size_ < capacity_) {
        slot = (head_ + size_) % capacity_;
        ++size_;
    } else {
        slot = head_;
        head_ = (head_ + 1) % capacity_;
    }
    std::copy(row.begin(), row.end(), ring_.begin() + static_cast<std::ptrdiff_t>(slot * width_));
}

void NegativeQueue::enqueue(const Tensor& features) {
    if (features.rank() == 1) {
        enqueue(features.data());
        return;
    }
    if (features.rank() != 2 || features.dim(1) != width_) {
        throw DimensionError("negative queue: expected [n," + std::to_string(width_) + "], got " +
                             shape_to_string(features.shape()));
    }
    const auto v = features.data();
    for (std::size_t r = 0; r < features.dim(0); ++r) enqueue(v.subspan(r * width_, width_));
}

Tensor NegativeQueue::as_matrix() const {
    if (size_ == 0) return {};
    std::vector<double> out(size_ * width_);
    for (std::size_t i = 0; i < size_; ++i) {
        const std::size_t slot = (head_ + i) % capacity_;
        std::copy_n(ring_.begin() + static_cast<std::ptrdiff_t>(slot * width_), width_,
                    out.begin() + static_cast<std::ptrdiff_t>(i * width_));
    }
    return Tensor::matrix(size_, width_, std::move(out));
}

std::vector<std::vector<double>> NegativeQueue::entries() const {
    std::vector<std::vector<double>> out;
    for (std::size_t i = 0; i < size_; ++i) {
        const std::size_t slot = (head_ + i) % capacity_;
        const auto first = ring_.begin() + static_cast<std::ptrdiff_t>(slot * width_);
        out.emplace_back(first, first + static_cast<std::ptrdiff_t>(width_));
    }
    return out;
}

// ---- augmentation and masking ------------------------------------------------------

std::vector<int> augment_text(std::span<const int> tokens, double dropout, Rng& rng) {
    std::vector<int> out;
    out.reserve(tokens.size());
    for (const int t : tokens) {
        if (t == kPadToken) continue;
        if (!rng.bernoulli(dropout)) out.push_back(t);
    }
    if (out.empty()) {
        std::vector<int> real;
        for (const int t : tokens) {
            if (t != kPadToken) real.push_back(t);
        }
        if (real.empty()) return {tokens.begin(), tokens.end()};
        out.push_back(real[rng.below(real.size())]);
    }
    return out;
}

Tensor augment_image(const Tensor& patches, double jitter, double dropout, Rng& rng) {
    if (patches.rank() != 2) throw DimensionError("augment_image: patches must be a matrix");
    const std::size_t rows = patches.dim(0), cols = patches.dim(1);
    std::vector<double> v(patches.data().begin(), patches.data().end());
    for (auto& x : v) x += jitter * rng.normal();
    for (std::size_t r = 0; r < rows; ++r) {
        if (rng.bernoulli(dropout)) {
            std::fill_n(v.begin() + static_cast<std::ptrdiff_t>(r * cols), cols, 0.0);
        }
    }
    return Tensor::matrix(rows, cols, std::move(v));
}

MaskedTokens mask_tokens(std::span<const int> tokens, const MaskOptions& options, Rng& rng) {
    if (!(options.rate >= 0.0 && options.rate <= 1.0)) {
        throw ParameterError("mask_tokens: rate must be in [0, 1]");
    }
    if (options.vocab_size <= static_cast<std::size_t>(kFirstWordToken)) {
        throw ParameterError("mask_tokens: vocab too small");
    }
    const bool any_real = std::any_of(tokens.begin(), tokens.end(),
                                      [](int t) { return t != kPadToken; });
    if (!any_real) throw DegenerateInputError("mask_tokens: input has no non-pad tokens");

    MaskedTokens out;
    out.tokens.assign(tokens.begin(), tokens.end());
    const std::uint64_t word_range = options.vocab_size - kFirstWordToken;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] == kPadToken) continue;
        if (!rng.bernoulli(options.rate)) continue;
        out.positions.push_back(i);
        out.labels.push_back(tokens[i]);
        if (!options.replace_80_10_10) {
            out.tokens[i] = kMaskToken;
            continue;
        }
        const double u = rng.uniform();
        if (u < 0.8) {
            out.tokens[i] = kMaskToken;
        } else if (u < 0.9) {
            out.tokens[i] = kFirstWordToken + static_cast<int>(rng.below(word_range));
        }
    }
    return out;
}

PretrainBatch make_pretrain_batch(std::span<const PretrainExample> examples,
                                  const AugmentConfig& augment, const MaskOptions& masking,
                                  Rng& augment_rng, Rng& mask_rng) {
    PretrainBatch batch;
    batch.items.reserve(examples.size());
    for (const auto& ex : examples) {
        PretrainItem item;
        for (int v = 0; v < 2; ++v) {
            item.text_views[v] = augment_text(ex.tokens, augment.token_dropout, augment_rng);
            item.image_views[v] =
                augment_image(ex.patches, augment.patch_jitter, augment.patch_dropout, augment_rng);
        }
        item.masked = mask_tokens(ex.tokens, masking, mask_rng);
        batch.items.push_back(std::move(item));
    }
    return batch;
}

// ---- contrastive ----------------------------------------------------------------

Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw DimensionError("stack_rows: no rows");
    std::vector<Tensor> parts;
    parts.reserve(rows.size());
    for (const auto& r : rows) parts.push_back(reshape(r, {1, r.size()}));
    return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

Tensor info_nce(const Tensor& anchor, const Tensor& positive, const std::vector<Tensor>& negatives,
                double tau) {
    if (!(tau > 0.0)) throw ParameterError("info_nce: tau must be positive");
    if (negatives.empty()) throw ParameterError("info_nce: at least one negative required");
    std::vector<Tensor> sims;
    sims.reserve(negatives.size() + 1);
    sims.push_back(reshape(cosine_similarity(anchor, positive), {1}));
    for (const auto& n : negatives) sims.push_back(reshape(cosine_similarity(anchor, n), {1}));
    const Tensor logits = scale(concat(sims, 0), 1.0 / tau);
    const std::size_t target = 0;
    return cross_entropy(logits, std::span(&target, 1));
}

Tensor info_nce_rows(const Tensor& anchors, const Tensor& positives, const Tensor& negatives,
                     double tau) {
    if (!(tau > 0.0)) throw ParameterError("info_nce: tau must be positive");
    if (anchors.rank() != 2 || anchors.shape() != positives.shape()) {
        throw DimensionError("info_nce_rows: anchors " + shape_to_string(anchors.shape()) +
                             " vs positives " + shape_to_string(positives.shape()));
    }
    const std::size_t b = anchors.dim(0);
    if (negatives.defined()) {
        const Tensor pos = reshape(row_sum(mul(anchors, positives)), {b, 1});
        const Tensor neg = matmul_nt(anchors, negatives);
        const Tensor logits = scale(concat({pos, neg}, 1), 1.0 / tau);
        const std::vector<std::size_t> targets(b, 0);
        return cross_entropy(logits, targets);
    }
    if (b < 2) throw StateError("info_nce_rows: in-batch negatives need at least two rows");
    const Tensor logits = scale(matmul_nt(anchors, positives), 1.0 / tau);
    std::vector<std::size_t> targets(b);
    for (std::size_t i = 0; i < b; ++i) targets[i] = i;
    return cross_entropy(logits, targets);
}

OnlineEncodings encode_online(const PretrainBatch& batch, const ModelParams& params,
                              const EncoderConfig& config) {
    OnlineEncodings out;
    std::vector<Tensor> img_feats, txt_feats;
    const auto& pv = params.group(groups::kProjectionVision);
    const auto& pt = params.group(groups::kProjectionText);
    for (const auto& item : batch.items) {
        out.images.push_back(encode_image(item.image_views[0], params, config));
        out.texts.push_back(encode_text(item.text_views[0], params, config));
        img_feats.push_back(project(out.images.back().cls, pv));
        txt_feats.push_back(project(out.texts.back().cls, pt));
    }
    out.image_features = stack_rows(img_feats);
    out.text_features = stack_rows(txt_feats);
    return out;
}

MomentumFeatures encode_momentum(const PretrainBatch& batch, const MomentumState& momentum,
                                 const EncoderConfig& config) {
    NoGradGuard no_grad;
    MomentumFeatures out;
    const auto& shadow = momentum.shadow;
    const auto& pv = shadow.group(groups::kProjectionVision);
    const auto& pt = shadow.group(groups::kProjectionText);
    for (int v = 0; v < 2; ++v) {
        std::vector<Tensor> img, txt;
        for (const auto& item : batch.items) {
            img.push_back(project(encode_image(item.image_views[v], shadow, config).cls, pv));
            txt.push_back(project(encode_text(item.text_views[v], shadow, config).cls, pt));
        }
        out.image[v] = stack_rows(img).detach();
        out.text[v] = stack_rows(txt).detach();
    }
    return out;
}

ItcResult itc_multiview(const PretrainBatch& batch, const OnlineEncodings& online,
                        const MomentumFeatures& momentum, const ModalQueues& queues, double tau) {
    if (!(tau > 0.0)) throw ParameterError("itc: tau must be positive");
    if (batch.size() < 2 && (queues.image.empty() || queues.text.empty())) {
        throw StateError("itc: empty negative queue with batch size < 2");
    }
    const Tensor image_negs = queues.image.as_matrix();
    const Tensor text_negs = queues.text.as_matrix();
    const Tensor i2t = info_nce_rows(online.image_features, momentum.text[0], text_negs, tau);
    const Tensor t2i = info_nce_rows(online.text_features, momentum.image[0], image_negs, tau);
    const Tensor i2i = info_nce_rows(online.image_features, momentum.image[1], image_negs, tau);
    const Tensor t2t = info_nce_rows(online.text_features, momentum.text[1], text_negs, tau);
    ItcResult out;
    out.image_to_text = i2t.item();
    out.text_to_image = t2i.item();
    out.image_to_image = i2i.item();
    out.text_to_text = t2t.item();
    out.loss = scale(add(add(i2t, t2i), add(i2i, t2t)), 0.25);
    return out;
}

ItcResult itc_multiview(const PretrainBatch& batch, const ModelParams& params,
                        const MomentumState& momentum, const ModalQueues& queues,
                        const EncoderConfig& config, double tau) {
    const auto online = encode_online(batch, params, config);
    const auto mom = encode_momentum(batch, momentum, config);
    return itc_multiview(batch, online, mom, queues, tau);
}

void enqueue_momentum(ModalQueues& queues, const MomentumFeatures& momentum) {
    queues.image.enqueue(momentum.image[0]);
    queues.text.enqueue(momentum.text[0]);
}

// ---- MLM -------------------------------------------------------------------------

MlmResult mlm_loss(const PretrainBatch& batch, const OnlineEncodings& online,
                   const ModelParams& params, const EncoderConfig& config) {
    MlmResult out;
    std::vector<Tensor> rows;
    std::vector<std::size_t> labels;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& m = batch.items[b].masked;
        if (m.positions.empty()) continue;
        const Encoded text = encode_text(m.tokens, params, config);
        const Tensor fused = fuse(text, online.images[b], params, config);
        for (std::size_t k = 0; k < m.positions.size(); ++k) {
            rows.push_back(slice_rows(fused, m.positions[k] + 1, m.positions[k] + 2));
            labels.push_back(static_cast<std::size_t>(m.labels[k]));
        }
    }
    out.masked_positions = labels.size();
    if (labels.empty()) {
        out.skipped = true;
        out.loss = Tensor::scalar(0.0);
        return out;
    }
    const auto& g = params.group(groups::kFusion);
    const Tensor hidden = rows.size() == 1 ? rows[0] : concat(rows, 0);
    const Tensor logits = linear(hidden, g.at("mlm.w"), g.at("mlm.b"));
    out.loss = cross_entropy(logits, labels);
    return out;
}

// ---- ITM -------------------------------------------------------------------------

namespace {

std::size_t sample_excluding(const std::vector<double>& scores, std::size_t exclude, double tau,
                             Rng& rng) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < scores.size(); ++j) {
        if (j != exclude) mx = std::max(mx, scores[j] / tau);
    }
    std::vector<double> w(scores.size(), 0.0);
    double z = 0.0;
    for (std::size_t j = 0; j < scores.size(); ++j) {
        if (j == exclude) continue;
        w[j] = std::exp(scores[j] / tau - mx);
        z += w[j];
    }
    const double u = rng.uniform() * z;
    double acc = 0.0;
    std::size_t last = exclude;
    for (std::size_t j = 0; j < scores.size(); ++j) {
        if (j == exclude) continue;
        acc += w[j];
        last = j;
        if (u < acc) return j;
    }
    return last;
}

}  // namespace

HardNegatives itm_hard_negatives(const Tensor& similarity, double tau, Rng& rng) {
    if (!(tau > 0.0)) throw ParameterError("itm_hard_negatives: tau must be positive");
    if (similarity.rank() != 2 || similarity.dim(0) != similarity.dim(1)) {
        throw DimensionError("itm_hard_negatives: similarity must be square, got " +
                             shape_to_string(similarity.shape()));
    }
    const std::size_t b = similarity.dim(0);
    if (b < 2) throw ParameterError("itm_hard_negatives: batch size must be at least 2");
    const auto s = similarity.data();
    HardNegatives out;
    std::vector<double> scores(b);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < b; ++j) scores[j] = s[i * b + j];
        out.text_for_image.push_back(sample_excluding(scores, i, tau, rng));
    }
    for (std::size_t j = 0; j < b; ++j) {
        for (std::size_t i = 0; i < b; ++i) scores[i] = s[i * b + j];
        out.image_for_text.push_back(sample_excluding(scores, j, tau, rng));
    }
    return out;
}

Tensor itm_logits(const Encoded& text, const Encoded& image, const ModelParams& params,
                  const EncoderConfig& config) {
    const Tensor fused = fuse(text, image, params, config);
    const auto& head = params.group(groups::kItmHead);
    return linear(row(fused, 0), head.at("cls.w"), head.at("cls.b"));
}

Tensor itm_loss(const OnlineEncodings& online, const ModelParams& params,
                const EncoderConfig& config, const HardNegatives& negatives) {
    const std::size_t b = online.texts.size();
    if (online.images.size() != b || negatives.text_for_image.size() != b ||
        negatives.image_for_text.size() != b) {
        throw DimensionError("itm_loss: pairing does not match batch size");
    }
    std::vector<Tensor> pos, neg;
    for (std::size_t i = 0; i < b; ++i) {
        pos.push_back(itm_logits(online.texts[i], online.images[i], params, config));
    }
    for (std::size_t i = 0; i < b; ++i) {
        const std::size_t t = negatives.text_for_image[i];
        const std::size_t im = negatives.image_for_text[i];
        if (t >= b || im >= b) throw IndexError("itm_loss: negative index out of range");
        neg.push_back(itm_logits(online.texts[t], online.images[i], params, config));
        neg.push_back(itm_logits(online.texts[i], online.images[im], params, config));
    }
    const std::vector<std::size_t> ones(pos.size(), 1);
    const std::vector<std::size_t> zeros(neg.size(), 0);
    const Tensor lp = cross_entropy(stack_rows(pos), ones);
    const Tensor ln = cross_entropy(stack_rows(neg), zeros);
    return scale(add(lp, ln), 0.5);
}

// ---- combined ----------------------------------------------------------------------

PretrainLoss pretrain_loss(const PretrainBatch& batch, const ModelParams& params,
                           const MomentumState& momentum, const ModalQueues& queues,
                           const EncoderConfig& config, double tau,
                           const PretrainWeights& weights, Rng& sampling_rng) {
    PretrainLoss out;
    const auto online = encode_online(batch, params, config);
    out.momentum = encode_momentum(batch, momentum, config);
    out.itc = itc_multiview(batch, online, out.momentum, queues, tau);
    out.mlm = mlm_loss(batch, online, params, config);

    Tensor sim;
    {
        NoGradGuard no_grad;
        sim = matmul_nt(online.image_features.detach(), online.text_features.detach());
    }
    const auto negatives = itm_hard_negatives(sim, tau, sampling_rng);
    out.itm = itm_loss(online, params, config, negatives);

    Tensor total = scale(out.itc.loss, weights.itc);
    if (!out.mlm.skipped) total = add(total, scale(out.mlm.loss, weights.mlm));
    out.total = add(total, scale(out.itm, weights.itm));
    return out;
}

}  // namespace vlmatch
