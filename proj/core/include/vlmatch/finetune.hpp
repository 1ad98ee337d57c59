#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "vlmatch/encoders.hpp"
#include "vlmatch/tensor.hpp"

namespace vlmatch {

/// 0 -> 0 (negative); 1 or 2 -> 1 (positive). Throws ValidationError otherwise.
int degree_to_label(int degree);

struct RelevanceExample {
    std::vector<int> query;
    Tensor image;
    int degree = 0;
};

struct ClickExample {
    std::vector<int> query;
    Tensor image;
    int clicks = 2;
};

/// Projected text CLS / image CLS unit vectors.
Tensor query_embedding(std::span<const int> tokens, const ModelParams& params,
                       const EncoderConfig& config);
Tensor image_embedding(const Tensor& patches, const ModelParams& params,
                       const EncoderConfig& config);

/// MLP over [q; i; q*i] -> two logits.
Tensor relevance_logits(const Tensor& query_emb, const Tensor& image_emb, const ParamGroup& head);
Tensor relevance_logits(std::span<const int> query, const Tensor& image, const ModelParams& params,
                        const EncoderConfig& config);

/// Mean 2-class cross-entropy against degree_to_label. Throws ParameterError
/// on an empty batch.
Tensor relevance_loss(std::span<const RelevanceExample> batch, const ModelParams& params,
                      const EncoderConfig& config);

/// Positive-class softmax probability of a [2] logit vector.
double positive_probability(const Tensor& logits);

/// Relevance probability from a teacher model; no gradient is recorded.
/// A null teacher throws StateError.
double teacher_score(std::span<const int> query, const Tensor& image, const ModelParams* teacher,
                     const EncoderConfig& config);
double teacher_score(const Tensor& query_emb, const Tensor& image_emb, const ModelParams* teacher);

/// Bidirectional in-batch InfoNCE over unit rows q[B,p], i[B,p]:
/// (CE(S, diag) + CE(S^T, diag)) / 2 with S = q i^T / tau.
Tensor click_contrastive_loss(const Tensor& queries, const Tensor& images, double tau);
Tensor click_contrastive_loss(std::span<const ClickExample> batch, const ModelParams& params,
                              const EncoderConfig& config, double tau);

/// mean(((s + 1) / 2 - p)^2). s in [-1,1], p in [0,1], else ValidationError.
Tensor kd_loss(const Tensor& cosines, std::span<const double> teacher);

struct MultitaskLoss {
    Tensor total;
    Tensor contrastive;
    Tensor kd;
};

/// Teacher scores for every (query a, image b) in-batch pair, row-major [B*B].
std::vector<double> teacher_matrix(std::span<const ClickExample> batch, const ModelParams* teacher,
                                   const EncoderConfig& config);

/// click_contrastive + lambda * kd, where KD runs over all B x B in-batch
/// query/image pairs. teacher_scores may be precomputed (row-major [B*B]);
/// when empty they are computed from `teacher`.
MultitaskLoss multitask_loss(std::span<const ClickExample> batch, const ModelParams& params,
                             const ModelParams* teacher, const EncoderConfig& config, double tau,
                             double lambda, std::span<const double> teacher_scores = {});

}  // namespace vlmatch
