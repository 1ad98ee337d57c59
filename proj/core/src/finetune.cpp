#include "vlmatch/finetune.hpp"

#include <cmath>
#include <string>

#include "vlmatch/error.hpp"
#include "vlmatch/pretrain.hpp"

namespace vlmatch {

int degree_to_label(int degree) {
    if (degree < 0 || degree > 2) {
        throw ValidationError("relevance degree " + std::to_string(degree) + " outside {0,1,2}");
    }
    return degree >= 1 ? 1 : 0;
}

Tensor query_embedding(std::span<const int> tokens, const ModelParams& params,
                       const EncoderConfig& config) {
    return project(encode_text(tokens, params, config).cls,
                   params.group(groups::kProjectionText));
}

Tensor image_embedding(const Tensor& patches, const ModelParams& params,
                       const EncoderConfig& config) {
    return project(encode_image(patches, params, config).cls,
                   params.group(groups::kProjectionVision));
}

Tensor relevance_logits(const Tensor& query_emb, const Tensor& image_emb, const ParamGroup& head) {
    if (query_emb.rank() != 1 || query_emb.shape() != image_emb.shape()) {
        throw DimensionError("relevance_logits: embeddings " + shape_to_string(query_emb.shape()) +
                             " and " + shape_to_string(image_emb.shape()));
    }
    const auto get = [&](const char* name) -> const Tensor& {
        const auto it = head.find(name);
        if (it == head.end()) throw StateError(std::string("relevance head lacks ") + name);
        return it->second;
    };
    const Tensor features = concat({query_emb, image_emb, mul(query_emb, image_emb)}, 0);
    const Tensor hidden = gelu(linear(features, get("fc1.w"), get("fc1.b")));
    return linear(hidden, get("fc2.w"), get("fc2.b"));
}

Tensor relevance_logits(std::span<const int> query, const Tensor& image, const ModelParams& params,
                        const EncoderConfig& config) {
    return relevance_logits(query_embedding(query, params, config),
                            image_embedding(image, params, config),
                            params.group(groups::kRelevanceHead));
}

Tensor relevance_loss(std::span<const RelevanceExample> batch, const ModelParams& params,
                      const EncoderConfig& config) {
    if (batch.empty()) throw ParameterError("relevance_loss: empty batch");
    std::vector<Tensor> logits;
    std::vector<std::size_t> labels;
    for (const auto& ex : batch) {
        labels.push_back(static_cast<std::size_t>(degree_to_label(ex.degree)));
        logits.push_back(relevance_logits(ex.query, ex.image, params, config));
    }
    return cross_entropy(stack_rows(logits), labels);
}

double positive_probability(const Tensor& logits) {
    if (logits.rank() != 1 || logits.size() != 2) {
        throw DimensionError("positive_probability: expected [2] logits, got " +
                             shape_to_string(logits.shape()));
    }
    const double d = logits[0] - logits[1];
    return 1.0 / (1.0 + std::exp(d));
}

double teacher_score(const Tensor& query_emb, const Tensor& image_emb, const ModelParams* teacher) {
    if (teacher == nullptr) throw StateError("teacher_score: no teacher checkpoint loaded");
    NoGradGuard no_grad;
    return positive_probability(
        relevance_logits(query_emb.detach(), image_emb.detach(),
                         teacher->group(groups::kRelevanceHead)));
}

double teacher_score(std::span<const int> query, const Tensor& image, const ModelParams* teacher,
                     const EncoderConfig& config) {
    if (teacher == nullptr) throw StateError("teacher_score: no teacher checkpoint loaded");
    NoGradGuard no_grad;
    return positive_probability(relevance_logits(query, image, *teacher, config));
}

Tensor click_contrastive_loss(const Tensor& queries, const Tensor& images, double tau) {
    if (!(tau > 0.0)) throw ParameterError("click_contrastive_loss: tau must be positive");
    if (queries.rank() != 2 || queries.shape() != images.shape()) {
        throw DimensionError("click_contrastive_loss: queries " +
                             shape_to_string(queries.shape()) + " vs images " +
                             shape_to_string(images.shape()));
    }
    const std::size_t b = queries.dim(0);
    if (b < 2) throw ParameterError("click_contrastive_loss: batch size must be at least 2");
    const Tensor s = scale(matmul_nt(queries, images), 1.0 / tau);
    std::vector<std::size_t> diag(b);
    for (std::size_t i = 0; i < b; ++i) diag[i] = i;
    return scale(add(cross_entropy(s, diag), cross_entropy(transpose(s), diag)), 0.5);
}

namespace {

void embed_batch(std::span<const ClickExample> batch, const ModelParams& params,
                 const EncoderConfig& config, Tensor& q, Tensor& i) {
    std::vector<Tensor> qs, is;
    for (const auto& ex : batch) {
        qs.push_back(query_embedding(ex.query, params, config));
        is.push_back(image_embedding(ex.image, params, config));
    }
    q = stack_rows(qs);
    i = stack_rows(is);
}

}  // namespace

Tensor click_contrastive_loss(std::span<const ClickExample> batch, const ModelParams& params,
                              const EncoderConfig& config, double tau) {
    if (batch.size() < 2) {
        throw ParameterError("click_contrastive_loss: batch size must be at least 2");
    }
    Tensor q, i;
    embed_batch(batch, params, config, q, i);
    return click_contrastive_loss(q, i, tau);
}

Tensor kd_loss(const Tensor& cosines, std::span<const double> teacher) {
    if (cosines.rank() != 1 || cosines.size() != teacher.size()) {
        throw DimensionError("kd_loss: " + shape_to_string(cosines.shape()) + " cosines for " +
                             std::to_string(teacher.size()) + " teacher scores");
    }
    constexpr double slack = 1e-9;
    for (const double s : cosines.data()) {
        if (!(s >= -1.0 - slack && s <= 1.0 + slack)) {
            throw ValidationError("kd_loss: student cosine outside [-1, 1]");
        }
    }
    for (const double p : teacher) {
        if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("kd_loss: teacher score outside [0, 1]");
    }
    const Tensor target = Tensor::vector({teacher.begin(), teacher.end()});
    const Tensor diff = sub(add_scalar(scale(cosines, 0.5), 0.5), target);
    return mean(mul(diff, diff));
}

std::vector<double> teacher_matrix(std::span<const ClickExample> batch, const ModelParams* teacher,
                                   const EncoderConfig& config) {
    if (teacher == nullptr) throw StateError("multitask_loss: no teacher checkpoint loaded");
    NoGradGuard no_grad;
    std::vector<Tensor> qs, is;
    for (const auto& ex : batch) {
        qs.push_back(query_embedding(ex.query, *teacher, config));
        is.push_back(image_embedding(ex.image, *teacher, config));
    }
    std::vector<double> out;
    out.reserve(batch.size() * batch.size());
    for (const auto& q : qs) {
        for (const auto& i : is) out.push_back(teacher_score(q, i, teacher));
    }
    return out;
}

MultitaskLoss multitask_loss(std::span<const ClickExample> batch, const ModelParams& params,
                             const ModelParams* teacher, const EncoderConfig& config, double tau,
                             double lambda, std::span<const double> teacher_scores) {
    if (!(lambda >= 0.0)) throw ParameterError("multitask_loss: lambda must be >= 0");
    if (batch.size() < 2) throw ParameterError("multitask_loss: batch size must be at least 2");
    Tensor q, i;
    embed_batch(batch, params, config, q, i);
    MultitaskLoss out;
    out.contrastive = click_contrastive_loss(q, i, tau);
    if (lambda == 0.0 && teacher == nullptr && teacher_scores.empty()) {
        out.kd = Tensor::scalar(0.0);
        out.total = out.contrastive;
        return out;
    }
    std::vector<double> computed;
    if (teacher_scores.empty()) {
        computed = teacher_matrix(batch, teacher, config);
        teacher_scores = computed;
    }
    const std::size_t b = batch.size();
    if (teacher_scores.size() != b * b) {
        throw DimensionError("multitask_loss: expected " + std::to_string(b * b) +
                             " teacher scores");
    }
    const Tensor cosines = reshape(matmul_nt(q, i), {b * b});
    out.kd = kd_loss(cosines, teacher_scores);
    out.total = lambda == 0.0 ? out.contrastive : add(out.contrastive, scale(out.kd, lambda));
    return out;
}

}  // namespace vlmatch
