#include "vlmatch/trainer.hpp"

#include <algorithm>
#include <unordered_set>

#include "vlmatch/error.hpp"
#include "vlmatch/json_field.hpp"
#include "vlmatch/finetune.hpp"
#include "vlmatch/io.hpp"

namespace vlmatch {

std::string stage_name(Stage s) {
    switch (s) {
        case Stage::Pretrain: return "pretrain";
        case Stage::FinetuneRelevance: return "finetune_relevance";
        case Stage::FinetuneRetrieval: return "finetune_retrieval";
    }
    return "unknown";
}

Stage parse_stage(std::string_view name) {
    if (name == "pretrain") return Stage::Pretrain;
    if (name == "finetune_relevance") return Stage::FinetuneRelevance;
    if (name == "finetune_retrieval") return Stage::FinetuneRetrieval;
    throw ValidationError("unknown stage '" + std::string(name) + "'");
}

TrainConfig TrainConfig::defaults(Stage stage) {
    TrainConfig c;
    c.stage = stage;
    if (stage == Stage::FinetuneRelevance) {
        c.steps = 3000;
        c.batch_size = 32;
        c.adam.lr = 1e-4;
        c.head_lr = 1e-2;
    }
    return c;
}

void TrainConfig::validate() const {
    if (steps < 1) throw ValidationError("train config: steps must be >= 1");
    if (batch_size < 2) throw ValidationError("train config: batch_size must be >= 2");
    if (!(adam.lr > 0.0)) throw ValidationError("train config: lr must be positive");
    if (optimizer != "adam" && optimizer != "sgd") {
        throw ValidationError("train config: optimizer must be adam or sgd");
    }
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
        throw ValidationError("train config: betas must be in [0, 1)");
    }
    if (!(adam.eps > 0.0)) throw ValidationError("train config: eps must be positive");
    if (!(head_lr >= 0.0)) throw ValidationError("train config: head_lr must be >= 0");
    if (!(tau > 0.0)) throw ValidationError("train config: tau must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) {
        throw ValidationError("train config: momentum must be in [0, 1)");
    }
    if (queue_size < 1) throw ValidationError("train config: queue_size must be >= 1");
    if (!(lambda >= 0.0)) throw ValidationError("train config: lambda must be >= 0");
    if (!(mask_rate >= 0.0 && mask_rate <= 1.0)) {
        throw ValidationError("train config: mask_rate must be in [0, 1]");
    }
    if (!(weights.itc >= 0.0 && weights.mlm >= 0.0 && weights.itm >= 0.0)) {
        throw ValidationError("train config: loss weights must be >= 0");
    }
    if (!(augment.token_dropout >= 0.0 && augment.token_dropout < 1.0) ||
        !(augment.patch_dropout >= 0.0 && augment.patch_dropout < 1.0) ||
        !(augment.patch_jitter >= 0.0)) {
        throw ValidationError("train config: bad augmentation settings");
    }
}

nlohmann::json TrainConfig::to_json() const {
    return {{"stage", stage_name(stage)},
            {"steps", steps},
            {"batch_size", batch_size},
            {"optimizer", optimizer},
            {"lr", adam.lr},
            {"beta1", adam.beta1},
            {"beta2", adam.beta2},
            {"eps", adam.eps},
            {"head_lr", head_lr},
            {"seed", seed},
            {"tau", tau},
            {"momentum", momentum},
            {"queue_size", queue_size},
            {"lambda", lambda},
            {"w_itc", weights.itc},
            {"w_mlm", weights.mlm},
            {"w_itm", weights.itm},
            {"mask_rate", mask_rate},
            {"token_dropout", augment.token_dropout},
            {"patch_jitter", augment.patch_jitter},
            {"patch_dropout", augment.patch_dropout},
            {"freeze_vision", freeze_vision},
            {"freeze_image_projection", freeze_image_projection},
            {"from_scratch", from_scratch}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, Stage stage) {
    TrainConfig c = defaults(stage);
    try {
        c.steps = json_field(j, "steps", c.steps);
        c.batch_size = json_field(j, "batch_size", c.batch_size);
        c.optimizer = json_field(j, "optimizer", c.optimizer);
        c.adam.lr = json_field(j, "lr", c.adam.lr);
        c.adam.beta1 = json_field(j, "beta1", c.adam.beta1);
        c.adam.beta2 = json_field(j, "beta2", c.adam.beta2);
        c.adam.eps = json_field(j, "eps", c.adam.eps);
        c.head_lr = json_field(j, "head_lr", c.head_lr);
        c.seed = json_field(j, "seed", c.seed);
        c.tau = json_field(j, "tau", c.tau);
        c.momentum = json_field(j, "momentum", c.momentum);
        c.queue_size = json_field(j, "queue_size", c.queue_size);
        c.lambda = json_field(j, "lambda", c.lambda);
        c.weights.itc = json_field(j, "w_itc", c.weights.itc);
        c.weights.mlm = json_field(j, "w_mlm", c.weights.mlm);
        c.weights.itm = json_field(j, "w_itm", c.weights.itm);
        c.mask_rate = json_field(j, "mask_rate", c.mask_rate);
        c.augment.token_dropout = json_field(j, "token_dropout", c.augment.token_dropout);
        c.augment.patch_jitter = json_field(j, "patch_jitter", c.augment.patch_jitter);
        c.augment.patch_dropout = json_field(j, "patch_dropout", c.augment.patch_dropout);
        c.freeze_vision = json_field(j, "freeze_vision", c.freeze_vision);
        c.freeze_image_projection = json_field(j, "freeze_image_projection", c.freeze_image_projection);
        c.from_scratch = json_field(j, "from_scratch", c.from_scratch);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
}

std::vector<RelevanceRecord> training_relevance(const Dataset& data) {
    std::vector<RelevanceRecord> out;
    for (const auto& r : data.relevance) {
        if (!data.is_heldout(r.query_id)) out.push_back(r);
    }
    return out;
}

std::vector<ClickRecord> training_clicks(const Dataset& data) {
    std::vector<ClickRecord> out;
    for (const auto& c : data.clicks) {
        if (!data.is_heldout(c.query_id)) out.push_back(c);
    }
    return out;
}

namespace {

class Optimizer {
public:
    explicit Optimizer(const TrainConfig& c) {
        if (c.optimizer == "sgd") {
            sgd_.emplace(c.adam.lr);
        } else {
            AdamConfig a = c.adam;
            if (c.head_lr > 0.0) a.group_lr[std::string(groups::kRelevanceHead)] = c.head_lr;
            adam_.emplace(a);
        }
    }
    void step(ModelParams& p) {
        if (adam_) {
            adam_->step(p);
        } else {
            sgd_->step(p);
        }
    }

private:
    std::optional<Adam> adam_;
    std::optional<Sgd> sgd_;
};

// Vision CLS features of every item under a frozen vision tower. Projection
// of these constants reproduces image_embedding exactly.
std::vector<Tensor> frozen_image_cls(const Dataset& data, const ModelParams& params,
                                     const EncoderConfig& config) {
    NoGradGuard no_grad;
    std::vector<Tensor> out;
    out.reserve(data.items.size());
    for (const auto& it : data.items) out.push_back(encode_image(it.patches, params, config).cls.detach());
    return out;
}

void check_data(const StageInputs& in) {
    if (in.data == nullptr) throw StateError("run_stage: no dataset");
    if (in.data->items.size() < 2) throw ValidationError("run_stage: dataset needs >= 2 items");
}

StageResult run_pretrain(const TrainConfig& c, const StageInputs& in, const StepCallback& cb) {
    const Dataset& data = *in.data;
    StageResult res;
    if (in.base != nullptr) {
        res.params = in.base->clone();
    } else {
        Rng init = Rng::substream(c.seed, "init");
        res.params = init_model(in.encoder, init);
    }
    MomentumState momentum = make_momentum(res.params, c.momentum);
    ModalQueues queues(c.queue_size, in.encoder.proj_dim);
    Optimizer opt(c);
    Rng sampling = Rng::substream(c.seed, "sampling");
    Rng augment = Rng::substream(c.seed, "augment");
    Rng masking = Rng::substream(c.seed, "masking");
    const MaskOptions mask{c.mask_rate, true, in.encoder.vocab_size};
    const std::size_t b = std::min(c.batch_size, data.items.size());

    std::vector<std::size_t> order(data.items.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t step = 1; step <= c.steps; ++step) {
        // Distinct items per batch: first b entries of a partial shuffle.
        for (std::size_t i = 0; i < b; ++i) std::swap(order[i], order[i + sampling.below(order.size() - i)]);
        std::vector<PretrainExample> examples;
        for (std::size_t i = 0; i < b; ++i) {
            const auto& it = data.items[order[i]];
            examples.push_back({it.tokens, it.patches});
        }
        const auto batch = make_pretrain_batch(examples, c.augment, mask, augment, masking);
        res.params.zero_grad();
        const auto loss =
            pretrain_loss(batch, res.params, momentum, queues, in.encoder, c.tau, c.weights, sampling);
        loss.total.backward();
        opt.step(res.params);
        momentum_update(res.params, momentum, c.momentum);
        enqueue_momentum(queues, loss.momentum);

        StepRecord rec{step,
                       {{"total", loss.total.item()},
                        {"itc", loss.itc.loss.item()},
                        {"mlm", loss.mlm.loss.item()},
                        {"itm", loss.itm.item()}}};
        if (cb) cb(rec, res.params);
        res.log.push_back(std::move(rec));
    }
    res.params.zero_grad();
    res.momentum = std::move(momentum);
    res.queues = std::move(queues);
    return res;
}

void apply_freezes(const TrainConfig& c, ModelParams& p) {
    for (const auto& g : p.group_names()) p.unfreeze(g);
    if (c.freeze_vision) p.freeze(groups::kVision);
    if (c.freeze_image_projection) p.freeze(groups::kProjectionVision);
}

StageResult run_relevance(const TrainConfig& c, const StageInputs& in, const StepCallback& cb) {
    if (in.base == nullptr) throw StateError("finetune_relevance: missing base checkpoint");
    const Dataset& data = *in.data;
    const auto records = training_relevance(data);
    if (records.empty()) throw ValidationError("finetune_relevance: no training relevance pairs");
    StageResult res;
    res.params = in.base->clone();
    apply_freezes(c, res.params);
    Optimizer opt(c);
    Rng sampling = Rng::substream(c.seed, "sampling");
    const auto cls = c.freeze_vision ? frozen_image_cls(data, res.params, in.encoder)
                                     : std::vector<Tensor>{};

    for (std::size_t step = 1; step <= c.steps; ++step) {
        res.params.zero_grad();
        std::vector<Tensor> logits;
        std::vector<std::size_t> labels;
        const auto& pv = res.params.group(groups::kProjectionVision);
        const auto& head = res.params.group(groups::kRelevanceHead);
        for (std::size_t k = 0; k < c.batch_size; ++k) {
            const auto& r = records[sampling.below(records.size())];
            const auto& q = data.items[r.query_id];
            const auto& im = data.items[r.image_id];
            const Tensor qe = query_embedding(q.query_tokens, res.params, in.encoder);
            const Tensor ie = c.freeze_vision ? project(cls[r.image_id], pv)
                                              : image_embedding(im.patches, res.params, in.encoder);
            logits.push_back(relevance_logits(qe, ie, head));
            labels.push_back(static_cast<std::size_t>(degree_to_label(r.degree)));
        }
        const Tensor loss = cross_entropy(stack_rows(logits), labels);
        loss.backward();
        opt.step(res.params);
        StepRecord rec{step, {{"relevance", loss.item()}}};
        if (cb) cb(rec, res.params);
        res.log.push_back(std::move(rec));
    }
    res.params.zero_grad();
    return res;
}

StageResult run_retrieval(const TrainConfig& c, const StageInputs& in, const StepCallback& cb) {
    if (in.base == nullptr && !c.from_scratch) throw StateError("finetune_retrieval: missing base checkpoint");
    if (in.teacher == nullptr) throw StateError("finetune_retrieval: missing teacher checkpoint");
    const Dataset& data = *in.data;
    const auto records = training_clicks(data);
    if (records.size() < 2) throw ValidationError("finetune_retrieval: fewer than 2 click pairs");
    StageResult res;
    if (c.from_scratch) {
        Rng init = Rng::substream(c.seed, "init");
        res.params = init_model(in.encoder, init);
    } else {
        res.params = in.base->clone();
    }
    apply_freezes(c, res.params);
    Optimizer opt(c);
    Rng sampling = Rng::substream(c.seed, "sampling");
    const auto cls = c.freeze_vision ? frozen_image_cls(data, res.params, in.encoder)
                                     : std::vector<Tensor>{};

    // Teacher embeddings are constants; cache them per item.
    std::vector<Tensor> tq, ti;
    {
        NoGradGuard no_grad;
        for (const auto& it : data.items) {
            tq.push_back(query_embedding(it.query_tokens, *in.teacher, in.encoder).detach());
            ti.push_back(image_embedding(it.patches, *in.teacher, in.encoder).detach());
        }
    }

    for (std::size_t step = 1; step <= c.steps; ++step) {
        // Batch without repeated queries or images, so in-batch negatives
        // are never duplicates of a positive.
        std::vector<const ClickRecord*> batch;
        std::unordered_set<std::uint64_t> used_q, used_i;
        for (std::size_t attempts = 0; batch.size() < c.batch_size && attempts < 64 * c.batch_size;
             ++attempts) {
            const auto& r = records[sampling.below(records.size())];
            if (used_q.count(r.query_id) || used_i.count(r.image_id)) continue;
            used_q.insert(r.query_id);
            used_i.insert(r.image_id);
            batch.push_back(&r);
        }
        if (batch.size() < 2) throw StateError("finetune_retrieval: cannot form a batch");
        const std::size_t b = batch.size();

        res.params.zero_grad();
        const auto& pv = res.params.group(groups::kProjectionVision);
        std::vector<Tensor> qs, is;
        for (const auto* r : batch) {
            qs.push_back(query_embedding(data.items[r->query_id].query_tokens, res.params, in.encoder));
            is.push_back(c.freeze_vision
                             ? project(cls[r->image_id], pv)
                             : image_embedding(data.items[r->image_id].patches, res.params, in.encoder));
        }
        const Tensor q = stack_rows(qs), i = stack_rows(is);
        const Tensor contrastive = click_contrastive_loss(q, i, c.tau);
        Tensor total = contrastive;
        double kd_value = 0.0;
        {
            std::vector<double> teacher;
            teacher.reserve(b * b);
            for (const auto* rq : batch) {
                for (const auto* ri : batch) {
                    teacher.push_back(teacher_score(tq[rq->query_id], ti[ri->image_id], in.teacher));
                }
            }
            const Tensor kd = kd_loss(reshape(matmul_nt(q, i), {b * b}), teacher);
            kd_value = kd.item();
            if (c.lambda != 0.0) total = add(contrastive, scale(kd, c.lambda));
        }
        total.backward();
        opt.step(res.params);
        StepRecord rec{step,
                       {{"total", total.item()}, {"contrastive", contrastive.item()}, {"kd", kd_value}}};
        if (cb) cb(rec, res.params);
        res.log.push_back(std::move(rec));
    }
    res.params.zero_grad();
    return res;
}

}  // namespace

StageResult run_stage(const TrainConfig& config, const StageInputs& inputs,
                      const StepCallback& on_step) {
    config.validate();
    inputs.encoder.validate();
    check_data(inputs);
    switch (config.stage) {
        case Stage::Pretrain: return run_pretrain(config, inputs, on_step);
        case Stage::FinetuneRelevance: return run_relevance(config, inputs, on_step);
        case Stage::FinetuneRetrieval: return run_retrieval(config, inputs, on_step);
    }
    throw ValidationError("run_stage: unknown stage");
}

std::string metrics_jsonl(const std::vector<StepRecord>& log) {
    std::string out;
    for (const auto& r : log) {
        out += nlohmann::json{{"step", r.step}, {"losses", r.losses}}.dump() + "\n";
    }
    return out;
}

void write_metrics_log(const std::vector<StepRecord>& log, const std::filesystem::path& path) {
    write_file_atomic(path, metrics_jsonl(log));
}

std::vector<double> moving_average(const std::vector<double>& values, std::size_t window) {
    if (window == 0) throw ParameterError("moving_average: window must be positive");
    std::vector<double> out(values.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        acc += values[i];
        if (i >= window) acc -= values[i - window];
        out[i] = acc / static_cast<double>(std::min(i + 1, window));
    }
    return out;
}

}  // namespace vlmatch
