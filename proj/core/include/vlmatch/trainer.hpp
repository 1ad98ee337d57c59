#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmatch/encoders.hpp"
#include "vlmatch/optim.hpp"
#include "vlmatch/pretrain.hpp"
#include "vlmatch/synthdata.hpp"

namespace vlmatch {

enum class Stage { Pretrain, FinetuneRelevance, FinetuneRetrieval };

std::string stage_name(Stage s);
/// Accepts "pretrain", "finetune_relevance", "finetune_retrieval".
Stage parse_stage(std::string_view name);

struct TrainConfig {
    Stage stage = Stage::Pretrain;
    std::size_t steps = 300;
    std::size_t batch_size = 16;
    std::string optimizer = "adam";  ///< "adam" or "sgd"
    AdamConfig adam;
    double head_lr = 0.0;  ///< relevance head learning rate; 0 means lr
    std::uint64_t seed = 1;
    double tau = 0.07;
    double momentum = 0.99;
    std::size_t queue_size = 1024;
    double lambda = 1.0;
    PretrainWeights weights;
    AugmentConfig augment;
    double mask_rate = 0.15;
    bool freeze_vision = true;  ///< fine-tune stages only
    bool freeze_image_projection = false;
    bool from_scratch = false;  ///< finetune_retrieval: fresh init instead of the base weights

    /// Defaults tuned per stage; plain TrainConfig{} carries pretrain values.
    static TrainConfig defaults(Stage stage);
    /// Throws ValidationError.
    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j, Stage stage);
};

struct StepRecord {
    std::size_t step = 0;
    std::map<std::string, double> losses;
};

struct StageInputs {
    const Dataset* data = nullptr;
    EncoderConfig encoder;
    const ModelParams* base = nullptr;     ///< required by both fine-tune stages
    const ModelParams* teacher = nullptr;  ///< required by retrieval fine-tuning
};

struct StageResult {
    ModelParams params;
    std::vector<StepRecord> log;
    std::optional<MomentumState> momentum;  ///< pretrain only
    std::optional<ModalQueues> queues;      ///< pretrain only
};

using StepCallback = std::function<void(const StepRecord&, const ModelParams&)>;

/// Runs one training stage. Pretrain starts from a fresh model (or `base`
/// when given); fine-tune stages start from a copy of `base` with the vision
/// group frozen. Throws ValidationError for a bad config and StateError
/// naming any missing checkpoint.
StageResult run_stage(const TrainConfig& config, const StageInputs& inputs,
                      const StepCallback& on_step = {});

/// Training examples used by each stage (held-out queries excluded).
std::vector<RelevanceRecord> training_relevance(const Dataset& data);
std::vector<ClickRecord> training_clicks(const Dataset& data);

/// JSON-lines: {"step": n, "losses": {...}} per line.
std::string metrics_jsonl(const std::vector<StepRecord>& log);
void write_metrics_log(const std::vector<StepRecord>& log, const std::filesystem::path& path);

/// Trailing moving average with the given window (shorter at the start).
std::vector<double> moving_average(const std::vector<double>& values, std::size_t window);

}  // namespace vlmatch
