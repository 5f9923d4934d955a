#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowlm/checkpoint.hpp"
#include "flowlm/discretizer.hpp"
#include "flowlm/model.hpp"
#include "flowlm/optimizer.hpp"

namespace flowlm {

enum class TrainPhase { pretrain, finetune };

struct TrainConfig {
    TrainPhase phase = TrainPhase::pretrain;
    std::int64_t steps = 20000;
    int batch_size = 64;
    int seq_len = 32;
    double learning_rate = 1e-4;
    std::int64_t warmup_steps = 1000;
    double mask_rate = 0.15;
    std::uint64_t seed = 0;
    std::int64_t checkpoint_every = 0;  // 0 = final checkpoint only
    std::string checkpoint_dir;         // empty = keep in memory only
    std::int64_t log_every = 100;       // 0 = silent
    bool from_scratch = false;          // fine-tune without a pre-trained checkpoint
    bool deterministic = true;
    AdamConfig adam;

    // Provenance only.
    std::string train_path;
    std::string discretizer_path;
    std::string init_checkpoint;
    // Merged into the checkpoint metadata (resolved experiment config, fingerprints).
    nlohmann::json extra_metadata = nlohmann::json::object();

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j, TrainPhase phase);
};

struct TrainReport {
    std::string phase;  // "pretrain" | "finetune"
    std::string provenance;  // "random-init", "pretrained:<fingerprint>", "resumed:<step>"
    std::uint64_t seed = 0;
    std::vector<std::pair<std::int64_t, double>> loss_curve;
    double wall_seconds = 0.0;
    std::string final_checkpoint;
    std::vector<std::string> warnings;
    nlohmann::json config;

    nlohmann::json to_json() const;
    void write_loss_csv(const std::string& path) const;
};

template <typename T>
struct TrainResult {
    TrainReport report;
    ModelCheckpoint<T> checkpoint;
};

/// MLM pre-training. `start` may be a checkpoint of the same phase to resume from.
template <typename T>
TrainResult<T> pretrain(const TrainConfig& config, const ModelConfig& model_config,
                        const TokenizedTable& table, const std::string& discretizer_fingerprint,
                        std::optional<ModelCheckpoint<T>> start = std::nullopt);

/// Classification fine-tuning. `start` is the pre-trained checkpoint (or a fine-tuned
/// one to resume). With config.from_scratch the model is randomly initialised from
/// `model_config` instead and `start` must be empty.
template <typename T>
TrainResult<T> finetune(const TrainConfig& config, const ModelConfig& model_config,
                        const TokenizedTable& table, const std::string& discretizer_fingerprint,
                        std::optional<ModelCheckpoint<T>> start = std::nullopt);

/// Fraction of (masked position, feature) pairs whose argmax prediction equals the
/// original id, over `num_sequences` randomly sampled and masked segments.
template <typename T>
double masked_prediction_accuracy(const FlowTransformer<T>& model, const TokenizedTable& table,
                                  int seq_len, double mask_rate, int num_sequences, Rng& rng);

}  // namespace flowlm
