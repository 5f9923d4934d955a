#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "flowlm/discretizer.hpp"
#include "flowlm/model.hpp"
#include "flowlm/optimizer.hpp"

namespace flowlm {

enum class Phase { pretrained, finetuned };

std::string_view to_string(Phase p);
Phase parse_phase(std::string_view s);

struct CheckpointMetadata {
    Phase phase = Phase::pretrained;
    std::int64_t step = 0;
    std::uint64_t seed = 0;
    std::string discretizer_fingerprint;
    // Fine-tuned without a pre-trained starting point.
    bool from_scratch = false;
    // Resolved configuration, input fingerprints, generator states, ...
    nlohmann::json extra = nlohmann::json::object();

    nlohmann::json to_json() const;
    static CheckpointMetadata from_json(const nlohmann::json& j);
};

template <typename T>
struct ModelCheckpoint {
    FlowTransformer<T> model;
    CheckpointMetadata metadata;
    std::optional<AdamState<T>> optimizer;
};

inline constexpr int kCheckpointVersion = 1;
inline constexpr std::size_t kWeightsHeaderBytes = 16;

/// Writes `<dir>/manifest.json` and `<dir>/weights.bin`. weights.bin is a 16-byte
/// header ("FLOWLMW1", version, tensor count) followed by little-endian arrays in
/// manifest order.
template <typename T>
void save_checkpoint(const ModelCheckpoint<T>& ckpt, const std::string& dir);

/// Loads a checkpoint directory, converting precision if the stored dtype differs
/// from T. When `discretizer` is given, vocab sizes must agree (ConfigMismatch).
template <typename T>
ModelCheckpoint<T> load_checkpoint(const std::string& dir,
                                   const DiscretizerModel* discretizer = nullptr);

nlohmann::json read_manifest(const std::string& dir);

/// Fingerprint of the stored weights; identifies a checkpoint in reports.
std::string checkpoint_fingerprint(const std::string& dir);

extern template void save_checkpoint(const ModelCheckpoint<float>&, const std::string&);
extern template void save_checkpoint(const ModelCheckpoint<double>&, const std::string&);
extern template ModelCheckpoint<float> load_checkpoint(const std::string&, const DiscretizerModel*);
extern template ModelCheckpoint<double> load_checkpoint(const std::string&, const DiscretizerModel*);

}  // namespace flowlm
