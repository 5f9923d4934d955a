#include "flowlm/trainer.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <fmt/format.h>

#include "flowlm/errors.hpp"
#include "flowlm/sequencer.hpp"

namespace flowlm {

namespace {

std::string_view phase_name(TrainPhase p) { return p == TrainPhase::pretrain ? "pretrain" : "finetune"; }

Phase checkpoint_phase(TrainPhase p) {
    return p == TrainPhase::pretrain ? Phase::pretrained : Phase::finetuned;
}

template <typename T>
Batch draw_batch(const TrainConfig& config, const TokenizedTable& table,
                 const VocabSizes& vocab_sizes, SeedStreams& streams) {
    const auto length = static_cast<std::size_t>(config.seq_len);
    std::vector<FlowSequence> segments;
    segments.reserve(static_cast<std::size_t>(config.batch_size));
    for (int i = 0; i < config.batch_size; ++i) {
        segments.push_back(sample_training_segment(table, length, streams.sampler));
    }
    if (config.phase == TrainPhase::finetune) {
        return collate_batch(segments, length);
    }
    // Redraw the masks in the (rare) case nothing was selected.
    for (;;) {
        std::vector<MaskedSequence> masked;
        masked.reserve(segments.size());
        bool any = false;
        for (const auto& seg : segments) {
            masked.push_back(apply_mlm_mask(seg, config.mask_rate, streams.masking, vocab_sizes));
            for (const auto m : masked.back().mlm_mask) any = any || m;
        }
        if (any) {
            return collate_batch(masked, length);
        }
    }
}

nlohmann::json rng_states(const SeedStreams& s) {
    return {{"sampler", rng_state(s.sampler)},
            {"masking", rng_state(s.masking)},
            {"dropout", rng_state(s.dropout)}};
}

template <typename T>
ModelCheckpoint<T> snapshot(const FlowTransformer<T>& model, const AdamState<T>& adam,
                            const TrainConfig& config, const std::string& disc_fp,
                            std::int64_t step, bool from_scratch, const SeedStreams& streams) {
    CheckpointMetadata meta;
    meta.phase = checkpoint_phase(config.phase);
    meta.step = step;
    meta.seed = config.seed;
    meta.discretizer_fingerprint = disc_fp;
    meta.from_scratch = from_scratch;
    meta.extra = config.extra_metadata;
    meta.extra["train_config"] = config.to_json();
    meta.extra["rng"] = rng_states(streams);
    return ModelCheckpoint<T>{model, std::move(meta), adam};
}

template <typename T>
TrainResult<T> run_training(const TrainConfig& config, const ModelConfig& model_config,
                            const TokenizedTable& table, const std::string& disc_fp,
                            std::optional<ModelCheckpoint<T>> start) {
    if (table.empty()) {
        throw EmptyTable();
    }
    if (config.seq_len > model_config.max_len && !start) {
        throw ShapeMismatch("seq_len exceeds the model's max_len");
    }
    const auto t0 = std::chrono::steady_clock::now();

    TrainReport report;
    report.phase = std::string(phase_name(config.phase));
    report.seed = config.seed;
    report.config = config.to_json();

    SeedStreams streams = seed_all(config.seed);
    std::optional<FlowTransformer<T>> model;
    AdamState<T> adam;
    std::int64_t step = 0;
    bool from_scratch = config.phase == TrainPhase::finetune && config.from_scratch;

    if (start) {
        if (config.phase == TrainPhase::finetune && config.from_scratch) {
            throw ConfigMismatch("--from-scratch fine-tuning cannot also start from a checkpoint");
        }
        if (!start->metadata.discretizer_fingerprint.empty() && !disc_fp.empty() &&
            start->metadata.discretizer_fingerprint != disc_fp) {
            throw FingerprintMismatch("checkpoint was trained with discretizer " +
                                      start->metadata.discretizer_fingerprint + ", got " + disc_fp);
        }
        if (start->model.config().vocab_sizes != model_config.vocab_sizes) {
            throw ConfigMismatch("checkpoint vocab sizes disagree with the discretizer");
        }
        if (config.seq_len > start->model.config().max_len) {
            throw ShapeMismatch("seq_len exceeds the checkpoint's max_len");
        }
        model.emplace(start->model);
        if (start->metadata.phase == checkpoint_phase(config.phase)) {
            // Resume: continue the step counter, optimizer moments and generators.
            step = start->metadata.step;
            from_scratch = start->metadata.from_scratch;
            adam = start->optimizer ? std::move(*start->optimizer) : AdamState<T>::zeros_like(model->parameters());
            if (start->metadata.extra.contains("rng")) {
                const nlohmann::json& rng = start->metadata.extra.at("rng");
                restore_rng_state(streams.sampler, rng.at("sampler").get<std::string>());
                restore_rng_state(streams.masking, rng.at("masking").get<std::string>());
                restore_rng_state(streams.dropout, rng.at("dropout").get<std::string>());
            }
            report.provenance = "resumed:" + std::to_string(step);
        } else {
            if (config.phase == TrainPhase::pretrain) {
                throw ConfigMismatch("pre-training cannot start from a fine-tuned checkpoint");
            }
            adam = AdamState<T>::zeros_like(model->parameters());
            report.provenance = "pretrained:" + std::to_string(start->metadata.step);
        }
    } else {
        if (config.phase == TrainPhase::finetune && !config.from_scratch) {
            throw ConfigMismatch("fine-tuning needs a pre-trained checkpoint (or --from-scratch)");
        }
        model.emplace(model_config);
        model->init_parameters(streams.init);
        adam = AdamState<T>::zeros_like(model->parameters());
        report.provenance = "random-init";
    }

    if (config.phase == TrainPhase::finetune) {
        if (!table.labeled) {
            throw MissingLabels();
        }
        std::size_t malicious = 0;
        for (const auto& f : table.flows) malicious += f.binary_label == BinaryLabel::malicious;
        if (malicious == 0 || malicious == table.size()) {
            const auto msg = fmt::format("training table contains only {} flows; the classifier will "
                                         "degenerate to a single class",
                                         malicious == 0 ? "benign" : "malicious");
            report.warnings.push_back(msg);
            if (config.log_every > 0) std::cerr << "warning: " << msg << '\n';
        }
    }

    const auto& vocab = model->config().vocab_sizes;
    for (; step < config.steps; ++step) {
        const double lr = learning_rate_at(step, config.steps, config.warmup_steps, config.learning_rate);
        const Batch batch = draw_batch<T>(config, table, vocab, streams);
        model->parameters().zero_grad();
        const T loss = config.phase == TrainPhase::pretrain
                           ? model->mlm_forward(batch, Mode::training, &streams.dropout)
                           : model->cls_forward(batch, Mode::training, &streams.dropout);
        model->backward();
        const double grad_norm = parameter_update(model->parameters(), adam, lr, config.adam);
        report.loss_curve.emplace_back(step, static_cast<double>(loss));

        if (config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.steps)) {
            std::cerr << fmt::format("[{}] step {:>6}/{} loss {:.5f} lr {:.3e} grad_norm {:.3f}\n",
                                     phase_name(config.phase), step, config.steps,
                                     static_cast<double>(loss), lr, grad_norm);
        }
        if (!config.checkpoint_dir.empty() && config.checkpoint_every > 0 &&
            (step + 1) % config.checkpoint_every == 0 && step + 1 < config.steps) {
            const auto dir = (std::filesystem::path(config.checkpoint_dir) /
                              fmt::format("step-{:06d}", step + 1)).string();
            save_checkpoint(snapshot(*model, adam, config, disc_fp, step + 1, from_scratch, streams), dir);
        }
    }

    auto final_ckpt = snapshot(*model, adam, config, disc_fp, step, from_scratch, streams);
    if (!config.checkpoint_dir.empty()) {
        save_checkpoint(final_ckpt, config.checkpoint_dir);
        report.final_checkpoint = config.checkpoint_dir;
    }
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return TrainResult<T>{std::move(report), std::move(final_ckpt)};
}

}  // namespace

nlohmann::json TrainConfig::to_json() const {
    return {{"phase", std::string(phase_name(phase))},
            {"steps", steps},
            {"batch_size", batch_size},
            {"seq_len", seq_len},
            {"learning_rate", learning_rate},
            {"warmup_steps", warmup_steps},
            {"mask_rate", mask_rate},
            {"seed", seed},
            {"checkpoint_every", checkpoint_every},
            {"from_scratch", from_scratch},
            {"deterministic", deterministic},
            {"adam",
             {{"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}, {"clip_norm", adam.clip_norm}}},
            {"train_path", train_path},
            {"discretizer_path", discretizer_path},
            {"init_checkpoint", init_checkpoint}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, TrainPhase phase) {
    TrainConfig c;
    c.phase = phase;
    if (phase == TrainPhase::finetune) {
        c.steps = 5000;
    }
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seq_len = j.value("seq_len", c.seq_len);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.mask_rate = j.value("mask_rate", c.mask_rate);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.log_every = j.value("log_every", c.log_every);
    c.from_scratch = j.value("from_scratch", c.from_scratch);
    c.deterministic = j.value("deterministic", c.deterministic);
    if (j.contains("adam")) {
        const auto& a = j.at("adam");
        c.adam.beta1 = a.value("beta1", c.adam.beta1);
        c.adam.beta2 = a.value("beta2", c.adam.beta2);
        c.adam.eps = a.value("eps", c.adam.eps);
        c.adam.clip_norm = a.value("clip_norm", c.adam.clip_norm);
    }
    return c;
}

nlohmann::json TrainReport::to_json() const {
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& [step, loss] : loss_curve) {
        curve.push_back({step, loss});
    }
    return {{"phase", phase},
            {"provenance", provenance},
            {"seed", seed},
            {"loss_curve", curve},
            {"wall_seconds", wall_seconds},
            {"final_checkpoint", final_checkpoint},
            {"warnings", warnings},
            {"config", config}};
}

void TrainReport::write_loss_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write '" + path + "'");
    }
    out << "step,loss\n";
    for (const auto& [step, loss] : loss_curve) {
        out << step << ',' << fmt::format("{}", loss) << '\n';
    }
}

template <typename T>
TrainResult<T> pretrain(const TrainConfig& config, const ModelConfig& model_config,
                        const TokenizedTable& table, const std::string& discretizer_fingerprint,
                        std::optional<ModelCheckpoint<T>> start) {
    TrainConfig c = config;
    c.phase = TrainPhase::pretrain;
    return run_training<T>(c, model_config, table, discretizer_fingerprint, std::move(start));
}

template <typename T>
TrainResult<T> finetune(const TrainConfig& config, const ModelConfig& model_config,
                        const TokenizedTable& table, const std::string& discretizer_fingerprint,
                        std::optional<ModelCheckpoint<T>> start) {
    TrainConfig c = config;
    c.phase = TrainPhase::finetune;
    return run_training<T>(c, model_config, table, discretizer_fingerprint, std::move(start));
}

template <typename T>
double masked_prediction_accuracy(const FlowTransformer<T>& model, const TokenizedTable& table,
                                  int seq_len, double mask_rate, int num_sequences, Rng& rng) {
    const auto length = static_cast<std::size_t>(seq_len);
    std::size_t correct = 0;
    std::size_t total = 0;
    const int chunk = 32;
    for (int done = 0; done < num_sequences; done += chunk) {
        std::vector<MaskedSequence> masked;
        for (int i = done; i < std::min(num_sequences, done + chunk); ++i) {
            masked.push_back(apply_mlm_mask(sample_training_segment(table, length, rng), mask_rate,
                                            rng, model.config().vocab_sizes));
        }
        const Batch batch = collate_batch(masked, length);
        const auto logits = model.mlm_logits(model.hidden_states(batch));
        for (std::size_t p = 0; p < batch.positions(); ++p) {
            if (!batch.mlm_mask[p]) continue;
            for (std::size_t f = 0; f < kNumFeatures; ++f) {
                Eigen::Index best = 0;
                logits[f].row(static_cast<Eigen::Index>(p)).maxCoeff(&best);
                correct += static_cast<std::int32_t>(best) == batch.targets[p * kNumFeatures + f];
                ++total;
            }
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

template TrainResult<float> pretrain(const TrainConfig&, const ModelConfig&, const TokenizedTable&,
                                     const std::string&, std::optional<ModelCheckpoint<float>>);
template TrainResult<double> pretrain(const TrainConfig&, const ModelConfig&, const TokenizedTable&,
                                      const std::string&, std::optional<ModelCheckpoint<double>>);
template TrainResult<float> finetune(const TrainConfig&, const ModelConfig&, const TokenizedTable&,
                                     const std::string&, std::optional<ModelCheckpoint<float>>);
template TrainResult<double> finetune(const TrainConfig&, const ModelConfig&, const TokenizedTable&,
                                      const std::string&, std::optional<ModelCheckpoint<double>>);
template double masked_prediction_accuracy(const FlowTransformer<float>&, const TokenizedTable&,
                                           int, double, int, Rng&);
template double masked_prediction_accuracy(const FlowTransformer<double>&, const TokenizedTable&,
                                           int, double, int, Rng&);

}  // namespace flowlm
