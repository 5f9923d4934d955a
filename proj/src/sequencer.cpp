#include "flowlm/sequencer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <nlohmann/json.hpp>

#include "flowlm/errors.hpp"

namespace flowlm {

namespace {

TokenizedFlow pad_token() {
    TokenizedFlow t;
    t.ids.fill(kPadId);
    t.order_index = -1;
    return t;
}

}  // namespace

std::size_t FlowSequence::real_count() const noexcept {
    return static_cast<std::size_t>(std::count(pad_mask.begin(), pad_mask.end(), 1));
}

FlowSequence sample_training_segment(const TokenizedTable& table, std::size_t length, Rng& rng) {
    if (table.empty()) {
        throw EmptyTable();
    }
    if (length < 1) {
        throw Error(ErrorKind::data, "sequence length must be at least 1");
    }
    const std::size_t n = table.size();
    const std::size_t last_start = n > length ? n - length : 0;
    std::uniform_int_distribution<std::size_t> dist(0, last_start);
    const std::size_t start = dist(rng);

    FlowSequence seq;
    seq.tokens.reserve(length);
    seq.pad_mask.reserve(length);
    for (std::size_t i = 0; i < length; ++i) {
        if (start + i < n) {
            seq.tokens.push_back(table.flows[start + i]);
            seq.pad_mask.push_back(1);
        } else {
            seq.tokens.push_back(pad_token());
            seq.pad_mask.push_back(0);
        }
    }
    return seq;
}

MaskedSequence apply_mlm_mask(const FlowSequence& seq, double rate, Rng& rng,
                              const VocabSizes& vocab_sizes, const MaskBranchProbs& probs) {
    if (!(rate > 0.0 && rate < 1.0)) {
        throw Error(ErrorKind::data, "mask rate must lie strictly between 0 and 1");
    }
    MaskedSequence out;
    out.source = seq;
    const std::size_t length = seq.length();
    out.inputs.resize(length);
    out.targets.resize(length);
    out.mlm_mask.assign(length, 0);
    out.branches.assign(length, MaskBranch::none);

    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t i = 0; i < length; ++i) {
        const auto& original = seq.tokens[i].ids;
        out.targets[i] = original;
        out.inputs[i] = original;
        if (!seq.pad_mask[i]) {
            continue;
        }
        if (unit(rng) >= rate) {
            continue;
        }
        out.mlm_mask[i] = 1;
        const double u = unit(rng);
        if (u < probs.mask) {
            out.inputs[i].fill(kMaskId);
            out.branches[i] = MaskBranch::mask;
        } else if (u < probs.mask + probs.random) {
            for (std::size_t f = 0; f < kNumFeatures; ++f) {
                const std::int32_t hi = std::max(vocab_sizes[f] - 1, kFirstDataId);
                std::uniform_int_distribution<std::int32_t> pick(kFirstDataId, hi);
                out.inputs[i][f] = pick(rng);
            }
            out.branches[i] = MaskBranch::random;
        } else {
            out.branches[i] = MaskBranch::keep;
        }
    }
    return out;
}

std::vector<FlowSequence> segment_for_eval(const TokenizedTable& table, std::size_t length) {
    if (length < 1) {
        throw Error(ErrorKind::data, "sequence length must be at least 1");
    }
    std::vector<FlowSequence> windows;
    const std::size_t n = table.size();
    windows.reserve((n + length - 1) / length);
    for (std::size_t start = 0; start < n; start += length) {
        FlowSequence seq;
        seq.tokens.reserve(length);
        seq.pad_mask.reserve(length);
        for (std::size_t i = 0; i < length; ++i) {
            if (start + i < n) {
                seq.tokens.push_back(table.flows[start + i]);
                seq.pad_mask.push_back(1);
            } else {
                seq.tokens.push_back(pad_token());
                seq.pad_mask.push_back(0);
            }
        }
        windows.push_back(std::move(seq));
    }
    return windows;
}

namespace {

void check_length(std::size_t actual, std::size_t expected, std::size_t index) {
    if (actual != expected) {
        throw RaggedBatch("sequence " + std::to_string(index) + " has length " +
                          std::to_string(actual) + ", batch length is " +
                          std::to_string(expected));
    }
}

Batch empty_batch(std::size_t n, std::size_t length) {
    Batch b;
    b.batch = n;
    b.length = length;
    b.ids.resize(n * length * kNumFeatures);
    b.pad_mask.resize(n * length);
    b.labels.resize(n * length);
    return b;
}

}  // namespace

Batch collate_batch(const std::vector<FlowSequence>& seqs, std::size_t length) {
    for (std::size_t s = 0; s < seqs.size(); ++s) {
        check_length(seqs[s].length(), length, s);
    }
    Batch b = empty_batch(seqs.size(), length);
    for (std::size_t s = 0; s < seqs.size(); ++s) {
        for (std::size_t l = 0; l < length; ++l) {
            const std::size_t p = s * length + l;
            const auto& tok = seqs[s].tokens[l];
            std::copy(tok.ids.begin(), tok.ids.end(), b.ids.begin() + static_cast<std::ptrdiff_t>(p * kNumFeatures));
            b.pad_mask[p] = seqs[s].pad_mask[l];
            b.labels[p] = seqs[s].pad_mask[l] ? static_cast<std::int8_t>(tok.binary_label) : std::int8_t{-1};
        }
    }
    return b;
}

Batch collate_batch(const std::vector<MaskedSequence>& seqs, std::size_t length) {
    for (std::size_t s = 0; s < seqs.size(); ++s) {
        check_length(seqs[s].length(), length, s);
    }
    Batch b = empty_batch(seqs.size(), length);
    b.targets.resize(b.ids.size());
    b.mlm_mask.resize(b.pad_mask.size());
    for (std::size_t s = 0; s < seqs.size(); ++s) {
        const auto& seq = seqs[s];
        for (std::size_t l = 0; l < length; ++l) {
            const std::size_t p = s * length + l;
            const auto offset = static_cast<std::ptrdiff_t>(p * kNumFeatures);
            std::copy(seq.inputs[l].begin(), seq.inputs[l].end(), b.ids.begin() + offset);
            std::copy(seq.targets[l].begin(), seq.targets[l].end(), b.targets.begin() + offset);
            b.pad_mask[p] = seq.source.pad_mask[l];
            b.mlm_mask[p] = seq.mlm_mask[l];
            b.labels[p] = seq.source.pad_mask[l]
                              ? static_cast<std::int8_t>(seq.source.tokens[l].binary_label)
                              : std::int8_t{-1};
        }
    }
    return b;
}

void write_batch_jsonl(const Batch& batch, std::ostream& out) {
    for (std::size_t s = 0; s < batch.batch; ++s) {
        nlohmann::json row;
        nlohmann::json ids = nlohmann::json::array();
        nlohmann::json targets = nlohmann::json::array();
        std::vector<int> pad;
        std::vector<int> mlm;
        for (std::size_t l = 0; l < batch.length; ++l) {
            const std::size_t p = s * batch.length + l;
            std::vector<std::int32_t> tok(batch.ids.begin() + static_cast<std::ptrdiff_t>(p * kNumFeatures),
                                          batch.ids.begin() + static_cast<std::ptrdiff_t>((p + 1) * kNumFeatures));
            ids.push_back(tok);
            pad.push_back(batch.pad_mask[p]);
            if (batch.has_targets()) {
                std::vector<std::int32_t> tgt(
                    batch.targets.begin() + static_cast<std::ptrdiff_t>(p * kNumFeatures),
                    batch.targets.begin() + static_cast<std::ptrdiff_t>((p + 1) * kNumFeatures));
                targets.push_back(tgt);
                mlm.push_back(batch.mlm_mask[p]);
            }
        }
        row["ids"] = ids;
        row["pad_mask"] = pad;
        if (batch.has_targets()) {
            row["targets"] = targets;
            row["mlm_mask"] = mlm;
        }
        out << row.dump() << '\n';
    }
}

}  // namespace flowlm
