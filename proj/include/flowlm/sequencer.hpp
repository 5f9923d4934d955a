#pragma once

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <vector>

#include "flowlm/discretizer.hpp"
#include "flowlm/random.hpp"

namespace flowlm {

/// A window of consecutive flows. Positions past the end of the source are padding.
struct FlowSequence {
    std::vector<TokenizedFlow> tokens;  // pad slots hold all-PAD ids, order_index -1
    std::vector<std::uint8_t> pad_mask;  // 1 = real flow

    std::size_t length() const noexcept { return tokens.size(); }
    std::size_t real_count() const noexcept;
};

/// How a selected position was corrupted.
enum class MaskBranch : std::uint8_t { none = 0, mask = 1, random = 2, keep = 3 };

/// Corruption mix for selected positions. Must sum to 1.
struct MaskBranchProbs {
    double mask = 0.8;
    double random = 0.1;
    double keep = 0.1;
};

struct MaskedSequence {
    FlowSequence source;
    std::vector<TokenIds> inputs;
    std::vector<TokenIds> targets;
    std::vector<std::uint8_t> mlm_mask;
    std::vector<MaskBranch> branches;

    std::size_t length() const noexcept { return inputs.size(); }
};

/// Dense row-major batch: ids are [batch, length, 6], masks are [batch, length].
struct Batch {
    std::size_t batch = 0;
    std::size_t length = 0;
    std::vector<std::int32_t> ids;
    std::vector<std::int32_t> targets;  // MLM batches only; same layout as ids
    std::vector<std::uint8_t> pad_mask;
    std::vector<std::uint8_t> mlm_mask;  // MLM batches only
    std::vector<std::int8_t> labels;     // 0 benign, 1 malicious, -1 at pad positions

    std::size_t positions() const noexcept { return batch * length; }
    std::int32_t id(std::size_t b, std::size_t l, std::size_t f) const {
        return ids[(b * length + l) * kNumFeatures + f];
    }
    bool has_targets() const noexcept { return !targets.empty(); }
};

FlowSequence sample_training_segment(const TokenizedTable& table, std::size_t length, Rng& rng);

MaskedSequence apply_mlm_mask(const FlowSequence& seq, double rate, Rng& rng,
                              const VocabSizes& vocab_sizes, const MaskBranchProbs& probs = {});

std::vector<FlowSequence> segment_for_eval(const TokenizedTable& table, std::size_t length);

Batch collate_batch(const std::vector<FlowSequence>& seqs, std::size_t length);
Batch collate_batch(const std::vector<MaskedSequence>& seqs, std::size_t length);

/// Debug dump: one JSON object per sequence with its id arrays.
void write_batch_jsonl(const Batch& batch, std::ostream& out);

}  // namespace flowlm
