#include <doctest.h>

#include <sstream>

#include "flowlm/errors.hpp"
#include "flowlm/sequencer.hpp"
#include "support.hpp"

using namespace flowlm;

namespace {
const VocabSizes kVocab{40, 40, 10, 20, 20, 20};
}

TEST_CASE("training segments are consecutive windows with a uniform start") {
    const auto table = testing::random_tokens(100, kVocab, 1);
    Rng rng(5);
    std::vector<int> seen(69, 0);
    for (int i = 0; i < 3000; ++i) {
        const auto seq = sample_training_segment(table, 32, rng);
        REQUIRE(seq.length() == 32);
        CHECK(seq.real_count() == 32);
        const auto start = seq.tokens.front().order_index;
        REQUIRE(start >= 0);
        REQUIRE(start <= 68);
        ++seen[static_cast<std::size_t>(start)];
        for (std::size_t l = 0; l < 32; ++l) CHECK(seq.tokens[l] == table.flows[static_cast<std::size_t>(start) + l]);
    }
    CHECK(seen.front() > 0);
    CHECK(seen.back() > 0);
}

TEST_CASE("short tables pad the tail") {
    const auto table = testing::random_tokens(5, kVocab, 2);
    Rng rng(1);
    const auto seq = sample_training_segment(table, 8, rng);
    CHECK(seq.pad_mask == std::vector<std::uint8_t>{1, 1, 1, 1, 1, 0, 0, 0});
    for (std::size_t l = 5; l < 8; ++l) {
        CHECK(seq.tokens[l].ids == TokenIds{kPadId, kPadId, kPadId, kPadId, kPadId, kPadId});
        CHECK(seq.tokens[l].order_index == -1);
    }
    CHECK_THROWS_AS(sample_training_segment(TokenizedTable{}, 8, rng), EmptyTable);
}

TEST_CASE("same seed gives the same segment") {
    const auto table = testing::random_tokens(500, kVocab, 3);
    Rng a(42), b(42);
    for (int i = 0; i < 10; ++i) {
        CHECK(sample_training_segment(table, 16, a).tokens == sample_training_segment(table, 16, b).tokens);
    }
}

TEST_CASE("masking leaves unselected and pad positions untouched") {
    const auto table = testing::random_tokens(20, kVocab, 4);
    Rng rng(8);
    for (int i = 0; i < 200; ++i) {
        const auto seq = sample_training_segment(table, 24, rng);
        const auto m = apply_mlm_mask(seq, 0.3, rng, kVocab);
        for (std::size_t l = 0; l < m.length(); ++l) {
            CHECK(m.targets[l] == seq.tokens[l].ids);
            if (!seq.pad_mask[l]) {
                CHECK(m.mlm_mask[l] == 0);
                CHECK(m.inputs[l] == seq.tokens[l].ids);
            }
            if (!m.mlm_mask[l]) {
                CHECK(m.inputs[l] == seq.tokens[l].ids);
                CHECK(m.branches[l] == MaskBranch::none);
            }
            if (m.branches[l] == MaskBranch::mask) {
                CHECK(m.inputs[l] == TokenIds{kMaskId, kMaskId, kMaskId, kMaskId, kMaskId, kMaskId});
            }
            if (m.branches[l] == MaskBranch::random) {
                for (std::size_t f = 0; f < kNumFeatures; ++f) {
                    CHECK(m.inputs[l][f] >= kFirstDataId);
                    CHECK(m.inputs[l][f] < kVocab[f]);
                }
            }
        }
    }
}

TEST_CASE("forcing the keep branch keeps inputs equal to targets") {
    const auto table = testing::random_tokens(64, kVocab, 5);
    Rng rng(3);
    const auto seq = sample_training_segment(table, 32, rng);
    const auto m = apply_mlm_mask(seq, 0.5, rng, kVocab, MaskBranchProbs{0.0, 0.0, 1.0});
    std::size_t selected = 0;
    for (std::size_t l = 0; l < m.length(); ++l) {
        if (m.mlm_mask[l]) {
            ++selected;
            CHECK(m.branches[l] == MaskBranch::keep);
            CHECK(m.inputs[l] == m.targets[l]);
        }
    }
    CHECK(selected > 0);
}

TEST_CASE("mask rate outside (0,1) is rejected") {
    const auto table = testing::random_tokens(8, kVocab, 6);
    Rng rng(1);
    const auto seq = sample_training_segment(table, 8, rng);
    CHECK_THROWS(apply_mlm_mask(seq, 0.0, rng, kVocab));
    CHECK_THROWS(apply_mlm_mask(seq, 1.0, rng, kVocab));
}

TEST_CASE("evaluation windows partition the table") {
    CHECK(segment_for_eval(testing::random_tokens(20000, kVocab, 7), 32).size() == 625);
    const auto table = testing::random_tokens(33, kVocab, 8);
    const auto windows = segment_for_eval(table, 32);
    REQUIRE(windows.size() == 2);
    CHECK(windows[1].real_count() == 1);
    std::vector<TokenizedFlow> joined;
    for (const auto& w : windows) {
        for (std::size_t l = 0; l < w.length(); ++l) {
            if (w.pad_mask[l]) joined.push_back(w.tokens[l]);
        }
    }
    CHECK(joined == table.flows);
    CHECK(segment_for_eval(TokenizedTable{}, 32).empty());
}

TEST_CASE("collation shapes and errors") {
    const auto table = testing::random_tokens(200, kVocab, 9);
    Rng rng(2);
    std::vector<FlowSequence> seqs;
    for (int i = 0; i < 4; ++i) seqs.push_back(sample_training_segment(table, 32, rng));
    const auto b = collate_batch(seqs, 32);
    CHECK(b.batch == 4);
    CHECK(b.length == 32);
    CHECK(b.ids.size() == 4 * 32 * 6);
    CHECK(b.labels.size() == 4 * 32);
    CHECK_FALSE(b.has_targets());
    CHECK(b.id(2, 5, 3) == seqs[2].tokens[5].ids[3]);
    CHECK(b.labels[2 * 32 + 5] == static_cast<std::int8_t>(seqs[2].tokens[5].binary_label));

    seqs.push_back(sample_training_segment(table, 16, rng));
    CHECK_THROWS_AS(collate_batch(seqs, 32), RaggedBatch);

    const auto empty = collate_batch(std::vector<FlowSequence>{}, 32);
    CHECK(empty.batch == 0);
    CHECK(empty.length == 32);
    CHECK(empty.ids.empty());

    std::vector<MaskedSequence> masked;
    for (int i = 0; i < 3; ++i) masked.push_back(apply_mlm_mask(sample_training_segment(table, 8, rng), 0.5, rng, kVocab));
    const auto mb = collate_batch(masked, 8);
    CHECK(mb.has_targets());
    CHECK(mb.mlm_mask.size() == 24);
    std::ostringstream dump;
    write_batch_jsonl(mb, dump);
    const auto text = dump.str();
    CHECK(std::count(text.begin(), text.end(), '\n') == 3);
}
