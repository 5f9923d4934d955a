#include <doctest.h>

#include <cmath>

#include "flowlm/checkpoint.hpp"
#include "flowlm/errors.hpp"
#include "flowlm/trainer.hpp"
#include "support.hpp"

using namespace flowlm;

namespace {

TrainConfig small_run(TrainPhase phase, std::int64_t steps) {
    TrainConfig c;
    c.phase = phase;
    c.steps = steps;
    c.batch_size = 4;
    c.seq_len = 8;
    c.learning_rate = 1e-3;
    c.warmup_steps = 2;
    c.seed = 21;
    c.log_every = 0;
    return c;
}

ModelConfig small_model() {
    auto m = testing::tiny_config({9, 9, 6, 8, 8, 7});
    m.dropout = 0.1;
    return m;
}

}  // namespace

TEST_CASE("seed streams are reproducible and independent") {
    auto a = seed_all(7);
    auto b = seed_all(7);
    CHECK(a.init() == b.init());
    CHECK(child_seed(7, "init") != child_seed(7, "sampler"));
    CHECK(child_seed(7, "init") != child_seed(8, "init"));

    FlowTransformer<float> m1(small_model()), m2(small_model());
    auto s1 = seed_all(3);
    auto s2 = seed_all(3);
    for (int i = 0; i < 1000; ++i) s2.sampler();
    m1.init_parameters(s1.init);
    m2.init_parameters(s2.init);
    CHECK(m1.parameters()[0].value == m2.parameters()[0].value);

    Rng r(99);
    r();
    const auto saved = rng_state(r);
    const auto next = r();
    Rng q;
    restore_rng_state(q, saved);
    CHECK(q() == next);
}

TEST_CASE("truncated normal stays inside two standard deviations") {
    Rng rng(1);
    double sum = 0, sq = 0;
    for (int i = 0; i < 20000; ++i) {
        const double z = truncated_normal(rng, 0.02);
        CHECK(std::abs(z) <= 0.04);
        sum += z;
        sq += z * z;
    }
    CHECK(std::abs(sum / 20000) < 1e-3);
    // Variance of a normal truncated at +-2 sigma is about 0.774 sigma^2.
    CHECK(std::sqrt(sq / 20000) == doctest::Approx(0.02 * std::sqrt(0.774)).epsilon(0.03));
}

TEST_CASE("initial pre-training loss is near the uniform cross-entropy") {
    const auto m = small_model();
    const auto table = testing::random_tokens(200, m.vocab_sizes, 1);
    auto c = small_run(TrainPhase::pretrain, 1);
    c.learning_rate = 0.0;
    const auto r = pretrain<float>(c, m, table, "fp");
    double uniform = 0;
    for (auto v : m.vocab_sizes) uniform += std::log(static_cast<double>(v));
    REQUIRE(r.report.loss_curve.size() == 1);
    CHECK(r.report.loss_curve[0].second == doctest::Approx(uniform).epsilon(0.1));
    CHECK(r.report.provenance == "random-init");
    CHECK(r.report.seed == 21);
    CHECK(r.checkpoint.metadata.seed == 21);
    CHECK(r.checkpoint.metadata.phase == Phase::pretrained);
}

TEST_CASE("same seed, same loss curve") {
    const auto m = small_model();
    const auto table = testing::random_tokens(200, m.vocab_sizes, 2);
    const auto c = small_run(TrainPhase::pretrain, 6);
    const auto a = pretrain<double>(c, m, table, "fp");
    const auto b = pretrain<double>(c, m, table, "fp");
    CHECK(a.report.loss_curve == b.report.loss_curve);
}

TEST_CASE("resuming from an intermediate checkpoint matches an uninterrupted run") {
    testing::TempDir dir("resume");
    const auto m = small_model();
    const auto table = testing::random_tokens(300, m.vocab_sizes, 3);
    auto full_cfg = small_run(TrainPhase::pretrain, 8);
    const auto full = pretrain<double>(full_cfg, m, table, "fp");

    auto first = small_run(TrainPhase::pretrain, 8);
    first.checkpoint_every = 4;
    first.checkpoint_dir = dir.file("run");
    pretrain<double>(first, m, table, "fp");
    auto mid = load_checkpoint<double>(dir.file("run/step-000004"));
    CHECK(mid.metadata.step == 4);
    const auto resumed = pretrain<double>(full_cfg, m, table, "fp", std::move(mid));
    CHECK(resumed.report.provenance == "resumed:4");
    REQUIRE(resumed.report.loss_curve.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(resumed.report.loss_curve[i] == full.report.loss_curve[i + 4]);
    const auto& p1 = resumed.checkpoint.model.parameters();
    const auto& p2 = full.checkpoint.model.parameters();
    for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i].value == p2[i].value);
}

TEST_CASE("fine-tuning preconditions and provenance") {
    const auto m = small_model();
    auto table = testing::random_tokens(200, m.vocab_sizes, 4);
    const auto pre = pretrain<float>(small_run(TrainPhase::pretrain, 2), m, table, "fp-a");

    auto c = small_run(TrainPhase::finetune, 2);
    CHECK_THROWS_AS(finetune<float>(c, m, table, "fp-a"), ConfigMismatch);
    CHECK_THROWS_AS(finetune<float>(c, m, table, "fp-b", pre.checkpoint), FingerprintMismatch);

    const auto tuned = finetune<float>(c, m, table, "fp-a", pre.checkpoint);
    CHECK(tuned.report.provenance == "pretrained:2");
    CHECK(tuned.checkpoint.metadata.phase == Phase::finetuned);
    CHECK_FALSE(tuned.checkpoint.metadata.from_scratch);

    c.from_scratch = true;
    const auto scratch = finetune<float>(c, m, table, "fp-a");
    CHECK(scratch.report.provenance == "random-init");
    CHECK(scratch.checkpoint.metadata.from_scratch);

    auto unlabeled = table;
    unlabeled.labeled = false;
    CHECK_THROWS_AS(finetune<float>(c, m, unlabeled, "fp-a"), MissingLabels);

    for (auto& f : table.flows) f.binary_label = BinaryLabel::benign;
    const auto benign = finetune<float>(c, m, table, "fp-a");
    CHECK(benign.report.warnings.size() == 1);
}

TEST_CASE("training writes periodic and final checkpoints plus a loss CSV") {
    testing::TempDir dir("trainout");
    const auto m = small_model();
    const auto table = testing::random_tokens(100, m.vocab_sizes, 5);
    auto c = small_run(TrainPhase::pretrain, 4);
    c.checkpoint_every = 2;
    c.checkpoint_dir = dir.file("ck");
    const auto r = pretrain<float>(c, m, table, "fp");
    CHECK(std::filesystem::exists(dir.file("ck/step-000002/manifest.json")));
    CHECK(std::filesystem::exists(dir.file("ck/weights.bin")));
    CHECK(r.report.final_checkpoint == dir.file("ck"));
    r.report.write_loss_csv(dir.file("loss.csv"));
    const auto csv = testing::read_file(dir.file("loss.csv"));
    CHECK(csv.rfind("step,loss\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
}
