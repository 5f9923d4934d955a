#include <doctest.h>

#include <cmath>

#include "flowlm/errors.hpp"
#include "flowlm/model.hpp"
#include "flowlm/sequencer.hpp"
#include "support.hpp"

using namespace flowlm;

namespace {

Batch masked_batch(const ModelConfig& c, std::size_t batch, std::size_t length, std::uint64_t seed,
                   std::size_t real = 0) {
    const auto table = testing::random_tokens(real ? real : 64, c.vocab_sizes, seed);
    Rng rng(seed + 1);
    std::vector<MaskedSequence> seqs;
    while (seqs.size() < batch) {
        auto m = apply_mlm_mask(sample_training_segment(table, length, rng), 0.5, rng, c.vocab_sizes);
        if (std::count(m.mlm_mask.begin(), m.mlm_mask.end(), 1) > 0) seqs.push_back(std::move(m));
    }
    return collate_batch(seqs, length);
}

template <typename T>
void zero_all(FlowTransformer<T>& model) {
    for (auto& t : model.parameters()) t.value.setZero();
}

}  // namespace

TEST_CASE("config validation") {
    auto c = testing::tiny_config();
    CHECK_NOTHROW(c.validate());
    c.heads = 5;
    CHECK_THROWS_AS(c.validate(), ShapeMismatch);
    ModelConfig defaults;
    defaults.vocab_sizes = {35, 35, 40, 35, 35, 35};
    CHECK(defaults.token_dim() == 768);
    CHECK(defaults.head_dim() == 64);
    CHECK(ModelConfig::from_json(defaults.to_json()) == defaults);
}

TEST_CASE("embedding width is six times the per-feature width") {
    ModelConfig c = testing::tiny_config({40, 40, 10, 20, 20, 20}, 128, 1, 12, 32, 8);
    FlowTransformer<float> model(c);
    Rng rng(1);
    model.init_parameters(rng);
    const auto b = masked_batch(c, 2, 8, 3);
    CHECK(model.embed(b).cols() == 768);
    CHECK(model.embed(b).rows() == 16);
}

TEST_CASE("identical ids at the same position embed identically, zero tables leave positions") {
    const auto c = testing::tiny_config();
    FlowTransformer<double> model(c);
    Rng rng(2);
    model.init_parameters(rng);
    auto b = masked_batch(c, 2, 4, 5);
    for (std::size_t f = 0; f < kNumFeatures; ++f) b.ids[(1 * 4 + 2) * 6 + f] = b.ids[(0 * 4 + 2) * 6 + f];
    const auto e = model.embed(b);
    CHECK((e.row(2) - e.row(6)).cwiseAbs().maxCoeff() == 0.0);

    for (auto& t : model.parameters()) {
        if (t.name.rfind("embedding.", 0) == 0 && t.name != "embedding.position.weight") t.value.setZero();
    }
    const auto* pos = model.parameters().find("embedding.position.weight");
    REQUIRE(pos != nullptr);
    const auto e0 = model.embed(b);
    for (Eigen::Index r = 0; r < e0.rows(); ++r) {
        CHECK((e0.row(r) - pos->value.row(r % 4)).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("ids outside the vocabulary and over-long batches are rejected") {
    const auto c = testing::tiny_config();
    FlowTransformer<double> model(c);
    auto b = masked_batch(c, 1, 4, 6);
    b.ids[3] = c.vocab_sizes[3];
    CHECK_THROWS_AS(model.embed(b), IdOutOfRange);
    const auto long_batch = masked_batch(c, 1, 12, 6);
    CHECK_THROWS_AS(model.embed(long_batch), ShapeMismatch);
}

TEST_CASE("pad positions do not influence real positions") {
    const auto c = testing::tiny_config();
    FlowTransformer<double> model(c);
    Rng rng(4);
    model.init_parameters(rng);
    auto b = masked_batch(c, 1, 8, 7, 5);
    const auto h = model.hidden_states(b);
    for (std::size_t l = 5; l < 8; ++l) {
        REQUIRE(b.pad_mask[l] == 0);
        for (std::size_t f = 0; f < kNumFeatures; ++f) b.ids[l * 6 + f] = kFirstDataId + static_cast<int>(l % 2);
    }
    const auto h2 = model.hidden_states(b);
    CHECK((h.topRows(5) - h2.topRows(5)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("zero layers reduce to the final layer norm of the embedding") {
    auto c = testing::tiny_config();
    c.layers = 0;
    FlowTransformer<double> model(c);
    Rng rng(5);
    model.init_parameters(rng);
    const auto b = masked_batch(c, 1, 4, 8);
    const auto e = model.embed(b);
    const auto h = model.hidden_states(b);
    for (Eigen::Index r = 0; r < e.rows(); ++r) {
        const double mean = e.row(r).mean();
        const double var = (e.row(r).array() - mean).square().mean();
        for (Eigen::Index k = 0; k < e.cols(); ++k) {
            CHECK(h(r, k) == doctest::Approx((e(r, k) - mean) / std::sqrt(var + c.layer_norm_eps)).epsilon(1e-12));
        }
    }
}

TEST_CASE("head shapes and normalised probabilities") {
    const auto c = testing::tiny_config();
    FlowTransformer<float> model(c);
    Rng rng(6);
    model.init_parameters(rng);
    const auto b = masked_batch(c, 3, 6, 9);
    const auto h = model.hidden_states(b);
    const auto logits = model.mlm_logits(h);
    for (std::size_t f = 0; f < kNumFeatures; ++f) {
        CHECK(logits[f].rows() == 18);
        CHECK(logits[f].cols() == c.vocab_sizes[f]);
        const auto p = softmax_rows(logits[f]);
        for (Eigen::Index r = 0; r < p.rows(); ++r) CHECK(p.row(r).sum() == doctest::Approx(1.0).epsilon(1e-6));
    }
    const auto cls = model.cls_logits(h);
    CHECK(cls.cols() == 2);
    const auto p = softmax_rows(cls);
    for (Eigen::Index r = 0; r < p.rows(); ++r) CHECK(p.row(r).sum() == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("zero heads give uniform predictions and the uniform losses") {
    const auto c = testing::tiny_config();
    FlowTransformer<double> model(c);
    Rng rng(7);
    model.init_parameters(rng);
    for (auto& t : model.parameters()) {
        if (t.name.rfind("mlm.out.", 0) == 0 || t.name.rfind("cls.", 0) == 0) t.value.setZero();
    }
    const auto b = masked_batch(c, 2, 6, 10);
    const auto h = model.hidden_states(b);
    double expected = 0.0;
    for (auto v : c.vocab_sizes) expected += std::log(static_cast<double>(v));
    CHECK(mlm_loss(model.mlm_logits(h), b) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(model.mlm_forward(b, Mode::inference) == doctest::Approx(expected).epsilon(1e-12));
    const auto probs = softmax_rows(model.cls_logits(h));
    CHECK((probs.array() - 0.5).abs().maxCoeff() < 1e-15);
    CHECK(cls_loss(model.cls_logits(h), b) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("loss conventions") {
    const auto c = testing::tiny_config();
    auto b = masked_batch(c, 2, 4, 11);
    std::array<Matrix<double>, kNumFeatures> perfect;
    for (std::size_t f = 0; f < kNumFeatures; ++f) {
        perfect[f] = Matrix<double>::Constant(static_cast<Eigen::Index>(b.positions()), c.vocab_sizes[f], -50.0);
        for (std::size_t p = 0; p < b.positions(); ++p) {
            perfect[f](static_cast<Eigen::Index>(p), b.targets[p * 6 + f]) = 50.0;
        }
    }
    CHECK(mlm_loss(perfect, b) < 1e-30);

    // Duplicating the batch leaves the mean unchanged.
    FlowTransformer<double> model(c);
    Rng rng(8);
    model.init_parameters(rng);
    Batch twice = b;
    twice.batch *= 2;
    for (auto* v : {&twice.ids, &twice.targets}) v->insert(v->end(), v->begin(), v->end());
    for (auto* v : {&twice.pad_mask, &twice.mlm_mask}) v->insert(v->end(), v->begin(), v->end());
    twice.labels.insert(twice.labels.end(), b.labels.begin(), b.labels.end());
    CHECK(model.mlm_forward(twice, Mode::inference) == doctest::Approx(model.mlm_forward(b, Mode::inference)).epsilon(1e-12));

    auto none = b;
    std::fill(none.mlm_mask.begin(), none.mlm_mask.end(), 0);
    CHECK_THROWS_AS(mlm_loss(perfect, none), NoMaskedPositions);

    // Changing a pad label does not move the classification loss.
    auto padded = masked_batch(c, 1, 8, 12, 5);
    const auto logits = model.cls_logits(model.hidden_states(padded));
    const double before = cls_loss(logits, padded);
    padded.labels[7] = 1;
    CHECK(cls_loss(logits, padded) == before);
    Matrix<double> sure(static_cast<Eigen::Index>(padded.positions()), 2);
    for (std::size_t p = 0; p < padded.positions(); ++p) {
        sure(static_cast<Eigen::Index>(p), 0) = padded.labels[p] == 0 ? 60.0 : -60.0;
        sure(static_cast<Eigen::Index>(p), 1) = -sure(static_cast<Eigen::Index>(p), 0);
    }
    CHECK(cls_loss(sure, padded) < 1e-30);
}

TEST_CASE("embedding rows that never appear get zero gradient") {
    const auto c = testing::tiny_config({12, 6, 5, 6, 7, 5});
    FlowTransformer<double> model(c);
    Rng rng(9);
    model.init_parameters(rng);
    auto b = masked_batch(c, 2, 4, 13);
    for (std::size_t p = 0; p < b.positions(); ++p) {
        if (b.ids[p * 6] == 11) b.ids[p * 6] = 3;
        if (b.targets[p * 6] == 11) b.targets[p * 6] = 3;
    }
    model.parameters().zero_grad();
    model.mlm_forward(b, Mode::training);
    model.backward();
    const auto* emb = model.parameters().find("embedding.src_port.weight");
    REQUIRE(emb != nullptr);
    CHECK(emb->grad.row(11).cwiseAbs().maxCoeff() == 0.0);
    CHECK(emb->grad.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("analytic gradients match finite differences on a small model") {
    const auto c = testing::tiny_config();
    FlowTransformer<double> model(c);
    Rng rng(10);
    model.init_parameters(rng);
    const auto b = masked_batch(c, 2, 4, 14);
    for (int objective = 0; objective < 2; ++objective) {
        auto loss = [&] {
            return objective == 0 ? model.mlm_forward(b, Mode::inference) : model.cls_forward(b, Mode::inference);
        };
        model.parameters().zero_grad();
        objective == 0 ? model.mlm_forward(b, Mode::training) : model.cls_forward(b, Mode::training);
        model.backward();
        double worst = 0.0;
        for (auto& t : model.parameters()) {
            for (Eigen::Index i = 0; i < t.value.size(); i += 7) {
                const double saved = t.value.data()[i];
                t.value.data()[i] = saved + 1e-5;
                const double up = loss();
                t.value.data()[i] = saved - 1e-5;
                const double down = loss();
                t.value.data()[i] = saved;
                const double numeric = (up - down) / 2e-5;
                const double analytic = t.grad.data()[i];
                worst = std::max(worst, std::abs(analytic - numeric) /
                                            std::max({std::abs(analytic), std::abs(numeric), 1e-4}));
            }
        }
        CHECK(worst < 1e-5);
    }
}

TEST_CASE("dropout is active only in training mode and seeded") {
    auto c = testing::tiny_config();
    c.dropout = 0.3;
    FlowTransformer<double> model(c);
    Rng rng(11);
    model.init_parameters(rng);
    const auto b = masked_batch(c, 2, 4, 15);
    const double eval1 = model.mlm_forward(b, Mode::inference);
    CHECK(model.mlm_forward(b, Mode::inference) == eval1);
    Rng d1(1), d2(1);
    const double t1 = model.mlm_forward(b, Mode::training, &d1);
    const double t2 = model.mlm_forward(b, Mode::training, &d2);
    CHECK(t1 == t2);
    CHECK(t1 != eval1);
}

TEST_CASE("copies are independent") {
    const auto c = testing::tiny_config();
    FlowTransformer<float> model(c);
    Rng rng(12);
    model.init_parameters(rng);
    FlowTransformer<float> copy = model;
    copy.parameters()[0].value.setZero();
    CHECK(model.parameters()[0].value.cwiseAbs().maxCoeff() > 0.0f);
}
