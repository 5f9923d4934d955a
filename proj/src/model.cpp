#include "flowlm/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "flowlm/errors.hpp"

namespace flowlm {

std::string_view to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision parse_precision(std::string_view s) {
    if (s == "f32" || s == "float32") return Precision::f32;
    if (s == "f64" || s == "float64") return Precision::f64;
    throw Error(ErrorKind::io, "unknown precision '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
    if (per_feature_dim < 1) throw ShapeMismatch("per_feature_dim must be positive");
    if (layers < 0) throw ShapeMismatch("layers must be non-negative");
    if (heads < 1 || token_dim() % heads != 0) {
        throw ShapeMismatch("token width " + std::to_string(token_dim()) +
                            " is not divisible by " + std::to_string(heads) + " heads");
    }
    if (ffn_dim < 1) throw ShapeMismatch("ffn_dim must be positive");
    if (max_len < 1) throw ShapeMismatch("max_len must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ShapeMismatch("dropout must lie in [0, 1)");
    for (std::size_t f = 0; f < kNumFeatures; ++f) {
        if (vocab_sizes[f] <= kFirstDataId) {
            throw ShapeMismatch("vocabulary of " + std::string(feature_name(f)) +
                                " has no data ids");
        }
    }
}

nlohmann::json ModelConfig::to_json() const {
    return {{"per_feature_dim", per_feature_dim},
            {"token_dim", token_dim()},
            {"layers", layers},
            {"heads", heads},
            {"ffn_dim", ffn_dim},
            {"max_len", max_len},
            {"dropout", dropout},
            {"layer_norm_eps", layer_norm_eps},
            {"vocab_sizes", vocab_sizes},
            {"precision", std::string(to_string(precision))}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.per_feature_dim = j.value("per_feature_dim", c.per_feature_dim);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.max_len = j.value("max_len", c.max_len);
    c.dropout = j.value("dropout", c.dropout);
    c.layer_norm_eps = j.value("layer_norm_eps", c.layer_norm_eps);
    if (j.contains("vocab_sizes")) c.vocab_sizes = j.at("vocab_sizes").get<VocabSizes>();
    if (j.contains("precision")) c.precision = parse_precision(j.at("precision").get<std::string>());
    return c;
}

// ---------------------------------------------------------------------------
// ParameterSet

template <typename T>
std::size_t ParameterSet<T>::add(std::string name, std::vector<std::size_t> shape) {
    const auto rows = shape.size() == 2 ? shape[0] : 1;
    const auto cols = shape.size() == 2 ? shape[1] : shape.at(0);
    NamedTensor<T> t;
    t.name = std::move(name);
    t.shape = std::move(shape);
    t.value = Matrix<T>::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    t.grad = Matrix<T>::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    tensors_.push_back(std::move(t));
    return tensors_.size() - 1;
}

template <typename T>
const NamedTensor<T>* ParameterSet<T>::find(const std::string& name) const {
    for (const auto& t : tensors_) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

template <typename T>
std::size_t ParameterSet<T>::total_elements() const noexcept {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
    for (auto& t : tensors_) t.grad.setZero();
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
struct LnCache {
    Matrix<T> xhat;
    ColVec<T> rstd;
};

template <typename T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <typename T>
T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
    const T pdf = std::exp(T(-0.5) * x * x) * T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
    return cdf + x * pdf;
}

template <typename T>
Matrix<T> gelu_matrix(const Matrix<T>& x) {
    return x.unaryExpr([](T v) { return gelu(v); });
}

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& bias, T eps,
                     LnCache<T>* cache) {
    const auto rows = x.rows();
    const auto cols = x.cols();
    Matrix<T> y(rows, cols);
    if (cache) {
        cache->xhat.resize(rows, cols);
        cache->rstd.resize(rows);
    }
    for (Eigen::Index r = 0; r < rows; ++r) {
        const T mean = x.row(r).mean();
        const T var = (x.row(r).array() - mean).square().mean();
        const T rstd = T(1) / std::sqrt(var + eps);
        const auto xhat = ((x.row(r).array() - mean) * rstd).eval();
        y.row(r) = (xhat * gain.row(0).array() + bias.row(0).array()).matrix();
        if (cache) {
            cache->xhat.row(r) = xhat.matrix();
            cache->rstd(r) = rstd;
        }
    }
    return y;
}

template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const LnCache<T>& cache, const Matrix<T>& gain,
                              Matrix<T>& dgain, Matrix<T>& dbias) {
    const auto rows = dy.rows();
    const auto cols = dy.cols();
    dgain.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
    dbias.row(0) += dy.colwise().sum();
    Matrix<T> dx(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const auto dxhat = (dy.row(r).array() * gain.row(0).array()).eval();
        const T mean_d = dxhat.mean();
        const T mean_dx = (dxhat * cache.xhat.row(r).array()).mean();
        dx.row(r) = (cache.rstd(r) * (dxhat - mean_d - cache.xhat.row(r).array() * mean_dx)).matrix();
    }
    return dx;
}

template <typename T>
Matrix<T> affine(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& b) {
    Matrix<T> y(x.rows(), w.cols());
    y.noalias() = x * w;
    y.rowwise() += b.row(0);
    return y;
}

template <typename T>
void affine_backward_params(const Matrix<T>& x, const Matrix<T>& dy, Matrix<T>& dw, Matrix<T>& db) {
    dw.noalias() += x.transpose() * dy;
    db.row(0) += dy.colwise().sum();
}

template <typename T>
Matrix<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
    Matrix<T> m(rows, cols);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const T keep_scale = T(1.0 / (1.0 - rate));
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = unit(rng) >= rate ? keep_scale : T(0);
    }
    return m;
}

/// Softmax over the real (unmasked) keys of one score row; masked entries are zero.
template <typename T, typename Row>
void masked_softmax_row(Row&& row, const std::uint8_t* key_valid, Eigen::Index n) {
    T max_v = -std::numeric_limits<T>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
        if (key_valid[j]) max_v = std::max(max_v, row(j));
    }
    if (max_v == -std::numeric_limits<T>::infinity()) {
        row.setZero();
        return;
    }
    T sum = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
        if (key_valid[j]) {
            row(j) = std::exp(row(j) - max_v);
            sum += row(j);
        } else {
            row(j) = 0;
        }
    }
    row /= sum;
}

/// Sum over rows of -log softmax(logits)[target]; optionally writes
/// scale * (softmax - onehot) into dlogits.
template <typename T>
T softmax_xent_sum(const Matrix<T>& logits, const std::vector<std::int32_t>& targets, T scale,
                   Matrix<T>* dlogits) {
    T total = 0;
    if (dlogits) dlogits->resize(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const T max_v = logits.row(r).maxCoeff();
        const auto shifted = (logits.row(r).array() - max_v).eval();
        const T log_z = std::log(shifted.exp().sum());
        const auto t = static_cast<Eigen::Index>(targets[static_cast<std::size_t>(r)]);
        total += log_z - shifted(t);
        if (dlogits) {
            dlogits->row(r) = ((shifted - log_z).exp() * scale).matrix();
            (*dlogits)(r, t) -= scale;
        }
    }
    return total;
}

std::string layer_prefix(std::size_t i) { return "encoder.layer" + std::to_string(i) + "."; }

}  // namespace

// ---------------------------------------------------------------------------
// Tape

template <typename T>
struct LayerTape {
    LnCache<T> ln1;
    Matrix<T> a, q, k, v, ctx, attn_drop;
    std::vector<Matrix<T>> probs;  // [batch * heads] of length x length
    LnCache<T> ln2;
    Matrix<T> b, u, g, ffn_drop;
};

template <typename T>
struct ForwardTape {
    enum class Head { mlm, cls };
    Head head = Head::mlm;
    Batch batch;
    Matrix<T> embed_drop;
    std::vector<LayerTape<T>> layers;
    LnCache<T> final_ln;
    Matrix<T> hidden;

    std::vector<std::size_t> rows;
    Matrix<T> hsel, trunk_pre, trunk_out;
    LnCache<T> trunk_ln;
    std::array<Matrix<T>, kNumFeatures> mlm_dlogits;

    Matrix<T> cls_dlogits;
};

// ---------------------------------------------------------------------------
// FlowTransformer

template <typename T>
FlowTransformer<T>::FlowTransformer(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    const auto E = static_cast<std::size_t>(config_.per_feature_dim);
    const auto H = static_cast<std::size_t>(config_.token_dim());
    const auto F = static_cast<std::size_t>(config_.ffn_dim);

    for (std::size_t f = 0; f < kNumFeatures; ++f) {
        embedding_ids_[f] =
            params_.add("embedding." + std::string(feature_name(f)) + ".weight",
                        {static_cast<std::size_t>(config_.vocab_sizes[f]), E});
    }
    positional_id_ =
        params_.add("embedding.position.weight", {static_cast<std::size_t>(config_.max_len), H});

    for (std::size_t i = 0; i < static_cast<std::size_t>(config_.layers); ++i) {
        const auto p = layer_prefix(i);
        LayerIds ids{};
        ids.ln1_g = params_.add(p + "ln1.gain", {H});
        ids.ln1_b = params_.add(p + "ln1.bias", {H});
        ids.wq = params_.add(p + "attn.query.weight", {H, H});
        ids.bq = params_.add(p + "attn.query.bias", {H});
        ids.wk = params_.add(p + "attn.key.weight", {H, H});
        ids.bk = params_.add(p + "attn.key.bias", {H});
        ids.wv = params_.add(p + "attn.value.weight", {H, H});
        ids.bv = params_.add(p + "attn.value.bias", {H});
        ids.wo = params_.add(p + "attn.output.weight", {H, H});
        ids.bo = params_.add(p + "attn.output.bias", {H});
        ids.ln2_g = params_.add(p + "ln2.gain", {H});
        ids.ln2_b = params_.add(p + "ln2.bias", {H});
        ids.w1 = params_.add(p + "ffn.in.weight", {H, F});
        ids.b1 = params_.add(p + "ffn.in.bias", {F});
        ids.w2 = params_.add(p + "ffn.out.weight", {F, H});
        ids.b2 = params_.add(p + "ffn.out.bias", {H});
        layer_ids_.push_back(ids);
    }
    final_ln_g_ = params_.add("encoder.final_ln.gain", {H});
    final_ln_b_ = params_.add("encoder.final_ln.bias", {H});

    mlm_dense_w_ = params_.add("mlm.dense.weight", {H, H});
    mlm_dense_b_ = params_.add("mlm.dense.bias", {H});
    mlm_ln_g_ = params_.add("mlm.ln.gain", {H});
    mlm_ln_b_ = params_.add("mlm.ln.bias", {H});
    for (std::size_t f = 0; f < kNumFeatures; ++f) {
        const auto v = static_cast<std::size_t>(config_.vocab_sizes[f]);
        mlm_out_w_[f] = params_.add("mlm.out." + std::string(feature_name(f)) + ".weight", {H, v});
        mlm_out_b_[f] = params_.add("mlm.out." + std::string(feature_name(f)) + ".bias", {v});
    }
    cls_w_ = params_.add("cls.weight", {H, 2});
    cls_b_ = params_.add("cls.bias", {2});

    // Layer-norm gains start at one even before init_parameters().
    for (auto& t : params_) {
        if (t.name.ends_with(".gain")) t.value.setOnes();
    }
}

template <typename T>
FlowTransformer<T>::FlowTransformer(const FlowTransformer& other)
    : config_(other.config_),
      params_(other.params_),
      embedding_ids_(other.embedding_ids_),
      positional_id_(other.positional_id_),
      layer_ids_(other.layer_ids_),
      final_ln_g_(other.final_ln_g_),
      final_ln_b_(other.final_ln_b_),
      mlm_dense_w_(other.mlm_dense_w_),
      mlm_dense_b_(other.mlm_dense_b_),
      mlm_ln_g_(other.mlm_ln_g_),
      mlm_ln_b_(other.mlm_ln_b_),
      mlm_out_w_(other.mlm_out_w_),
      mlm_out_b_(other.mlm_out_b_),
      cls_w_(other.cls_w_),
      cls_b_(other.cls_b_) {}

template <typename T>
FlowTransformer<T>& FlowTransformer<T>::operator=(const FlowTransformer& other) {
    if (this != &other) {
        FlowTransformer copy(other);
        *this = std::move(copy);
    }
    return *this;
}

template <typename T>
FlowTransformer<T>::FlowTransformer(FlowTransformer&&) noexcept = default;
template <typename T>
FlowTransformer<T>& FlowTransformer<T>::operator=(FlowTransformer&&) noexcept = default;
template <typename T>
FlowTransformer<T>::~FlowTransformer() = default;

template <typename T>
void FlowTransformer<T>::init_parameters(Rng& rng) {
    for (auto& t : params_) {
        if (t.name.ends_with(".gain")) {
            t.value.setOnes();
        } else if (t.name.ends_with(".bias")) {
            t.value.setZero();
        } else {
            for (Eigen::Index i = 0; i < t.value.size(); ++i) {
                t.value.data()[i] = static_cast<T>(truncated_normal(rng, 0.02));
            }
        }
        t.grad.setZero();
    }
}

template <typename T>
void FlowTransformer<T>::check_batch(const Batch& batch) const {
    if (batch.length > static_cast<std::size_t>(config_.max_len)) {
        throw ShapeMismatch("sequence length " + std::to_string(batch.length) +
                            " exceeds max_len " + std::to_string(config_.max_len));
    }
    if (batch.ids.size() != batch.positions() * kNumFeatures ||
        batch.pad_mask.size() != batch.positions()) {
        throw ShapeMismatch("batch arrays do not match [batch, length, 6]");
    }
    for (std::size_t p = 0; p < batch.positions(); ++p) {
        for (std::size_t f = 0; f < kNumFeatures; ++f) {
            const auto id = batch.ids[p * kNumFeatures + f];
            if (id < 0 || id >= config_.vocab_sizes[f]) {
                throw IdOutOfRange("id " + std::to_string(id) + " outside vocabulary of " +
                                   std::string(feature_name(f)) + " (size " +
                                   std::to_string(config_.vocab_sizes[f]) + ")");
            }
        }
    }
}

template <typename T>
Matrix<T> FlowTransformer<T>::embed_impl(const Batch& batch) const {
    check_batch(batch);
    const auto E = static_cast<Eigen::Index>(config_.per_feature_dim);
    const auto H = static_cast<Eigen::Index>(config_.token_dim());
    Matrix<T> out(static_cast<Eigen::Index>(batch.positions()), H);
    const auto& pos = params_[positional_id_].value;
    for (std::size_t b = 0; b < batch.batch; ++b) {
        for (std::size_t l = 0; l < batch.length; ++l) {
            const auto p = static_cast<Eigen::Index>(b * batch.length + l);
            for (std::size_t f = 0; f < kNumFeatures; ++f) {
                const auto id = batch.ids[static_cast<std::size_t>(p) * kNumFeatures + f];
                out.block(p, static_cast<Eigen::Index>(f) * E, 1, E) =
                    params_[embedding_ids_[f]].value.row(id);
            }
            out.row(p) += pos.row(static_cast<Eigen::Index>(l));
        }
    }
    return out;
}

template <typename T>
Matrix<T> FlowTransformer<T>::embed(const Batch& batch) const {
    return embed_impl(batch);
}

template <typename T>
Matrix<T> FlowTransformer<T>::encode_impl(Matrix<T> x, const Batch& batch, ForwardTape<T>* tape,
                                          Rng* dropout_rng) const {
    const auto H = static_cast<Eigen::Index>(config_.token_dim());
    if (x.rows() != static_cast<Eigen::Index>(batch.positions()) || x.cols() != H) {
        throw ShapeMismatch("encoder input must be [" + std::to_string(batch.positions()) + ", " +
                            std::to_string(H) + "]");
    }
    const bool use_dropout = tape && dropout_rng && config_.dropout > 0.0;
    const auto L = static_cast<Eigen::Index>(batch.length);
    const auto heads = static_cast<Eigen::Index>(config_.heads);
    const auto d = static_cast<Eigen::Index>(config_.head_dim());
    const T scale = T(1) / std::sqrt(static_cast<T>(d));
    const T eps = static_cast<T>(config_.layer_norm_eps);

    if (use_dropout) {
        tape->embed_drop = dropout_mask<T>(x.rows(), x.cols(), config_.dropout, *dropout_rng);
        x.array() *= tape->embed_drop.array();
    }
    if (tape) tape->layers.resize(layer_ids_.size());

    Matrix<T> scores(L, L);
    for (std::size_t li = 0; li < layer_ids_.size(); ++li) {
        const auto& ids = layer_ids_[li];
        LayerTape<T>* lt = tape ? &tape->layers[li] : nullptr;

        Matrix<T> a = layer_norm(x, params_[ids.ln1_g].value, params_[ids.ln1_b].value, eps,
                                 lt ? &lt->ln1 : nullptr);
        Matrix<T> q = affine(a, params_[ids.wq].value, params_[ids.bq].value);
        Matrix<T> k = affine(a, params_[ids.wk].value, params_[ids.bk].value);
        Matrix<T> v = affine(a, params_[ids.wv].value, params_[ids.bv].value);
        Matrix<T> ctx = Matrix<T>::Zero(x.rows(), H);
        if (lt) lt->probs.resize(batch.batch * static_cast<std::size_t>(heads));

        for (std::size_t b = 0; b < batch.batch; ++b) {
            const auto r0 = static_cast<Eigen::Index>(b) * L;
            const std::uint8_t* valid = batch.pad_mask.data() + b * batch.length;
            for (Eigen::Index h = 0; h < heads; ++h) {
                scores.noalias() = q.block(r0, h * d, L, d) * k.block(r0, h * d, L, d).transpose();
                scores *= scale;
                for (Eigen::Index i = 0; i < L; ++i) {
                    masked_softmax_row<T>(scores.row(i), valid, L);
                }
                ctx.block(r0, h * d, L, d).noalias() = scores * v.block(r0, h * d, L, d);
                if (lt) lt->probs[b * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)] = scores;
            }
        }
        Matrix<T> attn = affine(ctx, params_[ids.wo].value, params_[ids.bo].value);
        if (use_dropout) {
            lt->attn_drop = dropout_mask<T>(attn.rows(), attn.cols(), config_.dropout, *dropout_rng);
            attn.array() *= lt->attn_drop.array();
        }
        x += attn;

        Matrix<T> bn = layer_norm(x, params_[ids.ln2_g].value, params_[ids.ln2_b].value, eps,
                                  lt ? &lt->ln2 : nullptr);
        Matrix<T> u = affine(bn, params_[ids.w1].value, params_[ids.b1].value);
        Matrix<T> g = gelu_matrix(u);
        Matrix<T> ffn = affine(g, params_[ids.w2].value, params_[ids.b2].value);
        if (use_dropout) {
            lt->ffn_drop = dropout_mask<T>(ffn.rows(), ffn.cols(), config_.dropout, *dropout_rng);
            ffn.array() *= lt->ffn_drop.array();
        }
        x += ffn;

        if (lt) {
            lt->a = std::move(a);
            lt->q = std::move(q);
            lt->k = std::move(k);
            lt->v = std::move(v);
            lt->ctx = std::move(ctx);
            lt->b = std::move(bn);
            lt->u = std::move(u);
            lt->g = std::move(g);
        }
    }
    return layer_norm(x, params_[final_ln_g_].value, params_[final_ln_b_].value, eps,
                      tape ? &tape->final_ln : nullptr);
}

template <typename T>
Matrix<T> FlowTransformer<T>::encode(const Matrix<T>& embedded, const Batch& batch) const {
    return encode_impl(embedded, batch, nullptr, nullptr);
}

template <typename T>
Matrix<T> FlowTransformer<T>::hidden_states(const Batch& batch) const {
    return encode_impl(embed_impl(batch), batch, nullptr, nullptr);
}

template <typename T>
std::array<Matrix<T>, kNumFeatures> FlowTransformer<T>::mlm_logits(const Matrix<T>& hidden) const {
    if (hidden.cols() != config_.token_dim()) {
        throw ShapeMismatch("hidden width does not match token_dim");
    }
    const Matrix<T> trunk =
        layer_norm(gelu_matrix(affine(hidden, params_[mlm_dense_w_].value, params_[mlm_dense_b_].value)),
                   params_[mlm_ln_g_].value, params_[mlm_ln_b_].value,
                   static_cast<T>(config_.layer_norm_eps), static_cast<LnCache<T>*>(nullptr));
    std::array<Matrix<T>, kNumFeatures> out;
    for (std::size_t f = 0; f < kNumFeatures; ++f) {
        out[f] = affine(trunk, params_[mlm_out_w_[f]].value, params_[mlm_out_b_[f]].value);
    }
    return out;
}

template <typename T>
Matrix<T> FlowTransformer<T>::cls_logits(const Matrix<T>& hidden) const {
    if (hidden.cols() != config_.token_dim()) {
        throw ShapeMismatch("hidden width does not match token_dim");
    }
    return affine(hidden, params_[cls_w_].value, params_[cls_b_].value);
}

template <typename T>
T FlowTransformer<T>::mlm_forward(const Batch& batch, Mode mode, Rng* dropout_rng) {
    if (!batch.has_targets() || batch.mlm_mask.size() != batch.positions()) {
        throw ShapeMismatch("MLM forward needs a masked batch");
    }
    auto tape = std::make_unique<ForwardTape<T>>();
    tape->head = ForwardTape<T>::Head::mlm;
    tape->batch = batch;
    Rng* rng = mode == Mode::training ? dropout_rng : nullptr;
    tape->hidden = encode_impl(embed_impl(batch), batch, tape.get(), rng);

    for (std::size_t p = 0; p < batch.positions(); ++p) {
        if (batch.mlm_mask[p]) tape->rows.push_back(p);
    }
    if (tape->rows.empty()) {
        throw NoMaskedPositions();
    }
    const auto M = static_cast<Eigen::Index>(tape->rows.size());
    tape->hsel.resize(M, tape->hidden.cols());
    for (Eigen::Index r = 0; r < M; ++r) {
        tape->hsel.row(r) = tape->hidden.row(static_cast<Eigen::Index>(tape->rows[static_cast<std::size_t>(r)]));
    }
    tape->trunk_pre = affine(tape->hsel, params_[mlm_dense_w_].value, params_[mlm_dense_b_].value);
    tape->trunk_out = layer_norm(gelu_matrix(tape->trunk_pre), params_[mlm_ln_g_].value,
                                 params_[mlm_ln_b_].value, static_cast<T>(config_.layer_norm_eps),
                                 &tape->trunk_ln);

    const T scale = T(1) / static_cast<T>(M);
    T total = 0;
    std::vector<std::int32_t> targets(static_cast<std::size_t>(M));
    for (std::size_t f = 0; f < kNumFeatures; ++f) {
        for (std::size_t r = 0; r < tape->rows.size(); ++r) {
            targets[r] = batch.targets[tape->rows[r] * kNumFeatures + f];
        }
        const Matrix<T> logits =
            affine(tape->trunk_out, params_[mlm_out_w_[f]].value, params_[mlm_out_b_[f]].value);
        total += softmax_xent_sum(logits, targets, scale, &tape->mlm_dlogits[f]);
    }
    tape_ = std::move(tape);
    return total * scale;
}

template <typename T>
T FlowTransformer<T>::cls_forward(const Batch& batch, Mode mode, Rng* dropout_rng) {
    auto tape = std::make_unique<ForwardTape<T>>();
    tape->head = ForwardTape<T>::Head::cls;
    tape->batch = batch;
    Rng* rng = mode == Mode::training ? dropout_rng : nullptr;
    tape->hidden = encode_impl(embed_impl(batch), batch, tape.get(), rng);

    const Matrix<T> logits = cls_logits(tape->hidden);
    std::size_t real = 0;
    for (const auto m : batch.pad_mask) real += m ? 1 : 0;
    if (real == 0) {
        throw Error(ErrorKind::data, "classification batch has no real positions");
    }
    const T scale = T(1) / static_cast<T>(real);
    tape->cls_dlogits = Matrix<T>::Zero(logits.rows(), 2);
    T total = 0;
    Matrix<T> row_grad;
    for (std::size_t p = 0; p < batch.positions(); ++p) {
        if (!batch.pad_mask[p]) continue;
        const Matrix<T> row = logits.row(static_cast<Eigen::Index>(p));
        total += softmax_xent_sum(row, {static_cast<std::int32_t>(batch.labels[p])}, scale, &row_grad);
        tape->cls_dlogits.row(static_cast<Eigen::Index>(p)) = row_grad;
    }
    tape_ = std::move(tape);
    return total * scale;
}

template <typename T>
void FlowTransformer<T>::backward() {
    if (!tape_) {
        throw std::logic_error("backward() called without a recorded forward pass");
    }
    auto& tape = *tape_;
    const auto& batch = tape.batch;
    const auto E = static_cast<Eigen::Index>(config_.per_feature_dim);
    const auto H = static_cast<Eigen::Index>(config_.token_dim());
    const auto L = static_cast<Eigen::Index>(batch.length);
    const auto heads = static_cast<Eigen::Index>(config_.heads);
    const auto d = static_cast<Eigen::Index>(config_.head_dim());
    const T scale = T(1) / std::sqrt(static_cast<T>(d));

    auto P = [&](std::size_t id) -> NamedTensor<T>& { return params_[id]; };

    Matrix<T> dhidden = Matrix<T>::Zero(tape.hidden.rows(), H);
    if (tape.head == ForwardTape<T>::Head::mlm) {
        Matrix<T> dtrunk = Matrix<T>::Zero(tape.trunk_out.rows(), H);
        for (std::size_t f = 0; f < kNumFeatures; ++f) {
            affine_backward_params(tape.trunk_out, tape.mlm_dlogits[f], P(mlm_out_w_[f]).grad,
                                   P(mlm_out_b_[f]).grad);
            dtrunk.noalias() += tape.mlm_dlogits[f] * P(mlm_out_w_[f]).value.transpose();
        }
        Matrix<T> dact = layer_norm_backward(dtrunk, tape.trunk_ln, P(mlm_ln_g_).value,
                                             P(mlm_ln_g_).grad, P(mlm_ln_b_).grad);
        Matrix<T> dpre = (dact.array() *
                          tape.trunk_pre.unaryExpr([](T v) { return gelu_grad(v); }).array())
                             .matrix();
        affine_backward_params(tape.hsel, dpre, P(mlm_dense_w_).grad, P(mlm_dense_b_).grad);
        const Matrix<T> dhsel = dpre * P(mlm_dense_w_).value.transpose();
        for (std::size_t r = 0; r < tape.rows.size(); ++r) {
            dhidden.row(static_cast<Eigen::Index>(tape.rows[r])) += dhsel.row(static_cast<Eigen::Index>(r));
        }
    } else {
        affine_backward_params(tape.hidden, tape.cls_dlogits, P(cls_w_).grad, P(cls_b_).grad);
        dhidden.noalias() = tape.cls_dlogits * P(cls_w_).value.transpose();
    }

    Matrix<T> dx = layer_norm_backward(dhidden, tape.final_ln, P(final_ln_g_).value,
                                       P(final_ln_g_).grad, P(final_ln_b_).grad);

    Matrix<T> dP(L, L);
    Matrix<T> dS(L, L);
    for (std::size_t li = layer_ids_.size(); li-- > 0;) {
        const auto& ids = layer_ids_[li];
        const auto& lt = tape.layers[li];

        // Feed-forward branch.
        Matrix<T> dffn = dx;
        if (lt.ffn_drop.size() > 0) dffn.array() *= lt.ffn_drop.array();
        affine_backward_params(lt.g, dffn, P(ids.w2).grad, P(ids.b2).grad);
        Matrix<T> du = dffn * P(ids.w2).value.transpose();
        du.array() *= lt.u.unaryExpr([](T v) { return gelu_grad(v); }).array();
        affine_backward_params(lt.b, du, P(ids.w1).grad, P(ids.b1).grad);
        const Matrix<T> dbn = du * P(ids.w1).value.transpose();
        dx += layer_norm_backward(dbn, lt.ln2, P(ids.ln2_g).value, P(ids.ln2_g).grad,
                                  P(ids.ln2_b).grad);

        // Attention branch.
        Matrix<T> dattn = dx;
        if (lt.attn_drop.size() > 0) dattn.array() *= lt.attn_drop.array();
        affine_backward_params(lt.ctx, dattn, P(ids.wo).grad, P(ids.bo).grad);
        const Matrix<T> dctx = dattn * P(ids.wo).value.transpose();

        Matrix<T> dq = Matrix<T>::Zero(lt.q.rows(), H);
        Matrix<T> dk = Matrix<T>::Zero(lt.k.rows(), H);
        Matrix<T> dv = Matrix<T>::Zero(lt.v.rows(), H);
        for (std::size_t b = 0; b < batch.batch; ++b) {
            const auto r0 = static_cast<Eigen::Index>(b) * L;
            for (Eigen::Index h = 0; h < heads; ++h) {
                const auto& probs = lt.probs[b * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)];
                const auto dctx_bh = dctx.block(r0, h * d, L, d);
                dP.noalias() = dctx_bh * lt.v.block(r0, h * d, L, d).transpose();
                dv.block(r0, h * d, L, d).noalias() = probs.transpose() * dctx_bh;
                const auto row_dot = (dP.array() * probs.array()).rowwise().sum().eval();
                dS = (probs.array() * (dP.array().colwise() - row_dot)).matrix();
                dS *= scale;
                dq.block(r0, h * d, L, d).noalias() = dS * lt.k.block(r0, h * d, L, d);
                dk.block(r0, h * d, L, d).noalias() = dS.transpose() * lt.q.block(r0, h * d, L, d);
            }
        }
        affine_backward_params(lt.a, dq, P(ids.wq).grad, P(ids.bq).grad);
        affine_backward_params(lt.a, dk, P(ids.wk).grad, P(ids.bk).grad);
        affine_backward_params(lt.a, dv, P(ids.wv).grad, P(ids.bv).grad);
        Matrix<T> da = dq * P(ids.wq).value.transpose();
        da.noalias() += dk * P(ids.wk).value.transpose();
        da.noalias() += dv * P(ids.wv).value.transpose();
        dx += layer_norm_backward(da, lt.ln1, P(ids.ln1_g).value, P(ids.ln1_g).grad,
                                  P(ids.ln1_b).grad);
    }

    if (tape.embed_drop.size() > 0) dx.array() *= tape.embed_drop.array();
    auto& dpos = P(positional_id_).grad;
    for (std::size_t b = 0; b < batch.batch; ++b) {
        for (std::size_t l = 0; l < batch.length; ++l) {
            const auto p = static_cast<Eigen::Index>(b * batch.length + l);
            dpos.row(static_cast<Eigen::Index>(l)) += dx.row(p);
            for (std::size_t f = 0; f < kNumFeatures; ++f) {
                const auto id = batch.ids[static_cast<std::size_t>(p) * kNumFeatures + f];
                P(embedding_ids_[f]).grad.row(id) += dx.block(p, static_cast<Eigen::Index>(f) * E, 1, E);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Free functions

template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& logits) {
    Matrix<T> out(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const auto e = (logits.row(r).array() - logits.row(r).maxCoeff()).exp().eval();
        out.row(r) = (e / e.sum()).matrix();
    }
    return out;
}

template <typename T>
T mlm_loss(const std::array<Matrix<T>, kNumFeatures>& logits, const Batch& batch) {
    if (!batch.has_targets()) {
        throw ShapeMismatch("MLM loss needs target ids");
    }
    std::vector<std::size_t> rows;
    for (std::size_t p = 0; p < batch.positions(); ++p) {
        if (batch.mlm_mask[p]) rows.push_back(p);
    }
    if (rows.empty()) {
        throw NoMaskedPositions();
    }
    T total = 0;
    for (std::size_t f = 0; f < kNumFeatures; ++f) {
        if (logits[f].rows() != static_cast<Eigen::Index>(batch.positions())) {
            throw ShapeMismatch("MLM logits do not cover every batch position");
        }
        Matrix<T> sel(static_cast<Eigen::Index>(rows.size()), logits[f].cols());
        std::vector<std::int32_t> targets(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            sel.row(static_cast<Eigen::Index>(r)) = logits[f].row(static_cast<Eigen::Index>(rows[r]));
            targets[r] = batch.targets[rows[r] * kNumFeatures + f];
        }
        total += softmax_xent_sum<T>(sel, targets, T(1), nullptr);
    }
    return total / static_cast<T>(rows.size());
}

template <typename T>
T cls_loss(const Matrix<T>& logits, const Batch& batch) {
    if (logits.rows() != static_cast<Eigen::Index>(batch.positions()) || logits.cols() != 2) {
        throw ShapeMismatch("classifier logits must be [positions, 2]");
    }
    T total = 0;
    std::size_t real = 0;
    for (std::size_t p = 0; p < batch.positions(); ++p) {
        if (!batch.pad_mask[p]) continue;
        const Matrix<T> row = logits.row(static_cast<Eigen::Index>(p));
        total += softmax_xent_sum<T>(row, {static_cast<std::int32_t>(batch.labels[p])}, T(1), nullptr);
        ++real;
    }
    if (real == 0) {
        throw Error(ErrorKind::data, "classification batch has no real positions");
    }
    return total / static_cast<T>(real);
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template class FlowTransformer<float>;
template class FlowTransformer<double>;
template Matrix<float> softmax_rows(const Matrix<float>&);
template Matrix<double> softmax_rows(const Matrix<double>&);
template float mlm_loss(const std::array<Matrix<float>, kNumFeatures>&, const Batch&);
template double mlm_loss(const std::array<Matrix<double>, kNumFeatures>&, const Batch&);
template float cls_loss(const Matrix<float>&, const Batch&);
template double cls_loss(const Matrix<double>&, const Batch&);

}  // namespace flowlm
