#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "flowlm/discretizer.hpp"
#include "flowlm/random.hpp"
#include "flowlm/sequencer.hpp"

namespace flowlm {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Precision { f32, f64 };

std::string_view to_string(Precision p);
Precision parse_precision(std::string_view s);

struct ModelConfig {
    int per_feature_dim = 128;  // token width is six times this
    int layers = 2;
    int heads = 12;
    int ffn_dim = 1536;
    int max_len = 64;
    double dropout = 0.1;
    double layer_norm_eps = 1e-5;
    VocabSizes vocab_sizes{};
    Precision precision = Precision::f32;

    int token_dim() const noexcept { return static_cast<int>(kNumFeatures) * per_feature_dim; }
    int head_dim() const noexcept { return token_dim() / heads; }

    /// Throws ShapeMismatch when the hyperparameters are inconsistent.
    void validate() const;

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    bool operator==(const ModelConfig&) const = default;
};

/// One learned tensor. Vectors (biases, layer-norm parameters) are stored as 1 x n.
template <typename T>
struct NamedTensor {
    std::string name;
    std::vector<std::size_t> shape;
    Matrix<T> value;
    Matrix<T> grad;

    std::size_t numel() const noexcept { return static_cast<std::size_t>(value.size()); }
};

template <typename T>
class ParameterSet {
public:
    std::size_t add(std::string name, std::vector<std::size_t> shape);

    std::size_t size() const noexcept { return tensors_.size(); }
    NamedTensor<T>& operator[](std::size_t i) { return tensors_[i]; }
    const NamedTensor<T>& operator[](std::size_t i) const { return tensors_[i]; }
    auto begin() { return tensors_.begin(); }
    auto end() { return tensors_.end(); }
    auto begin() const { return tensors_.begin(); }
    auto end() const { return tensors_.end(); }

    const NamedTensor<T>* find(const std::string& name) const;
    std::size_t total_elements() const noexcept;
    void zero_grad();

private:
    std::vector<NamedTensor<T>> tensors_;
};

enum class Mode { inference, training };

template <typename T>
struct ForwardTape;

/// Per-feature embeddings -> pre-norm transformer encoder -> MLM and classification heads.
template <typename T>
class FlowTransformer {
public:
    explicit FlowTransformer(ModelConfig config);
    FlowTransformer(const FlowTransformer& other);
    FlowTransformer& operator=(const FlowTransformer& other);
    FlowTransformer(FlowTransformer&&) noexcept;
    FlowTransformer& operator=(FlowTransformer&&) noexcept;
    ~FlowTransformer();

    const ModelConfig& config() const noexcept { return config_; }
    ParameterSet<T>& parameters() noexcept { return params_; }
    const ParameterSet<T>& parameters() const noexcept { return params_; }

    /// Truncated normal (sigma 0.02) weights, zero biases, unit layer-norm gains.
    void init_parameters(Rng& rng);

    // Inference-mode building blocks; rows of every returned matrix are batch * length
    // positions in row-major (sequence, position) order.
    Matrix<T> embed(const Batch& batch) const;
    Matrix<T> encode(const Matrix<T>& embedded, const Batch& batch) const;
    std::array<Matrix<T>, kNumFeatures> mlm_logits(const Matrix<T>& hidden) const;
    Matrix<T> cls_logits(const Matrix<T>& hidden) const;

    /// Convenience: embed + encode.
    Matrix<T> hidden_states(const Batch& batch) const;

    /// Forward pass through the MLM objective. Records what backward() needs.
    /// In training mode dropout is drawn from `dropout_rng` (may be null when the
    /// configured dropout is 0).
    T mlm_forward(const Batch& batch, Mode mode, Rng* dropout_rng = nullptr);
    /// Forward pass through the classification objective (mean over real positions).
    T cls_forward(const Batch& batch, Mode mode, Rng* dropout_rng = nullptr);

    /// Accumulates d(last recorded loss)/d(parameter) into every tensor's grad.
    void backward();

private:
    struct LayerIds {
        std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
    };

    Matrix<T> encode_impl(Matrix<T> x, const Batch& batch, ForwardTape<T>* tape,
                          Rng* dropout_rng) const;
    Matrix<T> embed_impl(const Batch& batch) const;
    void check_batch(const Batch& batch) const;

    ModelConfig config_;
    ParameterSet<T> params_;
    std::array<std::size_t, kNumFeatures> embedding_ids_{};
    std::size_t positional_id_ = 0;
    std::vector<LayerIds> layer_ids_;
    std::size_t final_ln_g_ = 0, final_ln_b_ = 0;
    std::size_t mlm_dense_w_ = 0, mlm_dense_b_ = 0, mlm_ln_g_ = 0, mlm_ln_b_ = 0;
    std::array<std::size_t, kNumFeatures> mlm_out_w_{}, mlm_out_b_{};
    std::size_t cls_w_ = 0, cls_b_ = 0;

    std::unique_ptr<ForwardTape<T>> tape_;
};

/// Mean over selected positions of the summed per-feature cross-entropy. Logit rows
/// cover every batch position. Throws NoMaskedPositions when nothing is selected.
template <typename T>
T mlm_loss(const std::array<Matrix<T>, kNumFeatures>& logits, const Batch& batch);

/// Mean cross-entropy of the two-way classifier over real (non-pad) positions.
template <typename T>
T cls_loss(const Matrix<T>& logits, const Batch& batch);

/// Row-wise softmax.
template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& logits);

extern template class ParameterSet<float>;
extern template class ParameterSet<double>;
extern template class FlowTransformer<float>;
extern template class FlowTransformer<double>;

}  // namespace flowlm
