#include "flowlm/optimizer.hpp"

#include <algorithm>
#include <cmath>

#include "flowlm/errors.hpp"

namespace flowlm {

template <typename T>
AdamState<T> AdamState<T>::zeros_like(const ParameterSet<T>& params) {
    AdamState s;
    for (const auto& t : params) {
        s.m.push_back(Matrix<T>::Zero(t.value.rows(), t.value.cols()));
        s.v.push_back(Matrix<T>::Zero(t.value.rows(), t.value.cols()));
    }
    return s;
}

template <typename T>
double gradient_norm(const ParameterSet<T>& params) {
    double sq = 0.0;
    for (const auto& t : params) {
        if (!t.grad.allFinite()) {
            throw NonFiniteGradient(t.name);
        }
        sq += t.grad.template cast<double>().squaredNorm();
    }
    return std::sqrt(sq);
}

template <typename T>
double parameter_update(ParameterSet<T>& params, AdamState<T>& state, double lr,
                        const AdamConfig& config) {
    if (state.m.size() != params.size()) {
        state = AdamState<T>::zeros_like(params);
    }
    const double norm = gradient_norm(params);
    const double clip = (config.clip_norm > 0.0 && norm > config.clip_norm)
                            ? config.clip_norm / norm
                            : 1.0;

    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(config.beta1, t);
    const double bc2 = 1.0 - std::pow(config.beta2, t);
    const T b1 = static_cast<T>(config.beta1);
    const T b2 = static_cast<T>(config.beta2);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    const T eps = static_cast<T>(config.eps);
    const T c = static_cast<T>(clip);

    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        auto m = state.m[i].array();
        auto v = state.v[i].array();
        const auto g = (p.grad.array() * c).eval();
        m = b1 * m + (T(1) - b1) * g;
        v = b2 * v + (T(1) - b2) * g.square();
        p.value.array() -= step_size * m / (v.sqrt() * inv_sqrt_bc2 + eps);
    }
    return norm;
}

double learning_rate_at(std::int64_t step, std::int64_t total, std::int64_t warmup, double peak) {
    if (warmup > 0 && step < warmup) {
        return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
    }
    if (total <= warmup) {
        return peak;
    }
    const double remaining = static_cast<double>(total - step) / static_cast<double>(total - warmup);
    return peak * std::clamp(remaining, 0.0, 1.0);
}

template struct AdamState<float>;
template struct AdamState<double>;
template double gradient_norm(const ParameterSet<float>&);
template double gradient_norm(const ParameterSet<double>&);
template double parameter_update(ParameterSet<float>&, AdamState<float>&, double, const AdamConfig&);
template double parameter_update(ParameterSet<double>&, AdamState<double>&, double, const AdamConfig&);

}  // namespace flowlm
