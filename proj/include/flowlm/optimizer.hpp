#pragma once

#include <cstdint>
#include <vector>

#include "flowlm/model.hpp"

namespace flowlm {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;  // <= 0 disables clipping
};

template <typename T>
struct AdamState {
    std::vector<Matrix<T>> m;
    std::vector<Matrix<T>> v;
    std::int64_t step = 0;

    static AdamState zeros_like(const ParameterSet<T>& params);
};

/// Global L2 norm of all gradients. Throws NonFiniteGradient naming the first
/// tensor holding a NaN or infinity.
template <typename T>
double gradient_norm(const ParameterSet<T>& params);

/// Clip to `clip_norm`, then one bias-corrected Adam step at learning rate `lr`.
/// Returns the pre-clip gradient norm.
template <typename T>
double parameter_update(ParameterSet<T>& params, AdamState<T>& state, double lr,
                        const AdamConfig& config = {});

/// Warmup to `peak` over `warmup` steps, then linear decay to zero at `total`.
double learning_rate_at(std::int64_t step, std::int64_t total, std::int64_t warmup, double peak);

}  // namespace flowlm
