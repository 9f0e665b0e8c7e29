#pragma once

#include <cmath>

#include "prol/tensor.hpp"

namespace prol {

struct OptimizerConfig {
    double base_lr = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Per-parameter Adam state; step counts are per parameter so tensors that
// join late (widened head rows, new classes) get fresh bias correction.
struct AdamState {
    Tensor m, v;
    long step = 0;
};

inline void adam_step(Tensor& data, AdamState& state, const Tensor& grad, double lr,
                      const OptimizerConfig& cfg) {
    if (state.m.numel() != data.numel()) {
        state.m = Tensor::zeros(data.shape);
        state.v = Tensor::zeros(data.shape);
        state.step = 0;
    }
    ++state.step;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < data.numel(); ++i) {
        double g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        double mhat = state.m[i] / bc1;
        double vhat = state.v[i] / bc2;
        data[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

}  // namespace prol
