#pragma once

#include <cstdint>

#include "olseg/tensor.hpp"

namespace olseg {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    // Coupled (L2-in-gradient) decay by default; decoupled available via flag.
    bool decoupled_weight_decay = false;
};

// First/second moment accumulators, one pair per parameter, plus the step count.
template <typename S>
struct OptimState {
    std::vector<std::vector<S>> m;
    std::vector<std::vector<S>> v;
    int64_t step = 0;
};

// One Adam update over `params` using the gradients accumulated in each
// tensor's grad buffer. Gradients are left untouched (callers zero them).
template <typename S>
void adam_step(std::vector<Tensor<S>>& params, OptimState<S>& state, const AdamConfig& cfg) {
    if (cfg.lr <= 0) throw NumericError("adam_step: learning rate must be positive");
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].numel(), S(0));
            state.v[i].assign(params[i].numel(), S(0));
        }
    }
    if (state.m.size() != params.size()) {
        throw ShapeError("adam_step: state tracks a different parameter set");
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (state.m[i].size() != p.numel()) {
            throw ShapeError("adam_step: parameter " + std::to_string(i) + " changed shape");
        }
        auto& pv = p.values();
        auto& m = state.m[i];
        auto& v = state.v[i];
        const bool has_grad = p.has_grad();
        const std::vector<S>* gv = has_grad ? &p.node()->grad : nullptr;
        for (size_t j = 0; j < pv.size(); ++j) {
            double g = has_grad ? static_cast<double>((*gv)[j]) : 0.0;
            if (!std::isfinite(g)) {
                throw NumericError("adam_step: non-finite gradient in parameter " +
                                   std::to_string(i));
            }
            if (!cfg.decoupled_weight_decay && cfg.weight_decay != 0.0) {
                g += cfg.weight_decay * static_cast<double>(pv[j]);
            }
            const double mj = cfg.beta1 * static_cast<double>(m[j]) + (1.0 - cfg.beta1) * g;
            const double vj = cfg.beta2 * static_cast<double>(v[j]) + (1.0 - cfg.beta2) * g * g;
            m[j] = static_cast<S>(mj);
            v[j] = static_cast<S>(vj);
            double update = cfg.lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps);
            if (cfg.decoupled_weight_decay && cfg.weight_decay != 0.0) {
                update += cfg.lr * cfg.weight_decay * static_cast<double>(pv[j]);
            }
            pv[j] = static_cast<S>(static_cast<double>(pv[j]) - update);
        }
    }
}

}  // namespace olseg
