#include "qsm/nn/optim.hpp"

#include <cmath>

#include "qsm/errors.hpp"

namespace qsm::nn {

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamConfig& cfg) {
    if (params.size() != grads.size()) throw InputError("adam_step: parameter and gradient sizes differ");
    if (state.m.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        const double mhat = state.m[i] / c1;
        const double vhat = state.v[i] / c2;
        params[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

Adam::Adam(Module& module, const AdamConfig& cfg)
    : module_(&module), cfg_(cfg), states_(module.parameters().size()) {
    if (!(cfg.lr > 0.0)) throw InputError("Adam learning rate must be positive");
    if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0 && cfg.beta2 >= 0.0 && cfg.beta2 < 1.0))
        throw InputError("Adam betas must lie in [0, 1)");
}

void Adam::step() {
    auto& params = module_->parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto g = params[i].tensor.grad();
        adam_step(params[i].tensor.mutable_values(), g, states_[i], cfg_);
        params[i].tensor.zero_grad();
    }
}

} // namespace qsm::nn
