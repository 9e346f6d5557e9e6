#pragma once

#include <span>
#include <vector>

#include "qsm/nn/network.hpp"

namespace qsm::nn {

struct AdamConfig {
    double lr = 1e-5;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    long step = 0;
};

// One bias-corrected Adam update of `params` in place.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamConfig& cfg);

// Adam over every parameter of a module.
class Adam {
public:
    Adam(Module& module, const AdamConfig& cfg);

    // Applies accumulated gradients, then clears them.
    void step();
    const AdamConfig& config() const { return cfg_; }

private:
    Module* module_;
    AdamConfig cfg_;
    std::vector<AdamState> states_;
};

} // namespace qsm::nn
