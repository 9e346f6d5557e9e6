#pragma once

// Non-learning dipole inversions: thresholded k-space division (TKD), an edge-weighted
// TV reconstruction in the style of MEDI, and CGLS on the weighted normal equations.

#include <array>
#include <optional>
#include <vector>

#include "qsm/dipole.hpp"
#include "qsm/volume.hpp"

namespace qsm {

struct TkdParams {
    double a = 0.1;
    void validate() const;
};

// chi(k) = b(k) / d_a(k), with d_a = d where |d| > a and a * sign(d) elsewhere (sign(0) = +1).
RealVolume tkd_invert(const RealVolume& b, const DipoleKernel& kernel, const TkdParams& p);

struct MediParams {
    double lambda = 600.0;
    double edge_fraction = 0.3;
    int iters = 300;
    double step = 1.0;         // initial step for the line search
    double smoothing = 1e-6;   // eps in sqrt(t^2 + eps^2)
    bool backtracking = true;  // false: fixed step, abort on a 10x objective increase
    void validate() const;
};

struct MediWeights {
    RealVolume W;                  // data-fidelity weight
    std::array<RealVolume, 3> M;   // per gradient component, 1 = penalized, 0 = edge
    bool edges_found = true;       // false when the magnitude had no gradient at all
};

// W = magnitude / mean(magnitude over mask); M_m = 0 on the top `edge_fraction` quantile of
// |d_m magnitude| (nonzero gradients only). The mask defaults to magnitude > 0.
MediWeights build_medi_weights(const RealVolume& magnitude, double edge_fraction,
                               const std::optional<Mask>& mask = std::nullopt);

struct MediTraceRow {
    int iteration;
    double objective;
    double data_term;
    double reg_term;
};

struct MediResult {
    RealVolume chi;
    std::vector<MediTraceRow> trace; // row 0 is the initial iterate
};

// Minimizes ||W (b - H chi)||^2 + lambda * sum sqrt((M grad chi)^2 + eps^2) by gradient
// descent with Armijo backtracking, starting from chi = 0.
MediResult medi_invert(const RealVolume& b, const DipoleKernel& kernel, const MediWeights& weights,
                       const MediParams& p);

struct CgResult {
    RealVolume chi;
    std::vector<double> residual_norms; // ||W (b - H chi_k)||, k = 0..iterations
    int iterations = 0;
};

// CGLS on min ||W (b - H chi)||, i.e. the normal equations H W^2 H chi = H W^2 b.
// Stops when ||H W r|| <= tol * ||H W b|| or after `iters` iterations.
CgResult cg_least_squares(const RealVolume& b, const DipoleKernel& kernel, const RealVolume& W, int iters,
                          double tol);

} // namespace qsm
