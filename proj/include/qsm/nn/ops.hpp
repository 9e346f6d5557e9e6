#pragma once

// Differentiable operations. Activations are {C, nx, ny, nz}; convolution weights are
// {Cout, Cin, k, k, k} with the kernel x index fastest.

#include <vector>

#include "qsm/dipole.hpp"
#include "qsm/nn/tensor.hpp"

namespace qsm::nn {

constexpr double kLeakySlope = 0.2;
constexpr double kInstanceNormEps = 1e-5;

// Cross-correlation with zero padding. Output extent per axis: (n + 2 pad - k) / stride + 1.
Tensor conv3d(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad);

// Per-channel normalization to zero mean, unit variance, followed by gamma * x + beta.
Tensor instance_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                     double eps = kInstanceNormEps);

Tensor leaky_relu(Tape& tape, const Tensor& x, double slope = kLeakySlope);

// Nearest-neighbour upsampling: every voxel replicated factor^3 times.
Tensor upsample_nearest(Tape& tape, const Tensor& x, int factor = 2);

// Channel concatenation; spatial dims must agree.
Tensor concat(Tape& tape, const std::vector<Tensor>& xs);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double s);
Tensor add_scalar(Tape& tape, const Tensor& a, double s);

// Applies the dipole forward operator to every channel; spatial dims must equal the kernel grid.
Tensor dipole_forward(Tape& tape, const Tensor& x, const DipoleKernel& kernel);

// Forward difference along spatial axis 0, 1 or 2 (zero on the last slice), per channel.
Tensor spatial_diff(Tape& tape, const Tensor& x, int axis);

Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);
Tensor mean_abs(Tape& tape, const Tensor& x);
Tensor mean_square(Tape& tape, const Tensor& x);
Tensor sum_abs(Tape& tape, const Tensor& x);

// Element-wise |e^{ja} - e^{jb}| = sqrt(2 - 2 cos(a - b) + eps) - sqrt(eps); b is constant.
Tensor phasor_distance(Tape& tape, const Tensor& a, const Tensor& b, double eps = 1e-12);

} // namespace qsm::nn
