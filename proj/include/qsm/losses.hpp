#pragma once

// Training objectives for the single-generator cycle: cycle consistency through the known
// dipole operator, least-squares adversarial terms, gradient difference, total variation,
// and the phasor data-consistency loss used for per-volume (DIP) and unsupervised training.
//
// Norm-based terms are sums over voxels by default (||x||_1 = sum |x_i|); a voxel-mean
// reduction is selectable.

#include <memory>
#include <span>
#include <vector>

#include "qsm/dipole.hpp"
#include "qsm/nn/network.hpp"

namespace qsm {

struct LossWeights {
    double gamma = 10.0; // cycle consistency
    double eta = 1.0;    // gradient difference
    double rho = 0.1;    // total variation
    double adversarial = 1.0; // LSGAN generator term; 0 trains on the cycle terms alone
    void validate() const;
};

enum class NormKind { L1, L2 };
enum class Reduction { Sum, Mean };

struct LossOptions {
    NormKind norm = NormKind::L1;
    Reduction reduction = Reduction::Sum;
    // Multiply both sides of the cycle/gradient/TV terms by the sample's mask.
    bool mask_losses = false;
};

struct LossReport {
    double cycle = 0.0;
    double gan_g = 0.0;
    double gan_d = 0.0;
    double grad = 0.0;
    double tv = 0.0;
    double total = 0.0; // gamma*cycle + adversarial*gan_g + eta*grad + rho*tv
};

// A susceptibility patch from the label distribution. Magnitude is the generator's second
// input channel when it re-inverts H chi.
struct ChiSample {
    nn::Tensor chi;       // {1,X,Y,Z}
    nn::Tensor magnitude; // {1,X,Y,Z}
    nn::Tensor mask;      // {1,X,Y,Z}, 0/1
    std::shared_ptr<const DipoleKernel> kernel;
};

// A local-field patch from the measurement distribution.
struct FieldSample {
    nn::Tensor field;
    nn::Tensor magnitude;
    nn::Tensor mask;
    std::shared_ptr<const DipoleKernel> kernel;
};

// chi -> H chi -> G(H chi, magnitude).
struct ChiCycle {
    nn::Tensor chi;
    nn::Tensor cycled;
    nn::Tensor mask;
};

// b -> G(b, magnitude) -> H G(b).
struct FieldCycle {
    nn::Tensor field;
    nn::Tensor recon;
    nn::Tensor cycled;
    nn::Tensor mask;
};

ChiCycle run_chi_cycle(nn::Tape& tape, const nn::Generator& g, const ChiSample& s);
FieldCycle run_field_cycle(nn::Tape& tape, const nn::Generator& g, const FieldSample& s);

// ||x||_1 or ||x||_2^2, summed or voxel-averaged.
nn::Tensor norm_of(nn::Tape& tape, const nn::Tensor& x, NormKind norm, Reduction reduction = Reduction::Sum);
nn::Tensor distance(nn::Tape& tape, const nn::Tensor& a, const nn::Tensor& b, NormKind norm,
                    Reduction reduction = Reduction::Sum);

// mean_i ||chi_i - G(H chi_i)|| + mean_j ||b_j - H G(b_j)||
nn::Tensor cycle_loss(nn::Tape& tape, std::span<const ChiCycle> chis, std::span<const FieldCycle> fields,
                      const LossOptions& opt = {});

// Same structure on forward differences, summed over the three axes.
nn::Tensor grad_diff_loss(nn::Tape& tape, std::span<const ChiCycle> chis, std::span<const FieldCycle> fields,
                          const LossOptions& opt = {});

// Anisotropic TV of G(b): norm of the forward differences summed over axes, mean over batch.
nn::Tensor tv_loss(nn::Tape& tape, std::span<const FieldCycle> fields, const LossOptions& opt = {});
nn::Tensor tv_loss(nn::Tape& tape, std::span<const nn::Tensor> outputs, const LossOptions& opt = {});

// Generator side: mean((D(fake) - 1)^2), gradients flow into the generator.
nn::Tensor lsgan_generator_loss(nn::Tape& tape, const nn::Discriminator& d, std::span<const nn::Tensor> fakes);
// Discriminator side: 1/2 mean((D(real) - 1)^2) + 1/2 mean(D(fake)^2), fakes detached.
nn::Tensor lsgan_discriminator_loss(nn::Tape& tape, const nn::Discriminator& d, std::span<const nn::Tensor> reals,
                                    std::span<const nn::Tensor> fakes);

struct LsganLosses {
    nn::Tensor gan_d;
    nn::Tensor gan_g;
};
LsganLosses lsgan_losses(nn::Tape& tape, const nn::Discriminator& d, std::span<const nn::Tensor> reals,
                         std::span<const nn::Tensor> fakes);

// Masked discriminator inputs: x * mask.
nn::Tensor masked(nn::Tape& tape, const nn::Tensor& x, const nn::Tensor& mask);

struct GeneratorObjective {
    nn::Tensor total;
    LossReport report;            // gan_d left at 0
    std::vector<nn::Tensor> fakes; // G(b) * mask, for the discriminator step
};

// Full generator objective over one batch.
GeneratorObjective total_generator_loss(nn::Tape& tape, const nn::Generator& g, const nn::Discriminator& d,
                                        std::span<const ChiSample> chis, std::span<const FieldSample> fields,
                                        const LossWeights& w, const LossOptions& opt = {});

struct DipTerms {
    nn::Tensor total;
    double data = 0.0;
    double tv = 0.0;
};

constexpr double kDipLambda = 1e-3;

// sum W |e^{j H chi} - e^{j b}| + lambda * sum |grad chi|, with the phasor distance
// smoothed as sqrt(2 - 2 cos + 1e-12) - 1e-6 so it is differentiable and 0 at H chi = b.
DipTerms dip_loss(nn::Tape& tape, const nn::Tensor& chi, const nn::Tensor& field, const nn::Tensor& weight,
                  const DipoleKernel& kernel, double lambda = kDipLambda);

// Volume <-> {1,X,Y,Z} tensor conversions.
nn::Tensor to_tensor(const RealVolume& v);
RealVolume to_volume(const nn::Tensor& t, const VolumeMeta& meta);

} // namespace qsm
