#pragma once

#include <span>
#include <vector>

#include "qsm/volume.hpp"

namespace qsm {

// Real, even k-space dipole response d(k) = 1/3 - (k.b0)^2 / |k|^2 on the FFT grid,
// with d(0) = 0. Values lie in [-2/3, 1/3].
class DipoleKernel {
public:
    DipoleKernel() = default;

    const VolumeMeta& meta() const { return meta_; }
    std::span<const double> spectrum() const { return spectrum_; }
    double operator[](std::size_t i) const { return spectrum_[i]; }

    // Spectrum as a volume, for export.
    RealVolume as_volume() const { return RealVolume(meta_, spectrum_); }

    // Multiplies a complex spectrum in place by d(k).
    void apply_spectral(std::span<Complex> spectrum) const;

private:
    friend DipoleKernel build_dipole(const VolumeMeta& meta);
    VolumeMeta meta_;
    std::vector<double> spectrum_;
};

// Signed FFT frequency of bin i on an n-point axis, in cycles per sample:
// i/n for i < ceil(n/2), (i - n)/n otherwise.
double fft_frequency(std::size_t i, std::size_t n);

DipoleKernel build_dipole(const VolumeMeta& meta);

// b = F^-1 d F chi.
RealVolume forward_field(const RealVolume& chi, const DipoleKernel& kernel);

// Raw form of the forward operator for the autodiff engine: out = H in.
void apply_dipole(std::span<const double> in, const DipoleKernel& kernel, std::span<double> out);

constexpr double kNaiveInverseEps = 1e-6;

// chi(k) = b(k) / d(k) where |d(k)| > eps, 0 elsewhere.
RealVolume naive_inverse(const RealVolume& b, const DipoleKernel& kernel, double eps = kNaiveInverseEps);

// Zeroes every spectral component of v where |d(k)| <= threshold; used to build
// volumes that are exactly recoverable by the spectral inversions.
RealVolume band_limit(const RealVolume& v, const DipoleKernel& kernel, double threshold);

} // namespace qsm
