#include "qsm/dipole.hpp"

#include <cmath>

namespace qsm {

double fft_frequency(std::size_t i, std::size_t n) {
    const auto half = (n + 1) / 2;
    const double f = i < half ? static_cast<double>(i) : static_cast<double>(i) - static_cast<double>(n);
    return f / static_cast<double>(n);
}

DipoleKernel build_dipole(const VolumeMeta& meta) {
    meta.validate();
    DipoleKernel k;
    k.meta_ = meta;
    k.spectrum_.assign(meta.size(), 0.0);

    const auto& d = meta.dims;
    const auto& b = meta.b0_dir;
    // The Nyquist bin of an even axis stands for both +1/2 and -1/2. The kernel there is the
    // mean over both signs, which keeps it even under k -> -k and under single-axis flips.
    auto freqs = [&](std::size_t i, int a) {
        const double f = fft_frequency(i, d[a]) / meta.voxel_size[a];
        const bool nyquist = d[a] % 2 == 0 && 2 * i == d[a];
        return nyquist ? std::vector<double>{f, -f} : std::vector<double>{f};
    };
    for (std::size_t z = 0; z < d[2]; ++z) {
        const auto kzs = freqs(z, 2);
        for (std::size_t y = 0; y < d[1]; ++y) {
            const auto kys = freqs(y, 1);
            for (std::size_t x = 0; x < d[0]; ++x) {
                const auto kxs = freqs(x, 0);
                double sum = 0.0;
                int n = 0;
                for (double kz : kzs)
                    for (double ky : kys)
                        for (double kx : kxs) {
                            ++n;
                            const double k2 = kx * kx + ky * ky + kz * kz;
                            if (k2 == 0.0) continue; // DC convention: d(0) = 0
                            const double kb = kx * b[0] + ky * b[1] + kz * b[2];
                            // (k2 - 3 kb^2) / (3 k2) is exactly 0 on the cone when k2 == 3 kb^2.
                            sum += (k2 - 3.0 * kb * kb) / (3.0 * k2);
                        }
                k.spectrum_[meta.index(x, y, z)] = sum / n;
            }
        }
    }
    return k;
}

void DipoleKernel::apply_spectral(std::span<Complex> spectrum) const {
    for (std::size_t i = 0; i < spectrum.size(); ++i) spectrum[i] *= spectrum_[i];
}

void apply_dipole(std::span<const double> in, const DipoleKernel& kernel, std::span<double> out) {
    const auto& dims = kernel.meta().dims;
    if (in.size() != kernel.meta().size() || out.size() != in.size())
        throw InputError("apply_dipole: buffer size does not match kernel grid");
    std::vector<Complex> buf(in.begin(), in.end());
    fft3_inplace(buf, dims);
    kernel.apply_spectral(buf);
    ifft3_inplace(buf, dims);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = buf[i].real();
}

RealVolume forward_field(const RealVolume& chi, const DipoleKernel& kernel) {
    require_same_grid(chi.meta(), kernel.meta(), "forward_field");
    std::vector<Complex> buf(chi.values().begin(), chi.values().end());
    fft3_inplace(buf, chi.dims());
    kernel.apply_spectral(buf);
    ifft3_inplace(buf, chi.dims());
    return real_part(ComplexVolume(chi.meta(), std::move(buf)), 1e-8);
}

RealVolume naive_inverse(const RealVolume& b, const DipoleKernel& kernel, double eps) {
    if (!(eps > 0.0)) throw InputError("naive_inverse: eps must be positive");
    require_same_grid(b.meta(), kernel.meta(), "naive_inverse");
    std::vector<Complex> buf(b.values().begin(), b.values().end());
    fft3_inplace(buf, b.dims());
    for (std::size_t i = 0; i < buf.size(); ++i) {
        const double d = kernel[i];
        buf[i] = std::abs(d) > eps ? buf[i] / d : Complex(0.0);
    }
    ifft3_inplace(buf, b.dims());
    return real_part(ComplexVolume(b.meta(), std::move(buf)), 1e-8);
}

RealVolume band_limit(const RealVolume& v, const DipoleKernel& kernel, double threshold) {
    require_same_grid(v.meta(), kernel.meta(), "band_limit");
    std::vector<Complex> buf(v.values().begin(), v.values().end());
    fft3_inplace(buf, v.dims());
    for (std::size_t i = 0; i < buf.size(); ++i)
        if (std::abs(kernel[i]) <= threshold) buf[i] = 0.0;
    ifft3_inplace(buf, v.dims());
    return real_part(ComplexVolume(v.meta(), std::move(buf)), 1e-8);
}

} // namespace qsm
