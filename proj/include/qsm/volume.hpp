#pragma once

// 3D scalar fields on a regular grid, their Fourier transforms, forward-difference
// operators and the DBV1 on-disk format.
//
// Layout is x-fastest, z-slowest: index = x + nx * (y + ny * z).

#include <array>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "qsm/errors.hpp"

namespace qsm {

using Dims = std::array<std::size_t, 3>;
using Vec3 = std::array<double, 3>;
using Complex = std::complex<double>;

inline std::size_t voxel_count(const Dims& d) { return d[0] * d[1] * d[2]; }

struct VolumeMeta {
    Dims dims{1, 1, 1};
    Vec3 voxel_size{1.0, 1.0, 1.0}; // mm
    Vec3 b0_dir{0.0, 0.0, 1.0};     // unit vector

    std::size_t size() const { return voxel_count(dims); }
    std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
        return x + dims[0] * (y + dims[1] * z);
    }

    // Throws InputError if any invariant is violated.
    void validate() const;

    bool operator==(const VolumeMeta&) const = default;
};

// Builds a meta with b0 normalized to unit length.
VolumeMeta make_meta(Dims dims, Vec3 voxel_size = {1.0, 1.0, 1.0}, Vec3 b0_dir = {0.0, 0.0, 1.0});

// Throws InputError naming `what` if the two grids differ.
void require_same_grid(const VolumeMeta& a, const VolumeMeta& b, const char* what);

template <typename T>
class Volume {
public:
    Volume() = default;

    // Zero-filled volume.
    explicit Volume(const VolumeMeta& meta);

    // Takes ownership of `data`; rejects wrong length or non-finite values.
    Volume(const VolumeMeta& meta, std::vector<T> data);

    const VolumeMeta& meta() const { return meta_; }
    const Dims& dims() const { return meta_.dims; }
    std::size_t size() const { return data_.size(); }

    std::span<const T> values() const { return data_; }
    const T& operator[](std::size_t i) const { return data_[i]; }
    const T& at(std::size_t x, std::size_t y, std::size_t z) const { return data_[meta_.index(x, y, z)]; }

    // Moves the storage out; the volume is left empty.
    std::vector<T> release() && { return std::move(data_); }

private:
    VolumeMeta meta_;
    std::vector<T> data_;
};

using RealVolume = Volume<double>;
using ComplexVolume = Volume<Complex>;

extern template class Volume<double>;
extern template class Volume<Complex>;

// Binary {0,1} volume with at least one nonzero voxel.
class Mask {
public:
    Mask() = default;
    Mask(const VolumeMeta& meta, std::vector<std::uint8_t> data);

    static Mask ones(const VolumeMeta& meta);
    // 1 where |v| > threshold.
    static Mask from_volume(const RealVolume& v, double threshold = 0.5);

    const VolumeMeta& meta() const { return meta_; }
    std::size_t size() const { return data_.size(); }
    std::span<const std::uint8_t> values() const { return data_; }
    bool operator[](std::size_t i) const { return data_[i] != 0; }
    std::size_t count() const;

    RealVolume to_volume() const;

private:
    VolumeMeta meta_;
    std::vector<std::uint8_t> data_;
};

// Element-wise helpers used throughout the solvers.
RealVolume operator+(const RealVolume& a, const RealVolume& b);
RealVolume operator-(const RealVolume& a, const RealVolume& b);
RealVolume operator*(double s, const RealVolume& a);
RealVolume apply_mask(const RealVolume& v, const Mask& m);
double dot(const RealVolume& a, const RealVolume& b);
double norm2(const RealVolume& a);
double max_abs(const RealVolume& a);

// Unnormalized forward DFT.
ComplexVolume fft3(const RealVolume& v);
ComplexVolume fft3(const ComplexVolume& v);
// Inverse DFT with 1/N normalization.
ComplexVolume ifft3(const ComplexVolume& v);

// In-place transforms on raw x-fastest buffers (no finiteness checks).
void fft3_inplace(std::span<Complex> data, const Dims& dims);
void ifft3_inplace(std::span<Complex> data, const Dims& dims);

// Real part of v; rejects imaginary residue larger than rel_tol * max|real|.
RealVolume real_part(const ComplexVolume& v, double rel_tol);

// Forward differences along each axis, zero on the last slice (Neumann boundary).
std::array<RealVolume, 3> grad3(const RealVolume& v);
// Negative adjoint of grad3: <grad3(u), g> = <u, -div3(g)>.
RealVolume div3(const RealVolume& gx, const RealVolume& gy, const RealVolume& gz);

// Raw-buffer forms of the difference operators, shared with the autodiff engine.
void forward_diff(std::span<const double> in, const Dims& dims, int axis, std::span<double> out);
// Accumulates D^T g into `out` (adds, does not overwrite).
void forward_diff_adjoint_add(std::span<const double> g, const Dims& dims, int axis, std::span<double> out);

// DBV1 volume files.
RealVolume read_volume(const std::filesystem::path& path);
void write_volume(const RealVolume& v, const std::filesystem::path& path);
// read_volume + every voxel exactly 0 or 1.
Mask read_mask(const std::filesystem::path& path);
void write_mask(const Mask& m, const std::filesystem::path& path);

} // namespace qsm
