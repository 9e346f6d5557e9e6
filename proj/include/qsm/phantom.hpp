#pragma once

// Synthetic susceptibility distributions and simulated local-field measurements.
//
// Physical positions are in mm with voxel (i, j, k) centred at (i*sx, j*sy, k*sz).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <utility>
#include <variant>
#include <vector>

#include "qsm/dipole.hpp"
#include "qsm/volume.hpp"

namespace qsm {

struct Sphere {
    Vec3 center; // mm
    double radius; // mm
};

struct Box {
    Vec3 corner; // mm, lowest corner
    Vec3 extent; // mm, half-open [corner, corner + extent)
};

struct Ellipsoid {
    Vec3 center;
    Vec3 semi_axes; // mm, axis-aligned
};

using Geometry = std::variant<Sphere, Box, Ellipsoid>;

struct Shape {
    Geometry geometry;
    double chi = 0.0; // ppm
};

struct PhantomSpec {
    VolumeMeta meta;
    std::vector<Shape> shapes; // later shapes win on overlap
    double background_chi = 0.0;
    std::uint64_t seed = 0;
    // Optional brain mask region; whole grid when absent.
    std::optional<Geometry> mask_region;
};

struct SimulatedCase {
    RealVolume chi;       // ground truth, ppm
    RealVolume field;     // local field b
    RealVolume magnitude; // mask indicator
    Mask mask;
    double noise_sigma = 0.0;
};

Vec3 voxel_position(const VolumeMeta& meta, std::size_t x, std::size_t y, std::size_t z);
bool contains(const Geometry& g, const Vec3& p);

RealVolume make_phantom(const PhantomSpec& spec);
Mask make_phantom_mask(const PhantomSpec& spec);

// Random axis-aligned ellipsoids with chi ~ U(chi_range). Deterministic per seed.
std::vector<Shape> random_blobs(const VolumeMeta& meta, int n_blobs, std::pair<double, double> chi_range,
                                std::uint64_t seed);
RealVolume make_random_piecewise(const VolumeMeta& meta, int n_blobs,
                                 std::pair<double, double> chi_range = {-0.2, 0.2}, std::uint64_t seed = 0);

// field = H chi + N(0, sigma^2); magnitude = mask indicator.
SimulatedCase simulate_case(const RealVolume& chi, const Mask& mask, double noise_sigma, std::uint64_t seed);

// Local field of a uniform sphere with susceptibility delta_chi in a zero background,
// consistent with the dipole kernel convention of build_dipole (zero inside).
RealVolume analytic_sphere_field(const VolumeMeta& meta, const Vec3& center, double radius, double delta_chi);

// Text phantom description, one `key = value` per line:
//   dims = 64 64 64
//   voxel_size = 1 1 1
//   b0 = 0 0 1
//   background = 0
//   seed = 1
//   sphere = cx cy cz r chi
//   box = x0 y0 z0 ex ey ez chi
//   ellipsoid = cx cy cz ax ay az chi
//   mask_sphere = cx cy cz r
// `#` starts a comment.
PhantomSpec parse_phantom_spec(const std::string& text);
PhantomSpec read_phantom_spec(const std::filesystem::path& path);

} // namespace qsm
