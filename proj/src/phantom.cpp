#include "qsm/phantom.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace qsm {

namespace {

struct Bounds {
    Vec3 lo, hi;
};

Bounds bounds_of(const Geometry& g) {
    return std::visit(
        [](const auto& s) -> Bounds {
            using T = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<T, Sphere>) {
                return {{s.center[0] - s.radius, s.center[1] - s.radius, s.center[2] - s.radius},
                        {s.center[0] + s.radius, s.center[1] + s.radius, s.center[2] + s.radius}};
            } else if constexpr (std::is_same_v<T, Box>) {
                return {s.corner, {s.corner[0] + s.extent[0], s.corner[1] + s.extent[1], s.corner[2] + s.extent[2]}};
            } else {
                return {{s.center[0] - s.semi_axes[0], s.center[1] - s.semi_axes[1], s.center[2] - s.semi_axes[2]},
                        {s.center[0] + s.semi_axes[0], s.center[1] + s.semi_axes[1], s.center[2] + s.semi_axes[2]}};
            }
        },
        g);
}

void validate_geometry(const Geometry& g, const VolumeMeta& meta) {
    std::visit(
        [](const auto& s) {
            using T = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<T, Sphere>) {
                if (!(s.radius > 0.0)) throw InputError("sphere radius must be positive");
            } else if constexpr (std::is_same_v<T, Box>) {
                for (double e : s.extent)
                    if (!(e > 0.0)) throw InputError("box extents must be positive");
            } else {
                for (double e : s.semi_axes)
                    if (!(e > 0.0)) throw InputError("ellipsoid semi-axes must be positive");
            }
        },
        g);
    // Voxel cells span [-s/2, (n - 1/2) s] along each axis.
    const Bounds b = bounds_of(g);
    for (int a = 0; a < 3; ++a) {
        const double s = meta.voxel_size[a];
        const double lo = -0.5 * s;
        const double hi = (static_cast<double>(meta.dims[a]) - 0.5) * s;
        if (b.lo[a] < lo - 1e-9 || b.hi[a] > hi + 1e-9) throw InputError("shape lies outside the grid");
    }
}

} // namespace

Vec3 voxel_position(const VolumeMeta& meta, std::size_t x, std::size_t y, std::size_t z) {
    return {static_cast<double>(x) * meta.voxel_size[0], static_cast<double>(y) * meta.voxel_size[1],
            static_cast<double>(z) * meta.voxel_size[2]};
}

bool contains(const Geometry& g, const Vec3& p) {
    return std::visit(
        [&p](const auto& s) -> bool {
            using T = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<T, Sphere>) {
                const double dx = p[0] - s.center[0], dy = p[1] - s.center[1], dz = p[2] - s.center[2];
                return dx * dx + dy * dy + dz * dz <= s.radius * s.radius;
            } else if constexpr (std::is_same_v<T, Box>) {
                for (int a = 0; a < 3; ++a)
                    if (p[a] < s.corner[a] || p[a] >= s.corner[a] + s.extent[a]) return false;
                return true;
            } else {
                double r = 0.0;
                for (int a = 0; a < 3; ++a) {
                    const double t = (p[a] - s.center[a]) / s.semi_axes[a];
                    r += t * t;
                }
                return r <= 1.0;
            }
        },
        g);
}

RealVolume make_phantom(const PhantomSpec& spec) {
    spec.meta.validate();
    for (const auto& s : spec.shapes) validate_geometry(s.geometry, spec.meta);

    const auto& d = spec.meta.dims;
    std::vector<double> out(spec.meta.size(), spec.background_chi);
    for (std::size_t z = 0; z < d[2]; ++z)
        for (std::size_t y = 0; y < d[1]; ++y)
            for (std::size_t x = 0; x < d[0]; ++x) {
                const Vec3 p = voxel_position(spec.meta, x, y, z);
                for (auto it = spec.shapes.rbegin(); it != spec.shapes.rend(); ++it) {
                    if (contains(it->geometry, p)) {
                        out[spec.meta.index(x, y, z)] = it->chi;
                        break;
                    }
                }
            }
    return RealVolume(spec.meta, std::move(out));
}

Mask make_phantom_mask(const PhantomSpec& spec) {
    if (!spec.mask_region) return Mask::ones(spec.meta);
    const auto& d = spec.meta.dims;
    std::vector<std::uint8_t> m(spec.meta.size(), 0);
    for (std::size_t z = 0; z < d[2]; ++z)
        for (std::size_t y = 0; y < d[1]; ++y)
            for (std::size_t x = 0; x < d[0]; ++x)
                if (contains(*spec.mask_region, voxel_position(spec.meta, x, y, z))) m[spec.meta.index(x, y, z)] = 1;
    return Mask(spec.meta, std::move(m));
}

std::vector<Shape> random_blobs(const VolumeMeta& meta, int n_blobs, std::pair<double, double> chi_range,
                                std::uint64_t seed) {
    if (n_blobs < 1) throw InputError("n_blobs must be >= 1");
    if (chi_range.first > chi_range.second) throw InputError("chi_range must be ordered [lo, hi]");
    meta.validate();

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<Shape> shapes;
    shapes.reserve(static_cast<std::size_t>(n_blobs));
    for (int i = 0; i < n_blobs; ++i) {
        Ellipsoid e{};
        for (int a = 0; a < 3; ++a) {
            const double s = meta.voxel_size[a];
            const double extent = static_cast<double>(meta.dims[a]) * s;
            e.semi_axes[a] = std::max(0.5 * s, extent * (0.08 + 0.17 * unit(rng)));
            const double lo = -0.5 * s + e.semi_axes[a];
            const double hi = (static_cast<double>(meta.dims[a]) - 0.5) * s - e.semi_axes[a];
            e.center[a] = hi > lo ? lo + (hi - lo) * unit(rng) : 0.5 * (lo + hi);
        }
        const double chi = chi_range.first + (chi_range.second - chi_range.first) * unit(rng);
        shapes.push_back({e, chi});
    }
    return shapes;
}

RealVolume make_random_piecewise(const VolumeMeta& meta, int n_blobs, std::pair<double, double> chi_range,
                                 std::uint64_t seed) {
    PhantomSpec spec;
    spec.meta = meta;
    spec.shapes = random_blobs(meta, n_blobs, chi_range, seed);
    spec.seed = seed;
    return make_phantom(spec);
}

SimulatedCase simulate_case(const RealVolume& chi, const Mask& mask, double noise_sigma, std::uint64_t seed) {
    require_same_grid(chi.meta(), mask.meta(), "simulate_case");
    if (!(noise_sigma >= 0.0)) throw InputError("noise_sigma must be >= 0");

    const DipoleKernel kernel = build_dipole(chi.meta());
    RealVolume clean = forward_field(chi, kernel);
    std::vector<double> field = std::move(clean).release();
    if (noise_sigma > 0.0) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> noise(0.0, noise_sigma);
        for (auto& v : field) v += noise(rng);
    }
    return SimulatedCase{chi, RealVolume(chi.meta(), std::move(field)), mask.to_volume(), mask, noise_sigma};
}

RealVolume analytic_sphere_field(const VolumeMeta& meta, const Vec3& center, double radius, double delta_chi) {
    if (!(radius > 0.0)) throw InputError("sphere radius must be positive");
    meta.validate();
    const auto& d = meta.dims;
    const auto& b = meta.b0_dir;
    std::vector<double> out(meta.size(), 0.0);
    const double r3 = radius * radius * radius;
    for (std::size_t z = 0; z < d[2]; ++z)
        for (std::size_t y = 0; y < d[1]; ++y)
            for (std::size_t x = 0; x < d[0]; ++x) {
                const Vec3 p = voxel_position(meta, x, y, z);
                const double rx = p[0] - center[0], ry = p[1] - center[1], rz = p[2] - center[2];
                const double rr = rx * rx + ry * ry + rz * rz;
                if (rr <= radius * radius) continue;
                const double proj = rx * b[0] + ry * b[1] + rz * b[2];
                const double cos2 = proj * proj / rr;
                // Point dipole of moment delta_chi * V convolved with (3cos^2 - 1) / (4 pi r^3).
                out[meta.index(x, y, z)] = delta_chi / 3.0 * r3 / (rr * std::sqrt(rr)) * (3.0 * cos2 - 1.0);
            }
    return RealVolume(meta, std::move(out));
}

// ---------------------------------------------------------------------------

namespace {

std::vector<double> numbers(const std::string& value, std::size_t expected, const std::string& key, int line) {
    std::istringstream in(value);
    std::vector<double> v;
    double x;
    while (in >> x) v.push_back(x);
    if (!in.eof() || v.size() != expected)
        throw InputError("phantom spec line " + std::to_string(line) + ": '" + key + "' expects " +
                         std::to_string(expected) + " numbers");
    return v;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

} // namespace

PhantomSpec parse_phantom_spec(const std::string& text) {
    Dims dims{0, 0, 0};
    Vec3 voxel{1.0, 1.0, 1.0};
    Vec3 b0{0.0, 0.0, 1.0};
    PhantomSpec spec;

    std::istringstream in(text);
    std::string raw;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const auto hash = raw.find('#');
        const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw InputError("phantom spec line " + std::to_string(line_no) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));

        if (key == "dims") {
            auto v = numbers(value, 3, key, line_no);
            for (int a = 0; a < 3; ++a) {
                if (v[a] < 1 || v[a] != std::floor(v[a])) throw InputError("phantom spec: dims must be positive integers");
                dims[a] = static_cast<std::size_t>(v[a]);
            }
        } else if (key == "voxel_size") {
            auto v = numbers(value, 3, key, line_no);
            voxel = {v[0], v[1], v[2]};
        } else if (key == "b0") {
            auto v = numbers(value, 3, key, line_no);
            b0 = {v[0], v[1], v[2]};
        } else if (key == "background") {
            spec.background_chi = numbers(value, 1, key, line_no)[0];
        } else if (key == "seed") {
            spec.seed = static_cast<std::uint64_t>(numbers(value, 1, key, line_no)[0]);
        } else if (key == "sphere") {
            auto v = numbers(value, 5, key, line_no);
            spec.shapes.push_back({Sphere{{v[0], v[1], v[2]}, v[3]}, v[4]});
        } else if (key == "box") {
            auto v = numbers(value, 7, key, line_no);
            spec.shapes.push_back({Box{{v[0], v[1], v[2]}, {v[3], v[4], v[5]}}, v[6]});
        } else if (key == "ellipsoid") {
            auto v = numbers(value, 7, key, line_no);
            spec.shapes.push_back({Ellipsoid{{v[0], v[1], v[2]}, {v[3], v[4], v[5]}}, v[6]});
        } else if (key == "mask_sphere") {
            auto v = numbers(value, 4, key, line_no);
            spec.mask_region = Sphere{{v[0], v[1], v[2]}, v[3]};
        } else {
            throw InputError("phantom spec line " + std::to_string(line_no) + ": unknown key '" + key + "'");
        }
    }
    if (dims[0] == 0) throw InputError("phantom spec: missing 'dims'");
    spec.meta = make_meta(dims, voxel, b0);
    return spec;
}

PhantomSpec read_phantom_spec(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(IoErrorKind::CannotOpen, path.string() + ": cannot open");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_phantom_spec(ss.str());
}

} // namespace qsm
