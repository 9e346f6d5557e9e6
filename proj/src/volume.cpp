#include "qsm/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>
#include <sstream>

#include <fftw3.h>
#include <json.hpp>

namespace qsm {

void VolumeMeta::validate() const {
    for (int a = 0; a < 3; ++a) {
        if (dims[a] < 1) throw InputError("volume dims must be >= 1 on every axis");
        if (!(voxel_size[a] > 0.0) || !std::isfinite(voxel_size[a]))
            throw InputError("voxel sizes must be positive and finite");
        if (!std::isfinite(b0_dir[a])) throw InputError("b0 direction must be finite");
    }
    const double n = std::sqrt(b0_dir[0] * b0_dir[0] + b0_dir[1] * b0_dir[1] + b0_dir[2] * b0_dir[2]);
    if (std::abs(n - 1.0) > 1e-12) throw InputError("b0 direction must be a unit vector");
}

VolumeMeta make_meta(Dims dims, Vec3 voxel_size, Vec3 b0_dir) {
    const double n = std::sqrt(b0_dir[0] * b0_dir[0] + b0_dir[1] * b0_dir[1] + b0_dir[2] * b0_dir[2]);
    if (!(n > 0.0) || !std::isfinite(n)) throw InputError("b0 direction must be nonzero");
    VolumeMeta m{dims, voxel_size, {b0_dir[0] / n, b0_dir[1] / n, b0_dir[2] / n}};
    m.validate();
    return m;
}

void require_same_grid(const VolumeMeta& a, const VolumeMeta& b, const char* what) {
    if (a.dims != b.dims) throw InputError(std::string(what) + ": volume dimensions differ");
    if (a.voxel_size != b.voxel_size) throw InputError(std::string(what) + ": voxel sizes differ");
    if (a.b0_dir != b.b0_dir) throw InputError(std::string(what) + ": b0 directions differ");
}

namespace {

bool is_finite(double v) { return std::isfinite(v); }
bool is_finite(const Complex& v) { return std::isfinite(v.real()) && std::isfinite(v.imag()); }

} // namespace

template <typename T>
Volume<T>::Volume(const VolumeMeta& meta) : meta_(meta), data_(meta.size()) {
    meta_.validate();
}

template <typename T>
Volume<T>::Volume(const VolumeMeta& meta, std::vector<T> data) : meta_(meta), data_(std::move(data)) {
    meta_.validate();
    if (data_.size() != meta_.size())
        throw InputError("volume data length " + std::to_string(data_.size()) + " does not match dims (" +
                         std::to_string(meta_.size()) + ")");
    for (const auto& v : data_)
        if (!is_finite(v)) throw NumericalError("volume contains non-finite values");
}

template class Volume<double>;
template class Volume<Complex>;

Mask::Mask(const VolumeMeta& meta, std::vector<std::uint8_t> data) : meta_(meta), data_(std::move(data)) {
    meta_.validate();
    if (data_.size() != meta_.size()) throw InputError("mask length does not match dims");
    bool any = false;
    for (auto v : data_) {
        if (v > 1) throw InputError("mask values must be 0 or 1");
        any = any || v;
    }
    if (!any) throw InputError("mask has no nonzero voxel");
}

Mask Mask::ones(const VolumeMeta& meta) { return Mask(meta, std::vector<std::uint8_t>(meta.size(), 1)); }

Mask Mask::from_volume(const RealVolume& v, double threshold) {
    std::vector<std::uint8_t> d(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) d[i] = std::abs(v[i]) > threshold ? 1 : 0;
    return Mask(v.meta(), std::move(d));
}

std::size_t Mask::count() const { return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), 1)); }

RealVolume Mask::to_volume() const {
    std::vector<double> d(data_.begin(), data_.end());
    return RealVolume(meta_, std::move(d));
}

RealVolume operator+(const RealVolume& a, const RealVolume& b) {
    require_same_grid(a.meta(), b.meta(), "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return RealVolume(a.meta(), std::move(out));
}

RealVolume operator-(const RealVolume& a, const RealVolume& b) {
    require_same_grid(a.meta(), b.meta(), "subtract");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return RealVolume(a.meta(), std::move(out));
}

RealVolume operator*(double s, const RealVolume& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * a[i];
    return RealVolume(a.meta(), std::move(out));
}

RealVolume apply_mask(const RealVolume& v, const Mask& m) {
    if (v.dims() != m.meta().dims) throw InputError("apply_mask: dimensions differ");
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = m[i] ? v[i] : 0.0;
    return RealVolume(v.meta(), std::move(out));
}

double dot(const RealVolume& a, const RealVolume& b) {
    if (a.dims() != b.dims()) throw InputError("dot: dimensions differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(const RealVolume& a) { return std::sqrt(dot(a, a)); }

double max_abs(const RealVolume& a) {
    double m = 0.0;
    for (double v : a.values()) m = std::max(m, std::abs(v));
    return m;
}

// ---------------------------------------------------------------------------
// FFT (FFTW, double precision)

namespace {

// FFTW's planner is not re-entrant; execution of distinct plans is.
std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
}

void run_fft(std::span<Complex> data, const Dims& dims, int sign) {
    if (data.size() != voxel_count(dims)) throw InputError("fft: buffer length does not match dims");
    auto* buf = reinterpret_cast<fftw_complex*>(data.data());
    fftw_plan plan;
    {
        std::lock_guard lock(planner_mutex());
        // FFTW is row-major with the last index fastest, so pass (nz, ny, nx). UNALIGNED keeps
        // the codelet choice, and so the rounding, independent of where the buffer happens to live.
        plan = fftw_plan_dft_3d(static_cast<int>(dims[2]), static_cast<int>(dims[1]), static_cast<int>(dims[0]),
                                buf, buf, sign, FFTW_ESTIMATE | FFTW_UNALIGNED);
    }
    if (!plan) throw std::runtime_error("fftw plan creation failed");
    fftw_execute(plan);
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(plan);
}

} // namespace

void fft3_inplace(std::span<Complex> data, const Dims& dims) { run_fft(data, dims, FFTW_FORWARD); }

void ifft3_inplace(std::span<Complex> data, const Dims& dims) {
    run_fft(data, dims, FFTW_BACKWARD);
    const double inv = 1.0 / static_cast<double>(data.size());
    for (auto& c : data) c *= inv;
}

ComplexVolume fft3(const RealVolume& v) {
    std::vector<Complex> buf(v.values().begin(), v.values().end());
    fft3_inplace(buf, v.dims());
    return ComplexVolume(v.meta(), std::move(buf));
}

ComplexVolume fft3(const ComplexVolume& v) {
    std::vector<Complex> buf(v.values().begin(), v.values().end());
    fft3_inplace(buf, v.dims());
    return ComplexVolume(v.meta(), std::move(buf));
}

ComplexVolume ifft3(const ComplexVolume& v) {
    std::vector<Complex> buf(v.values().begin(), v.values().end());
    ifft3_inplace(buf, v.dims());
    return ComplexVolume(v.meta(), std::move(buf));
}

RealVolume real_part(const ComplexVolume& v, double rel_tol) {
    std::vector<double> out(v.size());
    double max_re = 0.0, max_im = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = v[i].real();
        max_re = std::max(max_re, std::abs(v[i].real()));
        max_im = std::max(max_im, std::abs(v[i].imag()));
    }
    if (max_im > rel_tol * max_re && max_im > 1e-300)
        throw NumericalError("imaginary residue " + std::to_string(max_im) + " exceeds tolerance");
    return RealVolume(v.meta(), std::move(out));
}

// ---------------------------------------------------------------------------
// Finite differences

namespace {

std::size_t axis_stride(const Dims& d, int axis) {
    return axis == 0 ? 1 : axis == 1 ? d[0] : d[0] * d[1];
}

} // namespace

void forward_diff(std::span<const double> in, const Dims& dims, int axis, std::span<double> out) {
    const std::size_t n = dims[axis];
    const std::size_t s = axis_stride(dims, axis);
    for (std::size_t z = 0; z < dims[2]; ++z)
        for (std::size_t y = 0; y < dims[1]; ++y)
            for (std::size_t x = 0; x < dims[0]; ++x) {
                const std::size_t i = x + dims[0] * (y + dims[1] * z);
                const std::size_t c = axis == 0 ? x : axis == 1 ? y : z;
                out[i] = c + 1 < n ? in[i + s] - in[i] : 0.0;
            }
}

void forward_diff_adjoint_add(std::span<const double> g, const Dims& dims, int axis, std::span<double> out) {
    const std::size_t n = dims[axis];
    const std::size_t s = axis_stride(dims, axis);
    for (std::size_t z = 0; z < dims[2]; ++z)
        for (std::size_t y = 0; y < dims[1]; ++y)
            for (std::size_t x = 0; x < dims[0]; ++x) {
                const std::size_t i = x + dims[0] * (y + dims[1] * z);
                const std::size_t c = axis == 0 ? x : axis == 1 ? y : z;
                double v = 0.0;
                if (c >= 1) v += g[i - s];
                if (c + 1 < n) v -= g[i];
                out[i] += v;
            }
}

std::array<RealVolume, 3> grad3(const RealVolume& v) {
    std::array<RealVolume, 3> out;
    for (int a = 0; a < 3; ++a) {
        std::vector<double> d(v.size());
        forward_diff(v.values(), v.dims(), a, d);
        out[a] = RealVolume(v.meta(), std::move(d));
    }
    return out;
}

RealVolume div3(const RealVolume& gx, const RealVolume& gy, const RealVolume& gz) {
    if (gx.dims() != gy.dims() || gx.dims() != gz.dims()) throw InputError("div3: component dimensions differ");
    std::vector<double> acc(gx.size(), 0.0);
    forward_diff_adjoint_add(gx.values(), gx.dims(), 0, acc);
    forward_diff_adjoint_add(gy.values(), gy.dims(), 1, acc);
    forward_diff_adjoint_add(gz.values(), gz.dims(), 2, acc);
    for (auto& v : acc) v = -v;
    return RealVolume(gx.meta(), std::move(acc));
}

// ---------------------------------------------------------------------------
// DBV1 I/O

namespace {

constexpr std::size_t kMaxHeaderBytes = 1 << 16;

std::uint32_t to_little(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::little) return v;
    return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
}

[[noreturn]] void malformed(const std::string& path, const std::string& why) {
    throw IoError(IoErrorKind::MalformedHeader, path + ": malformed DBV1 header: " + why);
}

template <typename T, std::size_t N>
std::array<T, N> json_array(const nlohmann::json& j, const char* key, const std::string& path) {
    if (!j.contains(key) || !j[key].is_array() || j[key].size() != N) malformed(path, std::string("field '") + key + "'");
    std::array<T, N> out{};
    for (std::size_t i = 0; i < N; ++i) {
        const auto& e = j[key][i];
        if constexpr (std::is_integral_v<T>) {
            if (!e.is_number_integer() || e.get<long long>() < 1) malformed(path, std::string("field '") + key + "'");
        } else {
            if (!e.is_number()) malformed(path, std::string("field '") + key + "'");
        }
        out[i] = e.get<T>();
    }
    return out;
}

} // namespace

RealVolume read_volume(const std::filesystem::path& path) {
    const std::string p = path.string();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoErrorKind::CannotOpen, p + ": cannot open");

    std::string header;
    char c;
    while (in.get(c) && c != '\n') {
        header.push_back(c);
        if (header.size() > kMaxHeaderBytes) malformed(p, "header too long or missing newline");
    }
    if (c != '\n') malformed(p, "missing header terminator");

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        malformed(p, e.what());
    }
    if (!j.is_object() || j.value("magic", "") != "DBV1") malformed(p, "bad magic");
    if (j.value("dtype", "") != "f32") malformed(p, "unsupported dtype");

    VolumeMeta meta;
    meta.dims = json_array<std::size_t, 3>(j, "dims", p);
    meta.voxel_size = json_array<double, 3>(j, "voxel_size_mm", p);
    meta.b0_dir = json_array<double, 3>(j, "b0_dir", p);
    const double bn = std::sqrt(meta.b0_dir[0] * meta.b0_dir[0] + meta.b0_dir[1] * meta.b0_dir[1] +
                                meta.b0_dir[2] * meta.b0_dir[2]);
    if (std::abs(bn - 1.0) > 1e-6) malformed(p, "b0_dir is not a unit vector");
    if (std::abs(bn - 1.0) > 1e-12)
        for (auto& b : meta.b0_dir) b /= bn;
    try {
        meta.validate();
    } catch (const InputError& e) {
        malformed(p, e.what());
    }

    const std::size_t n = meta.size();
    std::vector<std::uint32_t> raw(n);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(std::uint32_t)));
    const auto got = static_cast<std::size_t>(in.gcount());
    if (got != n * sizeof(std::uint32_t))
        throw IoError(IoErrorKind::SizeMismatch,
                      p + ": payload has " + std::to_string(got) + " bytes, expected " + std::to_string(n * 4));
    if (in.peek() != std::char_traits<char>::eof())
        throw IoError(IoErrorKind::SizeMismatch, p + ": trailing bytes after payload");

    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        const float f = std::bit_cast<float>(to_little(raw[i]));
        if (!std::isfinite(f)) throw IoError(IoErrorKind::NonFinitePayload, p + ": non-finite value at voxel " + std::to_string(i));
        data[i] = f;
    }
    return RealVolume(meta, std::move(data));
}

void write_volume(const RealVolume& v, const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["magic"] = "DBV1";
    j["dims"] = v.dims();
    j["voxel_size_mm"] = v.meta().voxel_size;
    j["b0_dir"] = v.meta().b0_dir;
    j["dtype"] = "f32";

    std::vector<std::uint32_t> raw(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const float f = static_cast<float>(v[i]);
        if (!std::isfinite(f))
            throw IoError(IoErrorKind::NonFinitePayload, path.string() + ": value at voxel " + std::to_string(i) + " does not fit f32");
        raw[i] = to_little(std::bit_cast<std::uint32_t>(f));
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(IoErrorKind::CannotOpen, path.string() + ": cannot open for writing");
    const std::string header = j.dump();
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.put('\n');
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
    if (!out) throw IoError(IoErrorKind::CannotOpen, path.string() + ": write failed");
}

Mask read_mask(const std::filesystem::path& path) {
    const RealVolume v = read_volume(path);
    std::vector<std::uint8_t> d(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (v[i] != 0.0 && v[i] != 1.0) throw InputError(path.string() + ": mask voxels must be 0 or 1");
        d[i] = v[i] == 1.0 ? 1 : 0;
    }
    return Mask(v.meta(), std::move(d));
}

void write_mask(const Mask& m, const std::filesystem::path& path) { write_volume(m.to_volume(), path); }

} // namespace qsm
