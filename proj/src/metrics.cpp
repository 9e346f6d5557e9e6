#include "qsm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "qsm/errors.hpp"

namespace qsm {

namespace {

void check_pair(const RealVolume& truth, const RealVolume& recon, const std::optional<Mask>& mask, const char* what) {
    require_same_grid(truth.meta(), recon.meta(), what);
    if (mask) require_same_grid(truth.meta(), mask->meta(), what);
}

bool in_region(const std::optional<Mask>& mask, std::size_t i) { return !mask || (*mask)[i] != 0; }

} // namespace

double rmse(const RealVolume& truth, const RealVolume& recon, const Mask& mask) {
    check_pair(truth, recon, mask, "rmse");
    double s = 0.0;
    for (std::size_t i = 0; i < truth.values().size(); ++i)
        if (mask[i]) {
            const double d = truth[i] - recon[i];
            s += d * d;
        }
    return std::sqrt(s / static_cast<double>(mask.count()));
}

double rmse_percent(const RealVolume& truth, const RealVolume& recon, const Mask& mask) {
    check_pair(truth, recon, mask, "rmse_percent");
    double s = 0.0;
    for (std::size_t i = 0; i < truth.values().size(); ++i)
        if (mask[i]) s += truth[i] * truth[i];
    if (s == 0.0) throw InputError("rmse_percent: truth is zero over the mask");
    return 100.0 * rmse(truth, recon, mask) / std::sqrt(s / static_cast<double>(mask.count()));
}

double psnr(const RealVolume& truth, const RealVolume& recon, const std::optional<Mask>& mask,
            std::optional<double> peak) {
    check_pair(truth, recon, mask, "psnr");
    double s = 0.0, n = 0.0, pk = 0.0;
    for (std::size_t i = 0; i < truth.values().size(); ++i)
        if (in_region(mask, i)) {
            const double d = truth[i] - recon[i];
            s += d * d;
            n += 1.0;
            pk = std::max(pk, std::abs(truth[i]));
        }
    const double p = peak.value_or(pk);
    if (!(p > 0.0)) throw InputError("psnr: peak must be positive");
    const double mse = s / n;
    if (mse == 0.0) return kInfinitePsnr;
    return 10.0 * std::log10(p * p / mse);
}

namespace {

// Sums over every valid window of extent w[a] along each axis. Output dims n - w + 1.
std::vector<double> box_sums(const std::vector<double>& v, const Dims& d, const std::array<std::size_t, 3>& w,
                             Dims& out_dims) {
    std::vector<double> cur = v;
    Dims cd = d;
    for (int a = 0; a < 3; ++a) {
        Dims nd = cd;
        nd[a] = cd[a] - w[a] + 1;
        std::vector<double> next(voxel_count(nd), 0.0);
        const std::size_t stride = a == 0 ? 1 : (a == 1 ? cd[0] : cd[0] * cd[1]);
        for (std::size_t z = 0; z < nd[2]; ++z)
            for (std::size_t y = 0; y < nd[1]; ++y)
                for (std::size_t x = 0; x < nd[0]; ++x) {
                    const std::size_t base = x + cd[0] * (y + cd[1] * z);
                    double s = 0.0;
                    for (std::size_t k = 0; k < w[a]; ++k) s += cur[base + k * stride];
                    next[x + nd[0] * (y + nd[1] * z)] = s;
                }
        cur = std::move(next);
        cd = nd;
    }
    out_dims = cd;
    return cur;
}

} // namespace

double ssim3(const RealVolume& truth, const RealVolume& recon, const std::optional<Mask>& mask, const SsimParams& p) {
    check_pair(truth, recon, mask, "ssim3");
    if (p.window == 0) throw InputError("ssim3: window must be positive");
    const Dims d = truth.dims();
    std::array<std::size_t, 3> w{};
    for (int a = 0; a < 3; ++a) {
        w[a] = d[a] == 1 ? 1 : p.window;
        if (w[a] > d[a])
            throw InputError("ssim3: window " + std::to_string(p.window) + " larger than volume extent " +
                             std::to_string(d[a]));
    }

    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t i = 0; i < truth.values().size(); ++i)
        if (in_region(mask, i)) {
            lo = std::min(lo, truth[i]);
            hi = std::max(hi, truth[i]);
        }
    const double L = hi > lo ? hi - lo : 1.0;
    const double c1 = (p.k1 * L) * (p.k1 * L), c2 = (p.k2 * L) * (p.k2 * L);

    const std::size_t n = truth.values().size();
    std::vector<double> x(truth.values().begin(), truth.values().end()), y(recon.values().begin(), recon.values().end());
    std::vector<double> xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    Dims od{};
    const auto sx = box_sums(x, d, w, od), sy = box_sums(y, d, w, od), sxx = box_sums(xx, d, w, od),
               syy = box_sums(yy, d, w, od), sxy = box_sums(xy, d, w, od);
    const double inv = 1.0 / static_cast<double>(w[0] * w[1] * w[2]);

    double total = 0.0, count = 0.0;
    for (std::size_t z = 0; z < od[2]; ++z)
        for (std::size_t yv = 0; yv < od[1]; ++yv)
            for (std::size_t xv = 0; xv < od[0]; ++xv) {
                const std::size_t centre = truth.meta().index(xv + w[0] / 2, yv + w[1] / 2, z + w[2] / 2);
                if (!in_region(mask, centre)) continue;
                const std::size_t j = xv + od[0] * (yv + od[1] * z);
                const double mx = sx[j] * inv, my = sy[j] * inv;
                const double vx = sxx[j] * inv - mx * mx, vy = syy[j] * inv - my * my, cxy = sxy[j] * inv - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
    if (count == 0.0) throw InputError("ssim3: no window centre lies inside the mask");
    return total / count;
}

// -------------------------------------------------------------------------------------------

void validate_rois(const RoiSet& rois, const VolumeMeta& meta) {
    if (rois.empty()) throw InputError("ROI set is empty");
    std::set<std::string> names;
    for (const auto& r : rois) {
        if (!names.insert(r.name).second) throw InputError("duplicate ROI name: " + r.name);
        require_same_grid(meta, r.mask.meta(), "ROI");
    }
}

RoiSet rois_from_labels(const RealVolume& labels) {
    std::map<long long, std::vector<std::uint8_t>> by_label;
    const std::size_t n = labels.values().size();
    for (std::size_t i = 0; i < n; ++i) {
        const double v = labels[i];
        if (v == 0.0) continue;
        if (v != std::round(v)) throw InputError("label volume must hold integer values");
        auto& m = by_label[static_cast<long long>(v)];
        if (m.empty()) m.assign(n, 0);
        m[i] = 1;
    }
    RoiSet out;
    for (auto& [label, m] : by_label) out.push_back({"label" + std::to_string(label), Mask(labels.meta(), std::move(m))});
    if (out.empty()) throw InputError("label volume has no nonzero labels");
    return out;
}

RoiSet phantom_rois(const PhantomSpec& spec) {
    const auto& meta = spec.meta;
    const std::size_t n = meta.size();
    std::vector<int> owner(n, -1);
    for (std::size_t z = 0; z < meta.dims[2]; ++z)
        for (std::size_t y = 0; y < meta.dims[1]; ++y)
            for (std::size_t x = 0; x < meta.dims[0]; ++x) {
                const Vec3 pos = voxel_position(meta, x, y, z);
                for (std::size_t s = 0; s < spec.shapes.size(); ++s)
                    if (contains(spec.shapes[s].geometry, pos)) owner[meta.index(x, y, z)] = static_cast<int>(s);
            }
    RoiSet out;
    for (std::size_t s = 0; s < spec.shapes.size(); ++s) {
        std::vector<std::uint8_t> m(n, 0);
        bool any = false;
        for (std::size_t i = 0; i < n; ++i)
            if (owner[i] == static_cast<int>(s)) {
                m[i] = 1;
                any = true;
            }
        if (any) out.push_back({"shape" + std::to_string(s), Mask(meta, std::move(m))});
    }
    return out;
}

RegressionResult regress(const std::vector<double>& truth, const std::vector<double>& recon) {
    if (truth.size() != recon.size()) throw InputError("regression inputs differ in length");
    const std::size_t n = truth.size();
    if (n < 2) throw InputError("regression needs at least 2 points");
    const double nd = static_cast<double>(n);
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += truth[i];
        my += recon[i];
    }
    mx /= nd;
    my /= nd;
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = truth[i] - mx, dy = recon[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0.0) throw InputError("regression: truth values are all equal");
    RegressionResult r;
    r.n_points = n;
    r.slope = sxy / sxx;
    r.intercept = my - r.slope * mx;
    if (syy > 0.0) {
        r.corr = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
        r.r_squared = r.corr * r.corr;
    }
    double se = 0.0;
    for (std::size_t i = 0; i < n; ++i) se += std::abs(truth[i] - recon[i]);
    r.mean_abs_error = se / nd;
    double sv = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double e = std::abs(truth[i] - recon[i]) - r.mean_abs_error;
        sv += e * e;
    }
    r.std_abs_error = std::sqrt(sv / nd);
    return r;
}

RegressionResult roi_regression(const RealVolume& truth, const RealVolume& recon, const RoiSet& rois,
                                RegressionMode mode) {
    require_same_grid(truth.meta(), recon.meta(), "roi_regression");
    validate_rois(rois, truth.meta());
    std::vector<double> xs, ys;
    if (mode == RegressionMode::PooledVoxels) {
        for (const auto& r : rois)
            for (std::size_t i = 0; i < truth.values().size(); ++i)
                if (r.mask[i]) {
                    xs.push_back(truth[i]);
                    ys.push_back(recon[i]);
                }
    } else {
        const auto mt = roi_means(truth, rois), mr = roi_means(recon, rois);
        for (std::size_t k = 0; k < rois.size(); ++k) {
            xs.push_back(mt[k].mean);
            ys.push_back(mr[k].mean);
        }
    }
    return regress(xs, ys);
}

std::vector<RoiStat> roi_means(const RealVolume& recon, const RoiSet& rois) {
    validate_rois(rois, recon.meta());
    std::vector<RoiStat> out;
    for (const auto& r : rois) {
        double s = 0.0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < recon.values().size(); ++i)
            if (r.mask[i]) {
                s += recon[i];
                ++n;
            }
        if (n == 0) throw InputError("ROI " + r.name + " is empty");
        const double mean = s / static_cast<double>(n);
        double v = 0.0;
        for (std::size_t i = 0; i < recon.values().size(); ++i)
            if (r.mask[i]) v += (recon[i] - mean) * (recon[i] - mean);
        out.push_back({r.name, mean, std::sqrt(v / static_cast<double>(n)), n});
    }
    return out;
}

} // namespace qsm
