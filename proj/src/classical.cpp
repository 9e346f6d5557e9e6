#include "qsm/classical.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace qsm {

void TkdParams::validate() const {
    if (!(a > 0.0 && a < 2.0 / 3.0)) throw InputError("TKD threshold a must lie in (0, 2/3)");
}

RealVolume tkd_invert(const RealVolume& b, const DipoleKernel& kernel, const TkdParams& p) {
    p.validate();
    require_same_grid(b.meta(), kernel.meta(), "tkd_invert");
    std::vector<Complex> buf(b.values().begin(), b.values().end());
    fft3_inplace(buf, b.dims());
    for (std::size_t i = 0; i < buf.size(); ++i) {
        const double d = kernel[i];
        const double da = std::abs(d) > p.a ? d : (d < 0.0 ? -p.a : p.a);
        buf[i] /= da;
    }
    ifft3_inplace(buf, b.dims());
    return real_part(ComplexVolume(b.meta(), std::move(buf)), 1e-8);
}

void MediParams::validate() const {
    if (!(lambda >= 0.0)) throw InputError("MEDI lambda must be >= 0");
    if (!(edge_fraction > 0.0 && edge_fraction < 1.0)) throw InputError("MEDI edge_fraction must lie in (0, 1)");
    if (iters < 1) throw InputError("MEDI iters must be >= 1");
    if (!(step > 0.0)) throw InputError("MEDI step must be positive");
    if (!(smoothing > 0.0)) throw InputError("MEDI smoothing must be positive");
}

MediWeights build_medi_weights(const RealVolume& magnitude, double edge_fraction, const std::optional<Mask>& mask) {
    if (!(edge_fraction > 0.0 && edge_fraction < 1.0)) throw InputError("edge_fraction must lie in (0, 1)");
    const std::size_t n = magnitude.size();

    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const bool in = mask ? (*mask)[i] : magnitude[i] > 0.0;
        if (in) {
            sum += magnitude[i];
            ++count;
        }
    }
    if (mask) require_same_grid(magnitude.meta(), mask->meta(), "build_medi_weights");
    if (count == 0 || !(sum > 0.0)) throw InputError("magnitude has no positive signal inside the mask");
    const double scale = static_cast<double>(count) / sum;

    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) w[i] = std::max(0.0, magnitude[i] * scale);

    MediWeights out{RealVolume(magnitude.meta(), std::move(w)), {}, false};
    const auto g = grad3(magnitude);
    for (int a = 0; a < 3; ++a) {
        std::vector<double> mag(n);
        for (std::size_t i = 0; i < n; ++i) mag[i] = std::abs(g[a][i]);
        std::vector<double> sorted = mag;
        const auto k = static_cast<std::size_t>(std::floor((1.0 - edge_fraction) * static_cast<double>(n)));
        std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(std::min(k, n - 1)), sorted.end());
        const double threshold = sorted[std::min(k, n - 1)];

        std::vector<double> m(n, 1.0);
        for (std::size_t i = 0; i < n; ++i) {
            if (mag[i] > 0.0 && mag[i] >= threshold) {
                m[i] = 0.0;
                out.edges_found = true;
            }
        }
        out.M[a] = RealVolume(magnitude.meta(), std::move(m));
    }
    return out;
}

namespace {

struct MediProblem {
    const RealVolume& b;
    const DipoleKernel& kernel;
    const MediWeights& w;
    double lambda;
    double eps;

    // Returns (data, reg) and fills the gradient when requested.
    std::pair<double, double> evaluate(const std::vector<double>& chi, std::vector<double>* grad) const {
        const std::size_t n = chi.size();
        const Dims& dims = b.dims();
        std::vector<double> hchi(n);
        apply_dipole(chi, kernel, hchi);

        double data = 0.0;
        std::vector<double> wr(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double r = w.W[i] * (hchi[i] - b[i]);
            data += r * r;
            wr[i] = 2.0 * w.W[i] * r;
        }
        if (grad) {
            grad->assign(n, 0.0);
            apply_dipole(wr, kernel, *grad);
        }

        double reg = 0.0;
        if (lambda > 0.0) {
            std::vector<double> d(n), dual(n);
            for (int a = 0; a < 3; ++a) {
                forward_diff(chi, dims, a, d);
                for (std::size_t i = 0; i < n; ++i) {
                    const double m = w.M[a][i];
                    const double t = m * d[i];
                    const double s = std::sqrt(t * t + eps * eps);
                    reg += s;
                    dual[i] = lambda * m * t / s;
                }
                if (grad) forward_diff_adjoint_add(dual, dims, a, *grad);
            }
            reg *= lambda;
        }
        return {data, reg};
    }
};

double squared_norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return s;
}

} // namespace

MediResult medi_invert(const RealVolume& b, const DipoleKernel& kernel, const MediWeights& weights,
                       const MediParams& p) {
    p.validate();
    require_same_grid(b.meta(), kernel.meta(), "medi_invert");
    require_same_grid(b.meta(), weights.W.meta(), "medi_invert weights");
    for (const auto& m : weights.M) require_same_grid(b.meta(), m.meta(), "medi_invert edge mask");

    const MediProblem problem{b, kernel, weights, p.lambda, p.smoothing};
    const std::size_t n = b.size();
    std::vector<double> chi(n, 0.0), grad, trial(n);

    auto [data, reg] = problem.evaluate(chi, &grad);
    double f = data + reg;
    MediResult result;
    result.trace.push_back({0, f, data, reg});

    constexpr double kArmijo = 1e-4;
    constexpr int kMaxHalvings = 60;
    double step = p.step;
    for (int it = 1; it <= p.iters; ++it) {
        const double g2 = squared_norm(grad);
        if (g2 == 0.0) break;

        bool accepted = false;
        double f_new = 0.0, data_new = 0.0, reg_new = 0.0;
        for (int h = 0; h <= kMaxHalvings; ++h) {
            for (std::size_t i = 0; i < n; ++i) trial[i] = chi[i] - step * grad[i];
            std::tie(data_new, reg_new) = problem.evaluate(trial, nullptr);
            f_new = data_new + reg_new;
            if (!p.backtracking) {
                if (!std::isfinite(f_new) || f_new > 10.0 * f) {
                    std::ostringstream msg;
                    msg << "medi_invert diverged at iteration " << it << ": objective " << f << " -> " << f_new
                        << " with step " << step;
                    throw NumericalError(msg.str());
                }
                accepted = true;
                break;
            }
            if (std::isfinite(f_new) && f_new <= f - kArmijo * step * g2) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break; // no descent possible at working precision

        chi.swap(trial);
        std::tie(data, reg) = problem.evaluate(chi, &grad);
        f = data + reg;
        result.trace.push_back({it, f, data, reg});
        if (p.backtracking) step *= 2.0;
    }
    result.chi = RealVolume(b.meta(), std::move(chi));
    return result;
}

CgResult cg_least_squares(const RealVolume& b, const DipoleKernel& kernel, const RealVolume& W, int iters,
                          double tol) {
    require_same_grid(b.meta(), kernel.meta(), "cg_least_squares");
    require_same_grid(b.meta(), W.meta(), "cg_least_squares weights");
    if (iters < 0) throw InputError("cg iterations must be >= 0");
    const std::size_t n = b.size();

    // A = W H, A^T = H W.
    auto apply_a = [&](const std::vector<double>& x, std::vector<double>& out) {
        apply_dipole(x, kernel, out);
        for (std::size_t i = 0; i < n; ++i) out[i] *= W[i];
    };
    auto apply_at = [&](const std::vector<double>& r, std::vector<double>& out) {
        std::vector<double> wr(n);
        for (std::size_t i = 0; i < n; ++i) wr[i] = W[i] * r[i];
        apply_dipole(wr, kernel, out);
    };

    std::vector<double> x(n, 0.0), r(n), s(n), p(n), q(n);
    for (std::size_t i = 0; i < n; ++i) r[i] = W[i] * b[i];
    apply_at(r, s);
    p = s;
    double gamma = squared_norm(s);
    const double gamma0 = gamma;

    CgResult res;
    res.residual_norms.push_back(std::sqrt(squared_norm(r)));
    int k = 0;
    while (k < iters && gamma > tol * tol * gamma0 && gamma > 0.0) {
        apply_a(p, q);
        const double qq = squared_norm(q);
        if (qq == 0.0) break;
        const double alpha = gamma / qq;
        for (std::size_t i = 0; i < n; ++i) {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        apply_at(r, s);
        const double gamma_new = squared_norm(s);
        const double beta = gamma_new / gamma;
        for (std::size_t i = 0; i < n; ++i) p[i] = s[i] + beta * p[i];
        gamma = gamma_new;
        ++k;
        res.residual_norms.push_back(std::sqrt(squared_norm(r)));
    }
    res.iterations = k;
    res.chi = RealVolume(b.meta(), std::move(x));
    return res;
}

} // namespace qsm
