#include "qsm/nn/ops.hpp"

#include <cmath>

// Small products otherwise fall back to coefficient-wise dot products whose vector peel
// depends on buffer alignment, which makes results differ between identical runs.
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0
#include <Eigen/Core>

#include "qsm/errors.hpp"

namespace qsm::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

void require_activation(const Tensor& x, const char* op) {
    if (x.shape().size() != 4) throw InputError(std::string(op) + ": expected {C,X,Y,Z} tensor, got " + shape_string(x.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw InputError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

struct ConvGeometry {
    std::size_t cin, nx, ny, nz;
    std::size_t k, stride, pad;
    std::size_t ox, oy, oz;
    std::size_t rows() const { return cin * k * k * k; }
    std::size_t cols() const { return ox * oy * oz; }
};

// Column matrix (rows x cols, row-major) of input patches.
void im2col(const double* x, const ConvGeometry& g, double* col) {
    const auto K = g.k;
    const auto P = g.cols();
    std::size_t r = 0;
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t kz = 0; kz < K; ++kz)
            for (std::size_t ky = 0; ky < K; ++ky)
                for (std::size_t kx = 0; kx < K; ++kx, ++r) {
                    double* row = col + r * P;
                    std::size_t p = 0;
                    for (std::size_t oz = 0; oz < g.oz; ++oz) {
                        const auto iz = static_cast<std::ptrdiff_t>(oz * g.stride + kz) - static_cast<std::ptrdiff_t>(g.pad);
                        const bool z_ok = iz >= 0 && iz < static_cast<std::ptrdiff_t>(g.nz);
                        for (std::size_t oy = 0; oy < g.oy; ++oy) {
                            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                            const bool ok = z_ok && iy >= 0 && iy < static_cast<std::ptrdiff_t>(g.ny);
                            const double* src = ok ? x + ((c * g.nz + static_cast<std::size_t>(iz)) * g.ny + static_cast<std::size_t>(iy)) * g.nx : nullptr;
                            for (std::size_t ox = 0; ox < g.ox; ++ox, ++p) {
                                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                                row[p] = (ok && ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.nx)) ? src[ix] : 0.0;
                            }
                        }
                    }
                }
}

void col2im_add(const double* col, const ConvGeometry& g, double* x) {
    const auto K = g.k;
    const auto P = g.cols();
    std::size_t r = 0;
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t kz = 0; kz < K; ++kz)
            for (std::size_t ky = 0; ky < K; ++ky)
                for (std::size_t kx = 0; kx < K; ++kx, ++r) {
                    const double* row = col + r * P;
                    std::size_t p = 0;
                    for (std::size_t oz = 0; oz < g.oz; ++oz) {
                        const auto iz = static_cast<std::ptrdiff_t>(oz * g.stride + kz) - static_cast<std::ptrdiff_t>(g.pad);
                        const bool z_ok = iz >= 0 && iz < static_cast<std::ptrdiff_t>(g.nz);
                        for (std::size_t oy = 0; oy < g.oy; ++oy) {
                            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                            const bool ok = z_ok && iy >= 0 && iy < static_cast<std::ptrdiff_t>(g.ny);
                            if (!ok) {
                                p += g.ox;
                                continue;
                            }
                            double* dst = x + ((c * g.nz + static_cast<std::size_t>(iz)) * g.ny + static_cast<std::size_t>(iy)) * g.nx;
                            for (std::size_t ox = 0; ox < g.ox; ++ox, ++p) {
                                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                                if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.nx)) dst[ix] += row[p];
                            }
                        }
                    }
                }
}

template <typename F>
Tensor unary(Tape& tape, const Tensor& x, F&& f, std::function<void(const Node&, Node&)> back) {
    std::vector<double> out(x.size());
    const auto in = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
    auto xn = x.node_ptr();
    return tape.record(x.shape(), std::move(out), {x}, [xn, back](const Node& self) { back(self, *xn); });
}

} // namespace

Tensor conv3d(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad) {
    require_activation(x, "conv3d");
    const auto& ws = weight.shape();
    if (ws.size() != 5 || ws[2] != ws[3] || ws[3] != ws[4])
        throw InputError("conv3d: weight must be {Cout,Cin,k,k,k}, got " + shape_string(ws));
    if (ws[1] != x.channels())
        throw InputError("conv3d: weight expects " + std::to_string(ws[1]) + " input channels, got " +
                         std::to_string(x.channels()));
    if (bias.size() != ws[0]) throw InputError("conv3d: bias length must equal output channels");
    if (stride < 1 || pad < 0) throw InputError("conv3d: stride must be >= 1 and pad >= 0");

    ConvGeometry g{};
    g.cin = ws[1];
    g.nx = x.shape()[1];
    g.ny = x.shape()[2];
    g.nz = x.shape()[3];
    g.k = ws[2];
    g.stride = static_cast<std::size_t>(stride);
    g.pad = static_cast<std::size_t>(pad);
    for (auto n : {g.nx, g.ny, g.nz})
        if (n + 2 * g.pad < g.k) throw InputError("conv3d: input smaller than kernel");
    g.ox = (g.nx + 2 * g.pad - g.k) / g.stride + 1;
    g.oy = (g.ny + 2 * g.pad - g.k) / g.stride + 1;
    g.oz = (g.nz + 2 * g.pad - g.k) / g.stride + 1;

    const std::size_t cout = ws[0];
    const std::size_t K = g.rows(), P = g.cols();
    std::vector<double> col(K * P);
    im2col(x.values().data(), g, col.data());

    std::vector<double> out(cout * P);
    MapMat o(out.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(P));
    o.noalias() = MapConstMat(weight.values().data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(K)) *
                  MapConstMat(col.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
    const auto b = bias.values();
    for (std::size_t c = 0; c < cout; ++c) o.row(static_cast<Eigen::Index>(c)).array() += b[c];

    auto xn = x.node_ptr(), wn = weight.node_ptr(), bn = bias.node_ptr();
    return tape.record(
        {cout, g.ox, g.oy, g.oz}, std::move(out), {x, weight, bias}, [xn, wn, bn, g, cout](const Node& self) {
            const auto K = g.rows(), P = g.cols();
            MapConstMat dout(self.grad.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(P));
            // The column matrix is rebuilt rather than kept alive between passes.
            std::vector<double> col;
            if (wn->requires_grad) {
                col.resize(K * P);
                im2col(xn->value.data(), g, col.data());
                MapMat dw(wn->grad_buffer().data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(K));
                dw.noalias() += dout * MapConstMat(col.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P)).transpose();
            }
            if (bn->requires_grad) {
                auto db = bn->grad_buffer();
                for (std::size_t c = 0; c < cout; ++c) {
                    double s = 0.0;
                    for (std::size_t p = 0; p < P; ++p) s += self.grad[c * P + p];
                    db[c] += s;
                }
            }
            if (xn->requires_grad) {
                std::vector<double> dcol(K * P);
                MapMat dc(dcol.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
                dc.noalias() = MapConstMat(wn->value.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(K)).transpose() * dout;
                col2im_add(dcol.data(), g, xn->grad_buffer().data());
            }
        });
}

Tensor instance_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require_activation(x, "instance_norm");
    const std::size_t C = x.channels();
    if (gamma.size() != C || beta.size() != C) throw InputError("instance_norm: affine parameters must have C entries");
    const std::size_t N = x.size() / C;
    const auto in = x.values();

    std::vector<double> xhat(x.size()), out(x.size()), inv_std(C);
    for (std::size_t c = 0; c < C; ++c) {
        const double* v = in.data() + c * N;
        double m = 0.0;
        for (std::size_t i = 0; i < N; ++i) m += v[i];
        m /= static_cast<double>(N);
        double var = 0.0;
        for (std::size_t i = 0; i < N; ++i) var += (v[i] - m) * (v[i] - m);
        var /= static_cast<double>(N);
        inv_std[c] = 1.0 / std::sqrt(var + eps);
        const double gm = gamma.values()[c], bt = beta.values()[c];
        for (std::size_t i = 0; i < N; ++i) {
            xhat[c * N + i] = (v[i] - m) * inv_std[c];
            out[c * N + i] = gm * xhat[c * N + i] + bt;
        }
    }

    auto xn = x.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr();
    return tape.record(x.shape(), std::move(out), {x, gamma, beta},
                       [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), C, N](const Node& self) {
                           const auto& dy = self.grad;
                           for (std::size_t c = 0; c < C; ++c) {
                               double sum_dy = 0.0, sum_dy_xhat = 0.0;
                               for (std::size_t i = 0; i < N; ++i) {
                                   sum_dy += dy[c * N + i];
                                   sum_dy_xhat += dy[c * N + i] * xhat[c * N + i];
                               }
                               if (gn->requires_grad) gn->grad_buffer()[c] += sum_dy_xhat;
                               if (bn->requires_grad) bn->grad_buffer()[c] += sum_dy;
                               if (xn->requires_grad) {
                                   const double gm = gn->value[c];
                                   const double inv_n = 1.0 / static_cast<double>(N);
                                   auto dx = xn->grad_buffer();
                                   for (std::size_t i = 0; i < N; ++i) {
                                       const std::size_t j = c * N + i;
                                       dx[j] += gm * inv_std[c] *
                                                (dy[j] - inv_n * sum_dy - xhat[j] * inv_n * sum_dy_xhat);
                                   }
                               }
                           }
                       });
}

Tensor leaky_relu(Tape& tape, const Tensor& x, double slope) {
    return unary(
        tape, x, [slope](double v) { return v > 0.0 ? v : slope * v; },
        [slope](const Node& self, Node& xn) {
            auto dx = xn.grad_buffer();
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i] * (xn.value[i] > 0.0 ? 1.0 : slope);
        });
}

Tensor upsample_nearest(Tape& tape, const Tensor& x, int factor) {
    require_activation(x, "upsample_nearest");
    if (factor < 1) throw InputError("upsample_nearest: factor must be >= 1");
    const auto f = static_cast<std::size_t>(factor);
    const std::size_t C = x.shape()[0], nx = x.shape()[1], ny = x.shape()[2], nz = x.shape()[3];
    const std::size_t ux = nx * f, uy = ny * f, uz = nz * f;
    std::vector<double> out(C * ux * uy * uz);
    const auto in = x.values();
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t z = 0; z < uz; ++z)
            for (std::size_t y = 0; y < uy; ++y)
                for (std::size_t xx = 0; xx < ux; ++xx)
                    out[((c * uz + z) * uy + y) * ux + xx] = in[((c * nz + z / f) * ny + y / f) * nx + xx / f];

    auto xn = x.node_ptr();
    return tape.record({C, ux, uy, uz}, std::move(out), {x}, [xn, C, nx, ny, nz, f](const Node& self) {
        const std::size_t ux = nx * f, uy = ny * f, uz = nz * f;
        auto dx = xn->grad_buffer();
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t z = 0; z < uz; ++z)
                for (std::size_t y = 0; y < uy; ++y)
                    for (std::size_t xx = 0; xx < ux; ++xx)
                        dx[((c * nz + z / f) * ny + y / f) * nx + xx / f] += self.grad[((c * uz + z) * uy + y) * ux + xx];
    });
}

Tensor concat(Tape& tape, const std::vector<Tensor>& xs) {
    if (xs.empty()) throw InputError("concat: no inputs");
    for (const auto& t : xs) require_activation(t, "concat");
    Shape shape = xs.front().shape();
    shape[0] = 0;
    for (const auto& t : xs) {
        if (t.shape()[1] != shape[1] || t.shape()[2] != shape[2] || t.shape()[3] != shape[3])
            throw InputError("concat: spatial dims differ");
        shape[0] += t.shape()[0];
    }
    std::vector<double> out;
    out.reserve(numel(shape));
    std::vector<std::shared_ptr<Node>> nodes;
    for (const auto& t : xs) {
        out.insert(out.end(), t.values().begin(), t.values().end());
        nodes.push_back(t.node_ptr());
    }
    return tape.record(std::move(shape), std::move(out), xs, [nodes](const Node& self) {
        std::size_t off = 0;
        for (const auto& n : nodes) {
            if (n->requires_grad) {
                auto d = n->grad_buffer();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[off + i];
            }
            off += n->value.size();
        }
    });
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    auto an = a.node_ptr(), bn = b.node_ptr();
    return tape.record(a.shape(), std::move(out), {a, b}, [an, bn](const Node& self) {
        for (auto* n : {an.get(), bn.get()})
            if (n->requires_grad) {
                auto d = n->grad_buffer();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
            }
    });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    auto an = a.node_ptr(), bn = b.node_ptr();
    return tape.record(a.shape(), std::move(out), {a, b}, [an, bn](const Node& self) {
        if (an->requires_grad) {
            auto d = an->grad_buffer();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            auto d = bn->grad_buffer();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] -= self.grad[i];
        }
    });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    auto an = a.node_ptr(), bn = b.node_ptr();
    return tape.record(a.shape(), std::move(out), {a, b}, [an, bn](const Node& self) {
        if (an->requires_grad) {
            auto d = an->grad_buffer();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            auto d = bn->grad_buffer();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * an->value[i];
        }
    });
}

Tensor scale(Tape& tape, const Tensor& a, double s) {
    return unary(
        tape, a, [s](double v) { return s * v; },
        [s](const Node& self, Node& an) {
            auto d = an.grad_buffer();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * self.grad[i];
        });
}

Tensor add_scalar(Tape& tape, const Tensor& a, double s) {
    return unary(
        tape, a, [s](double v) { return v + s; },
        [](const Node& self, Node& an) {
            auto d = an.grad_buffer();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
        });
}

Tensor dipole_forward(Tape& tape, const Tensor& x, const DipoleKernel& kernel) {
    require_activation(x, "dipole_forward");
    const auto& d = kernel.meta().dims;
    if (x.shape()[1] != d[0] || x.shape()[2] != d[1] || x.shape()[3] != d[2])
        throw InputError("dipole_forward: tensor spatial dims " + shape_string(x.shape()) + " differ from kernel grid");
    const std::size_t C = x.channels(), N = kernel.meta().size();
    std::vector<double> out(x.size());
    for (std::size_t c = 0; c < C; ++c)
        apply_dipole(x.values().subspan(c * N, N), kernel, std::span<double>(out).subspan(c * N, N));

    auto xn = x.node_ptr();
    // The operator is real, even in k, hence self-adjoint: the backward pass applies it again.
    return tape.record(x.shape(), std::move(out), {x}, [xn, kernel, C, N](const Node& self) {
        std::vector<double> tmp(N);
        auto dx = xn->grad_buffer();
        for (std::size_t c = 0; c < C; ++c) {
            apply_dipole(std::span<const double>(self.grad).subspan(c * N, N), kernel, tmp);
            for (std::size_t i = 0; i < N; ++i) dx[c * N + i] += tmp[i];
        }
    });
}

Tensor spatial_diff(Tape& tape, const Tensor& x, int axis) {
    require_activation(x, "spatial_diff");
    if (axis < 0 || axis > 2) throw InputError("spatial_diff: axis must be 0, 1 or 2");
    const Dims dims{x.shape()[1], x.shape()[2], x.shape()[3]};
    const std::size_t C = x.channels(), N = voxel_count(dims);
    std::vector<double> out(x.size());
    for (std::size_t c = 0; c < C; ++c)
        forward_diff(x.values().subspan(c * N, N), dims, axis, std::span<double>(out).subspan(c * N, N));

    auto xn = x.node_ptr();
    return tape.record(x.shape(), std::move(out), {x}, [xn, dims, axis, C, N](const Node& self) {
        auto dx = xn->grad_buffer();
        for (std::size_t c = 0; c < C; ++c)
            forward_diff_adjoint_add(std::span<const double>(self.grad).subspan(c * N, N), dims, axis,
                                     dx.subspan(c * N, N));
    });
}

namespace {

// Reduction to a scalar: value = sum f(x_i) * w, d/dx_i = f'(x_i) * w.
template <typename F, typename DF>
Tensor reduce(Tape& tape, const Tensor& x, double w, F f, DF df) {
    double s = 0.0;
    for (double v : x.values()) s += f(v);
    auto xn = x.node_ptr();
    return tape.record({1}, {s * w}, {x}, [xn, w, df](const Node& self) {
        const double g = self.grad[0] * w;
        auto dx = xn->grad_buffer();
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g * df(xn->value[i]);
    });
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

} // namespace

Tensor sum(Tape& tape, const Tensor& x) {
    return reduce(tape, x, 1.0, [](double v) { return v; }, [](double) { return 1.0; });
}

Tensor mean(Tape& tape, const Tensor& x) {
    return reduce(tape, x, 1.0 / static_cast<double>(x.size()), [](double v) { return v; }, [](double) { return 1.0; });
}

Tensor mean_abs(Tape& tape, const Tensor& x) {
    return reduce(tape, x, 1.0 / static_cast<double>(x.size()), [](double v) { return std::abs(v); }, sign);
}

Tensor sum_abs(Tape& tape, const Tensor& x) {
    return reduce(tape, x, 1.0, [](double v) { return std::abs(v); }, sign);
}

Tensor mean_square(Tape& tape, const Tensor& x) {
    return reduce(tape, x, 1.0 / static_cast<double>(x.size()), [](double v) { return v * v; },
                  [](double v) { return 2.0 * v; });
}

Tensor phasor_distance(Tape& tape, const Tensor& a, const Tensor& b, double eps) {
    require_same_shape(a, b, "phasor_distance");
    const double root_eps = std::sqrt(eps);
    std::vector<double> out(a.size()), deriv(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double d = a.values()[i] - b.values()[i];
        const double s = std::sqrt(2.0 - 2.0 * std::cos(d) + eps);
        out[i] = s - root_eps;
        deriv[i] = std::sin(d) / s;
    }
    auto an = a.node_ptr();
    return tape.record(a.shape(), std::move(out), {a, b}, [an, deriv = std::move(deriv)](const Node& self) {
        if (!an->requires_grad) return;
        auto d = an->grad_buffer();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * deriv[i];
    });
}

} // namespace qsm::nn
