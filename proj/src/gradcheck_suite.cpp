#include "qsm/gradcheck_suite.hpp"

#include <algorithm>
#include <functional>
#include <memory>
#include <random>

#include "qsm/losses.hpp"
#include "qsm/nn/gradcheck.hpp"

namespace qsm {

namespace {

using nn::Shape;
using nn::Tape;
using nn::Tensor;

constexpr double kStep = 1e-6;

std::vector<double> randn(std::size_t n, std::mt19937_64& rng, double s = 1.0) {
    std::normal_distribution<double> d(0.0, s);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

Tensor param(Shape s, std::mt19937_64& rng, double scale = 1.0) {
    const auto n = nn::numel(s);
    return Tensor::parameter(std::move(s), randn(n, rng, scale));
}

Tensor constant(Shape s, std::mt19937_64& rng, double scale = 1.0) {
    const auto n = nn::numel(s);
    return Tensor::constant(std::move(s), randn(n, rng, scale));
}

Tensor project(Tape& tape, const Tensor& y, const Tensor& r) { return nn::sum(tape, nn::mul(tape, y, r)); }

std::shared_ptr<const DipoleKernel> kernel_for(std::size_t n) {
    return std::make_shared<const DipoleKernel>(build_dipole(make_meta({n, n, n}, {1.0, 1.0, 1.0}, {0.2, 0.1, 1.0})));
}

Tensor binary_mask(std::size_t n, std::mt19937_64& rng) {
    std::bernoulli_distribution b(0.7);
    std::vector<double> v(n * n * n);
    for (auto& x : v) x = b(rng) ? 1.0 : 0.0;
    v[0] = 1.0;
    return Tensor::constant({1, n, n, n}, std::move(v));
}

std::vector<Tensor> tensors_of(nn::Module& m) {
    std::vector<Tensor> out;
    for (auto& p : m.parameters()) out.push_back(p.tensor);
    return out;
}

// Checks d/d(inputs) of sum(op(inputs) * R) for a fixed random R.
nn::GradCheckResult projected(std::mt19937_64& rng, const std::vector<Tensor>& inputs,
                              const std::function<Tensor(Tape&)>& op) {
    Shape out_shape;
    {
        Tape probe;
        out_shape = op(probe).shape();
    }
    const Tensor r = constant(out_shape, rng);
    return nn::check_gradients([&](Tape& t) { return project(t, op(t), r); }, inputs, kStep, 48, rng());
}

nn::Generator small_generator(std::mt19937_64& rng) {
    nn::GeneratorConfig cfg;
    cfg.depth = 2;
    cfg.base_channels = 2;
    cfg.init_std = 0.3;
    cfg.seed = rng();
    return nn::Generator(cfg);
}

nn::Discriminator small_discriminator(std::mt19937_64& rng) {
    nn::DiscriminatorConfig cfg;
    cfg.n_layers = 2;
    cfg.base_channels = 2;
    cfg.init_std = 0.3;
    cfg.seed = rng();
    return nn::Discriminator(cfg);
}

struct Batch {
    std::vector<ChiSample> chis;
    std::vector<FieldSample> fields;
};

Batch small_batch(std::mt19937_64& rng, std::size_t n) {
    auto k = kernel_for(n);
    Batch b;
    const Tensor mask = binary_mask(n, rng);
    b.chis.push_back({constant({1, n, n, n}, rng, 0.1), mask, mask, k});
    b.fields.push_back({constant({1, n, n, n}, rng, 0.05), mask, mask, k});
    return b;
}

using Check = std::function<nn::GradCheckResult(std::mt19937_64&)>;

std::vector<std::pair<std::string, Check>> checks() {
    std::vector<std::pair<std::string, Check>> c;

    c.emplace_back("conv3d_3x3x3_stride1", [](std::mt19937_64& rng) {
        Tensor x = param({2, 5, 4, 3}, rng), w = param({3, 2, 3, 3, 3}, rng, 0.3), b = param({3}, rng);
        return projected(rng, {x, w, b}, [=](Tape& t) { return nn::conv3d(t, x, w, b, 1, 1); });
    });
    c.emplace_back("conv3d_4x4x4_stride2", [](std::mt19937_64& rng) {
        Tensor x = param({2, 6, 6, 7}, rng), w = param({2, 2, 4, 4, 4}, rng, 0.3), b = param({2}, rng);
        return projected(rng, {x, w, b}, [=](Tape& t) { return nn::conv3d(t, x, w, b, 2, 1); });
    });
    c.emplace_back("conv3d_1x1x1", [](std::mt19937_64& rng) {
        Tensor x = param({3, 3, 4, 2}, rng), w = param({2, 3, 1, 1, 1}, rng), b = param({2}, rng);
        return projected(rng, {x, w, b}, [=](Tape& t) { return nn::conv3d(t, x, w, b, 1, 0); });
    });
    c.emplace_back("instance_norm", [](std::mt19937_64& rng) {
        Tensor x = param({3, 4, 3, 4}, rng), g = param({3}, rng), b = param({3}, rng);
        return projected(rng, {x, g, b}, [=](Tape& t) { return nn::instance_norm(t, x, g, b); });
    });
    c.emplace_back("leaky_relu", [](std::mt19937_64& rng) {
        Tensor x = param({2, 4, 4, 4}, rng);
        return projected(rng, {x}, [=](Tape& t) { return nn::leaky_relu(t, x); });
    });
    c.emplace_back("upsample_nearest", [](std::mt19937_64& rng) {
        Tensor x = param({2, 3, 2, 3}, rng);
        return projected(rng, {x}, [=](Tape& t) { return nn::upsample_nearest(t, x, 2); });
    });
    c.emplace_back("concat", [](std::mt19937_64& rng) {
        Tensor a = param({2, 3, 3, 3}, rng), b = param({1, 3, 3, 3}, rng);
        return projected(rng, {a, b}, [=](Tape& t) { return nn::concat(t, {a, b}); });
    });
    c.emplace_back("elementwise", [](std::mt19937_64& rng) {
        Tensor a = param({1, 3, 3, 3}, rng), b = param({1, 3, 3, 3}, rng);
        return projected(rng, {a, b}, [=](Tape& t) {
            return nn::mul(t, nn::add(t, a, b), nn::add_scalar(t, nn::sub(t, a, nn::scale(t, b, 0.5)), 0.3));
        });
    });
    c.emplace_back("dipole_forward", [](std::mt19937_64& rng) {
        auto k = kernel_for(6);
        Tensor x = param({2, 6, 6, 6}, rng);
        return projected(rng, {x}, [=](Tape& t) { return nn::dipole_forward(t, x, *k); });
    });
    c.emplace_back("spatial_diff", [](std::mt19937_64& rng) {
        Tensor x = param({2, 4, 3, 5}, rng);
        return projected(rng, {x}, [=](Tape& t) {
            return nn::add(t, nn::spatial_diff(t, x, 0), nn::add(t, nn::spatial_diff(t, x, 1), nn::spatial_diff(t, x, 2)));
        });
    });
    c.emplace_back("reductions", [](std::mt19937_64& rng) {
        Tensor x = param({2, 3, 3, 3}, rng);
        return nn::check_gradients(
            [=](Tape& t) {
                return nn::add(t, nn::add(t, nn::mean_abs(t, x), nn::mean_square(t, x)),
                               nn::add(t, nn::sum_abs(t, x), nn::mean(t, x)));
            },
            {x}, kStep, 48, rng());
    });
    c.emplace_back("phasor_distance", [](std::mt19937_64& rng) {
        Tensor a = param({1, 4, 4, 4}, rng, 1.5);
        Tensor b = constant({1, 4, 4, 4}, rng, 1.5);
        return projected(rng, {a}, [=](Tape& t) { return nn::phasor_distance(t, a, b); });
    });
    c.emplace_back("generator", [](std::mt19937_64& rng) {
        auto g = std::make_shared<nn::Generator>(small_generator(rng));
        Tensor x = param({2, 4, 4, 4}, rng);
        auto inputs = tensors_of(*g);
        inputs.push_back(x);
        return projected(rng, inputs, [=](Tape& t) { return g->forward(t, x); });
    });
    c.emplace_back("discriminator", [](std::mt19937_64& rng) {
        auto d = std::make_shared<nn::Discriminator>(small_discriminator(rng));
        Tensor x = param({1, 6, 6, 6}, rng);
        auto inputs = tensors_of(*d);
        inputs.push_back(x);
        return projected(rng, inputs, [=](Tape& t) { return d->forward(t, x); });
    });
    c.emplace_back("cycle_loss", [](std::mt19937_64& rng) {
        auto g = std::make_shared<nn::Generator>(small_generator(rng));
        auto b = std::make_shared<Batch>(small_batch(rng, 4));
        return nn::check_gradients(
            [=](Tape& t) {
                std::vector<ChiCycle> cc{run_chi_cycle(t, *g, b->chis[0])};
                std::vector<FieldCycle> fc{run_field_cycle(t, *g, b->fields[0])};
                return cycle_loss(t, cc, fc);
            },
            tensors_of(*g), kStep, 12, rng());
    });
    c.emplace_back("grad_diff_loss", [](std::mt19937_64& rng) {
        auto g = std::make_shared<nn::Generator>(small_generator(rng));
        auto b = std::make_shared<Batch>(small_batch(rng, 4));
        return nn::check_gradients(
            [=](Tape& t) {
                std::vector<ChiCycle> cc{run_chi_cycle(t, *g, b->chis[0])};
                std::vector<FieldCycle> fc{run_field_cycle(t, *g, b->fields[0])};
                return grad_diff_loss(t, cc, fc);
            },
            tensors_of(*g), kStep, 12, rng());
    });
    c.emplace_back("tv_loss", [](std::mt19937_64& rng) {
        auto g = std::make_shared<nn::Generator>(small_generator(rng));
        auto b = std::make_shared<Batch>(small_batch(rng, 4));
        return nn::check_gradients(
            [=](Tape& t) {
                std::vector<FieldCycle> fc{run_field_cycle(t, *g, b->fields[0])};
                return tv_loss(t, fc);
            },
            tensors_of(*g), kStep, 12, rng());
    });
    c.emplace_back("lsgan_generator", [](std::mt19937_64& rng) {
        auto g = std::make_shared<nn::Generator>(small_generator(rng));
        auto d = std::make_shared<nn::Discriminator>(small_discriminator(rng));
        const Tensor field = constant({1, 8, 8, 8}, rng, 0.05), mask = binary_mask(8, rng);
        return nn::check_gradients(
            [=](Tape& t) {
                const Tensor fake = masked(t, nn::forward_generator(t, *g, field, mask), mask);
                return lsgan_generator_loss(t, *d, std::vector<Tensor>{fake});
            },
            tensors_of(*g), kStep, 12, rng());
    });
    c.emplace_back("lsgan_discriminator", [](std::mt19937_64& rng) {
        auto d = std::make_shared<nn::Discriminator>(small_discriminator(rng));
        const Tensor real = constant({1, 6, 6, 6}, rng, 0.1), fake = constant({1, 6, 6, 6}, rng, 0.1);
        return nn::check_gradients(
            [=](Tape& t) {
                return lsgan_discriminator_loss(t, *d, std::vector<Tensor>{real}, std::vector<Tensor>{fake});
            },
            tensors_of(*d), kStep, 24, rng());
    });
    c.emplace_back("total_generator_loss", [](std::mt19937_64& rng) {
        auto g = std::make_shared<nn::Generator>(small_generator(rng));
        auto d = std::make_shared<nn::Discriminator>(small_discriminator(rng));
        auto b = std::make_shared<Batch>(small_batch(rng, 8));
        return nn::check_gradients(
            [=](Tape& t) { return total_generator_loss(t, *g, *d, b->chis, b->fields, LossWeights{}).total; },
            tensors_of(*g), kStep, 8, rng());
    });
    c.emplace_back("dip_loss", [](std::mt19937_64& rng) {
        auto k = kernel_for(6);
        Tensor chi = param({1, 6, 6, 6}, rng, 0.5);
        const Tensor field = constant({1, 6, 6, 6}, rng, 0.5);
        std::uniform_real_distribution<double> u(0.5, 1.5);
        std::vector<double> w(216);
        for (auto& v : w) v = u(rng);
        const Tensor weight = Tensor::constant({1, 6, 6, 6}, w);
        return nn::check_gradients([=](Tape& t) { return dip_loss(t, chi, field, weight, *k, 0.1).total; }, {chi},
                                   kStep, 64, rng());
    });
    return c;
}

} // namespace

std::vector<GradcheckRow> run_gradcheck_suite(std::uint64_t seed, int cases_per_check) {
    std::vector<GradcheckRow> rows;
    std::uint64_t salt = 0;
    for (const auto& [name, check] : checks()) {
        GradcheckRow row{name, 0, 0.0};
        for (int i = 0; i < cases_per_check; ++i) {
            std::mt19937_64 rng(seed * 1000003ULL + salt * 7919ULL + static_cast<std::uint64_t>(i));
            row.max_rel_error = std::max(row.max_rel_error, check(rng).max_rel_error);
            ++row.cases;
        }
        rows.push_back(row);
        ++salt;
    }
    return rows;
}

} // namespace qsm
