#include "qsm/nn/gradcheck.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "qsm/errors.hpp"

namespace qsm::nn {

namespace {
constexpr double kRetry = 1e-7;
constexpr double kEps = std::numeric_limits<double>::epsilon();
constexpr double kNoiseUlps = 32.0;
constexpr std::array<double, 11> kLadder{1e-3, 3e-4, 1e-4, 3e-5, 1e-5, 3e-6, 1e-6, 3e-7, 1e-7, 3e-8, 1e-8};
} // namespace

GradCheckResult check_gradients(const std::function<Tensor(Tape&)>& f, const std::vector<Tensor>& inputs, double step,
                                std::size_t max_entries, std::uint64_t seed) {
    for (const auto& t : inputs)
        if (!t.requires_grad()) throw InputError("check_gradients: inputs must be parameters");
    for (auto t : inputs) t.zero_grad();

    {
        Tape tape;
        tape.backward(f(tape));
    }
    std::vector<std::vector<double>> analytic;
    for (const auto& t : inputs) analytic.push_back(t.grad());

    auto eval = [&f]() {
        Tape tape;
        return f(tape).item();
    };

    const double f0 = eval();
    double gscale = 1e-300;
    for (const auto& g : analytic)
        for (double v : g) gscale = std::max(gscale, std::abs(v));

    std::mt19937_64 rng(seed);
    GradCheckResult res;
    std::vector<double> diffs(inputs.size(), 0.0);
    double scale = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        Tensor t = inputs[k];
        std::vector<std::size_t> idx(t.size());
        std::iota(idx.begin(), idx.end(), 0);
        if (idx.size() > max_entries) {
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(max_entries);
        }
        double max_diff = 0.0;
        auto vals = t.mutable_values();
        for (auto i : idx) {
            const double saved = vals[i];
            auto central = [&](double h) {
                vals[i] = saved + h;
                const double fp = eval();
                vals[i] = saved - h;
                const double fm = eval();
                vals[i] = saved;
                return (fp - fm) / (2.0 * h);
            };
            double numeric = central(step);
            // A fixed step fails two ways: a leaky ReLU or L1 kink inside [x - h, x + h], or
            // rounding noise in a large sum swamping a small h. On a mismatch the quotient is
            // recomputed over a ladder of steps. The adjacent pair that agrees best, net of the
            // rounding floor, supplies the estimate. The analytic value plays no part in that choice.
            if (std::abs(numeric - analytic[k][i]) > kRetry * gscale) {
                std::array<double, kLadder.size()> cd{};
                for (std::size_t j = 0; j < kLadder.size(); ++j) cd[j] = central(kLadder[j]);
                auto spread = [&](std::size_t j) {
                    return std::abs(cd[j] - cd[j + 1]) + kNoiseUlps * kEps * std::max(std::abs(f0), 1.0) / kLadder[j + 1];
                };
                std::size_t best = 0;
                for (std::size_t j = 1; j + 1 < kLadder.size(); ++j)
                    if (spread(j) < spread(best)) best = j;
                numeric = cd[best];
                ++res.kink_retries;
            }
            max_diff = std::max(max_diff, std::abs(numeric - analytic[k][i]));
            scale = std::max({scale, std::abs(numeric), std::abs(analytic[k][i])});
            ++res.entries_checked;
        }
        diffs[k] = max_diff;
    }
    // Normalized by the largest gradient entry over all inputs, so leaves whose true gradient
    // is zero (a bias feeding a normalization) are judged against the whole gradient.
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const double rel = scale > 0.0 ? diffs[k] / scale : diffs[k];
        if (rel > res.max_rel_error || res.worst_input.empty()) {
            res.max_rel_error = rel;
            res.worst_input = "input " + std::to_string(k);
        }
    }
    for (auto t : inputs) t.zero_grad();
    return res;
}

} // namespace qsm::nn
