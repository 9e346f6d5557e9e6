// Acceptance suite: one [PASS]/[FAIL] line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "qsm/classical.hpp"
#include "qsm/dipole.hpp"
#include "qsm/errors.hpp"
#include "qsm/gradcheck_suite.hpp"
#include "qsm/metrics.hpp"
#include "qsm/nn/checkpoint.hpp"
#include "qsm/nn/ops.hpp"
#include "qsm/phantom.hpp"
#include "qsm/training.hpp"

using namespace qsm;

namespace {

// Tolerances and budgets.
constexpr double kOperatorTol = 1e-10;
constexpr double kSphereTol64 = 0.05, kSphereTol128 = 0.025;
constexpr double kRecoveryTol = 1e-8;
constexpr double kGradTolDouble = 1e-6;
constexpr int kGradCases = 20;
constexpr double kCgAgreementTol = 1e-4;
constexpr double kCycleRatio = 0.5;
constexpr double kMetricTol = 1e-9;
constexpr double kSsimIdentityTol = 1e-12;

// Desk-scale cycle training.
constexpr std::size_t kTrainGrid = 32, kTrainPatch = 16;
constexpr int kTrainEpochs = 10, kStepsPerEpoch = 20; // 200 generator steps
constexpr double kTrainLr = 1e-4;
constexpr std::uint64_t kTrainSeed = 7;

// Reconstruction comparison.
constexpr double kNoiseFraction = 0.05;
constexpr double kMediLambda = 2e-3;
constexpr int kMediIters = 150;

struct Outcome {
    bool ok = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::vector<double> randn(std::size_t n, std::uint64_t seed, double s = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, s);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

RealVolume random_volume(const VolumeMeta& meta, std::uint64_t seed, double s = 1.0) {
    return RealVolume(meta, randn(meta.size(), seed, s));
}

double rel_diff(const RealVolume& a, const RealVolume& b) { return norm2(a - b) / std::max(norm2(b), 1e-300); }

std::filesystem::path scratch(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("qsm_accept_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), {}};
}

// ------------------------------------------------------------------------------------------

Outcome ac1_physics() {
    const std::size_t n = 32;
    const auto meta = make_meta({n, n, n});
    const DipoleKernel k = build_dipole(meta);
    bool bounds = true, cone = true;
    std::size_t cone_bins = 0;
    auto sidx = [&](std::size_t i) { return 2 * i < n ? long(i) : long(i) - long(n); };
    for (std::size_t z = 0; z < n; ++z)
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                const double v = k[meta.index(x, y, z)];
                if (!(v >= -2.0 / 3.0 && v <= 1.0 / 3.0)) bounds = false;
                const long a = sidx(x), b = sidx(y), c = sidx(z);
                // Integer test for |k|^2 = 3 kz^2 with isotropic voxels and b0 along z.
                if (a * a + b * b + c * c == 3 * c * c && c != 0) {
                    ++cone_bins;
                    if (v != 0.0) cone = false;
                }
            }
    const bool dc = k[0] == 0.0;

    double adj = 0.0, lin = 0.0;
    for (std::uint64_t s = 0; s < 3; ++s) {
        const auto m = make_meta({n, n, n}, {1.0, 0.9, 1.2}, {0.0, 0.6, 0.8});
        const DipoleKernel kk = build_dipole(m);
        const RealVolume x = random_volume(m, 10 * s + 1), y = random_volume(m, 10 * s + 2);
        const double l = dot(forward_field(x, kk), y), r = dot(x, forward_field(y, kk));
        adj = std::max(adj, std::abs(l - r) / std::max(std::abs(l), std::abs(r)));
        const double a = 1.7, b = -0.3;
        const RealVolume lhs = forward_field(a * x + b * y, kk);
        const RealVolume rhs = a * forward_field(x, kk) + b * forward_field(y, kk);
        lin = std::max(lin, rel_diff(lhs, rhs));
    }
    Outcome o;
    o.ok = bounds && cone && dc && cone_bins > 0 && adj < kOperatorTol && lin < kOperatorTol;
    o.detail = std::string("bounds ") + (bounds ? "ok" : "violated") + ", " + std::to_string(cone_bins) +
               " cone bins " + (cone ? "exactly 0" : "nonzero") + ", adjoint " + fmt("%.2e", adj) + ", linearity " +
               fmt("%.2e", lin);
    return o;
}

double sphere_mismatch(std::size_t n) {
    const auto meta = make_meta({n, n, n});
    const double c = double(n) / 2.0, R = double(n) / 8.0;
    PhantomSpec spec;
    spec.meta = meta;
    spec.shapes.push_back({Sphere{{c, c, c}, R}, 1.0});
    const RealVolume num = forward_field(make_phantom(spec), build_dipole(meta));
    const RealVolume ana = analytic_sphere_field(meta, {c, c, c}, R, 1.0);
    double s = 0.0, peak = 0.0;
    std::size_t cnt = 0;
    for (std::size_t z = 0; z < n; ++z)
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                const double r = std::sqrt(std::pow(x - c, 2) + std::pow(y - c, 2) + std::pow(z - c, 2));
                peak = std::max(peak, std::abs(ana.at(x, y, z)));
                if (r <= 1.5 * R) continue;
                s += std::pow(num.at(x, y, z) - ana.at(x, y, z), 2);
                ++cnt;
            }
    return std::sqrt(s / double(cnt)) / peak;
}

Outcome ac2_sphere() {
    const double e64 = sphere_mismatch(64), e128 = sphere_mismatch(128);
    return {e64 < kSphereTol64 && e128 < kSphereTol128,
            "exterior RMS / peak: 64^3 " + fmt("%.3f%%", 100 * e64) + ", 128^3 " + fmt("%.3f%%", 100 * e128)};
}

Outcome ac3_recovery() {
    double worst_tkd = 0.0, worst_naive = 0.0;
    for (const Vec3 b0 : {Vec3{0, 0, 1}, Vec3{0.0, 0.6, 0.8}}) {
        const auto meta = make_meta({32, 28, 36}, {1.0, 1.1, 0.9}, b0);
        const DipoleKernel k = build_dipole(meta);
        const RealVolume chi = band_limit(random_volume(meta, 5, 0.1), k, 0.1);
        const RealVolume b = forward_field(chi, k);
        worst_tkd = std::max(worst_tkd, rel_diff(tkd_invert(b, k, TkdParams{0.1}), chi));
        worst_naive = std::max(worst_naive, rel_diff(naive_inverse(b, k), chi));
    }
    return {worst_tkd < kRecoveryTol && worst_naive < kRecoveryTol,
            "relative error TKD " + fmt("%.2e", worst_tkd) + ", naive " + fmt("%.2e", worst_naive)};
}

Outcome ac4_gradients() {
    const auto rows = run_gradcheck_suite(2024, kGradCases);
    double worst = 0.0;
    std::string worst_name;
    bool enough = !rows.empty();
    for (const auto& r : rows) {
        enough = enough && r.cases >= kGradCases;
        if (r.max_rel_error >= worst) {
            worst = r.max_rel_error;
            worst_name = r.name;
        }
    }
    return {enough && worst < kGradTolDouble, std::to_string(rows.size()) + " checks x " + std::to_string(kGradCases) +
                                                  " cases (double), worst " + fmt("%.2e", worst) + " (" + worst_name + ")"};
}

Outcome ac5_solvers() {
    bool monotone = true;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto meta = make_meta({16, 16, 16});
        const RealVolume chi = make_random_piecewise(meta, 5, {-0.2, 0.2}, 300 + seed);
        const SimulatedCase c = simulate_case(chi, Mask::ones(meta), 0.005, seed);
        MediParams p;
        p.lambda = kMediLambda;
        p.iters = 40;
        const MediResult r = medi_invert(c.field, build_dipole(meta), build_medi_weights(c.magnitude, 0.3), p);
        for (std::size_t i = 1; i < r.trace.size(); ++i)
            if (r.trace[i].objective > r.trace[i - 1].objective) monotone = false;
    }
    const auto meta = make_meta({16, 16, 16});
    const DipoleKernel d = build_dipole(meta);
    const RealVolume chi = band_limit(random_volume(meta, 21, 0.1), d, 0.2);
    const RealVolume b = forward_field(chi, d);
    const RealVolume W(meta, std::vector<double>(meta.size(), 1.0));
    const CgResult cg = cg_least_squares(b, d, W, 200, 1e-12);
    MediParams p;
    p.lambda = 0.0;
    p.iters = 300;
    const MediResult r = medi_invert(b, d, MediWeights{W, {W, W, W}, false}, p);
    const double agree = rel_diff(r.chi, cg.chi);
    return {monotone && agree < kCgAgreementTol, std::string("10 MEDI traces ") +
                                                     (monotone ? "non-increasing" : "increase somewhere") +
                                                     ", lambda=0 vs CG " + fmt("%.2e", agree)};
}

// Four piecewise phantoms: two feed the field side, the other two are the unpaired chi labels.
UnpairedDataset desk_dataset() {
    const auto meta = make_meta({kTrainGrid, kTrainGrid, kTrainGrid});
    UnpairedDataset ds;
    for (int i = 0; i < 4; ++i) {
        const RealVolume chi = make_random_piecewise(meta, 8, {-0.2, 0.2}, 1000 + i);
        if (i < 2) {
            ds.field_cases.push_back(simulate_case(chi, Mask::ones(meta), 0.0, 50 + i));
        } else {
            ds.chi_volumes.push_back(chi);
            ds.chi_masks.push_back(std::nullopt);
        }
    }
    return ds;
}

struct DeskRun {
    TrainLog log;
    std::optional<nn::Generator> g;
    std::string error;
};

DeskRun desk_train(const UnpairedDataset& ds) {
    TrainConfig cfg;
    cfg.patch_size = kTrainPatch;
    cfg.epochs = kTrainEpochs;
    cfg.patches_per_epoch = kStepsPerEpoch;
    cfg.adam.lr = kTrainLr;
    cfg.seed = kTrainSeed;
    nn::GeneratorConfig gc;
    gc.seed = kTrainSeed;
    nn::DiscriminatorConfig dc;
    dc.seed = kTrainSeed + 1;
    DeskRun run;
    nn::Generator g(gc);
    nn::Discriminator d(dc);
    try {
        run.log = train_cycleqsm(ds, g, d, cfg);
    } catch (const std::exception& e) {
        run.error = e.what();
    }
    run.g.emplace(std::move(g));
    return run;
}

std::optional<nn::Generator> g_trained;

Outcome ac6_training() {
    const UnpairedDataset ds = desk_dataset();
    DeskRun a = desk_train(ds);
    if (!a.error.empty()) return {false, "training failed: " + a.error};
    const DeskRun b = desk_train(ds);
    const bool same = b.error.empty() && format_train_log_csv(a.log) == format_train_log_csv(b.log);
    bool finite = true;
    for (const auto& r : a.log.rows) finite = finite && std::isfinite(r.report.total);
    const auto means = a.log.epoch_mean_cycle();
    const double ratio = means.back() / means.front();
    g_trained = std::move(a.g);
    std::string curve;
    for (double m : means) curve += fmt("%.1f ", m);
    return {finite && same && ratio < kCycleRatio,
            std::to_string(a.log.rows.size()) + " steps, epoch-mean cycle " + curve + "-> ratio " + fmt("%.3f", ratio) +
                " (need < " + fmt("%.2f", kCycleRatio) + "), " + (finite ? "finite" : "NaN") + ", rerun " +
                (same ? "bit-identical" : "differs")};
}

Outcome ac7_ordering() {
    if (!g_trained) return {false, "no trained generator"};
    const auto meta = make_meta({32, 32, 32});
    const DipoleKernel d = build_dipole(meta);
    const Mask ones = Mask::ones(meta);
    int g_wins = 0, medi_wins = 0;
    std::string rows;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const RealVolume chi = make_random_piecewise(meta, 8, {-0.2, 0.2}, 5000 + seed);
        const double peak = max_abs(forward_field(chi, d));
        const SimulatedCase c = simulate_case(chi, ones, kNoiseFraction * peak, 6000 + seed);
        const RealVolume cyc = infer_stitched(*g_trained, c.field, c.magnitude, c.mask, InferConfig{kTrainPatch, kTrainPatch / 2, 1});
        const RealVolume naive = naive_inverse(c.field, d, 1e-6);
        const RealVolume tkd = tkd_invert(c.field, d, TkdParams{});
        MediParams p;
        p.lambda = kMediLambda;
        p.iters = kMediIters;
        const RealVolume medi = medi_invert(c.field, d, build_medi_weights(c.magnitude, 0.3), p).chi;
        const double ec = rmse_percent(chi, cyc, ones), en = rmse_percent(chi, naive, ones),
                     et = rmse_percent(chi, tkd, ones), em = rmse_percent(chi, medi, ones);
        g_wins += ec < en;
        medi_wins += em < et;
        rows += "[seed " + std::to_string(seed) + ": G " + fmt("%.0f", ec) + " naive " + fmt("%.0f", en) + " MEDI " +
                fmt("%.1f", em) + " TKD " + fmt("%.1f", et) + "] ";
    }
    return {g_wins >= 2 && medi_wins >= 2, "RMSE% " + rows + "G<naive " + std::to_string(g_wins) + "/3, MEDI<TKD " +
                                               std::to_string(medi_wins) + "/3"};
}

Outcome ac8_metrics() {
    const auto meta = make_meta({14, 12, 10});
    const RealVolume t = random_volume(meta, 1), r = t + random_volume(meta, 2, 0.3);
    std::vector<std::uint8_t> mv(meta.size());
    for (std::size_t i = 0; i < mv.size(); ++i) mv[i] = (i % 7) != 0;
    const Mask m(meta, mv);
    double se = 0, st = 0, seall = 0, peak = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        seall += (t[i] - r[i]) * (t[i] - r[i]);
        peak = std::max(peak, std::abs(t[i]));
        if (!m[i]) continue;
        se += (t[i] - r[i]) * (t[i] - r[i]);
        st += t[i] * t[i];
        ++n;
    }
    auto rel = [](double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); };
    double worst = 0.0;
    worst = std::max(worst, rel(rmse(t, r, m), std::sqrt(se / n)));
    worst = std::max(worst, rel(rmse_percent(t, r, m), 100 * std::sqrt(se / st)));
    worst = std::max(worst, rel(psnr(t, r), 10 * std::log10(peak * peak * t.size() / seall)));

    // Three label ROIs; pooled regression from the 2x2 normal equations.
    std::vector<double> lab(meta.size());
    for (std::size_t i = 0; i < lab.size(); ++i) lab[i] = double(i % 4);
    const RoiSet rois = rois_from_labels(RealVolume(meta, lab));
    double N = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < lab.size(); ++i)
        if (lab[i] != 0) {
            N += 1;
            sx += t[i];
            sy += r[i];
            sxx += t[i] * t[i];
            sxy += t[i] * r[i];
        }
    const double det = N * sxx - sx * sx;
    const RegressionResult reg = roi_regression(t, r, rois);
    worst = std::max(worst, rel(reg.slope, (N * sxy - sx * sy) / det));
    worst = std::max(worst, rel(reg.intercept, (sxx * sy - sx * sxy) / det));
    const double s_id = ssim3(t, t);
    return {worst < kMetricTol && std::abs(s_id - 1.0) < kSsimIdentityTol,
            "worst relative deviation " + fmt("%.2e", worst) + ", ssim(truth, truth) - 1 = " + fmt("%.1e", s_id - 1.0)};
}

Outcome ac9_masking() {
    nn::DiscriminatorConfig dc;
    dc.seed = 3;
    const nn::Discriminator d(dc);
    const std::size_t n = 16;
    const auto chi = randn(n * n * n, 4);
    std::vector<double> mask(n * n * n);
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = (i % 3 == 0) ? 0.0 : 1.0;
    bool identical = true;
    for (double poison : {1e6, -1e6, 0.0, 3.0}) {
        auto bad = chi;
        for (std::size_t i = 0; i < mask.size(); ++i)
            if (mask[i] == 0.0) bad[i] = poison * (i % 2 ? 1.0 : -0.5);
        nn::Tape t;
        const nn::Tensor m = nn::Tensor::constant({1, n, n, n}, mask);
        const nn::Tensor a = nn::forward_discriminator(t, d, nn::mul(t, nn::Tensor::constant({1, n, n, n}, chi), m));
        const nn::Tensor b = nn::forward_discriminator(t, d, nn::mul(t, nn::Tensor::constant({1, n, n, n}, bad), m));
        identical = identical && std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(double)) == 0;
    }
    return {identical, std::string("discriminator outputs ") + (identical ? "bit-identical" : "differ") +
                           " under 4 poisonings of out-of-mask voxels"};
}

Outcome ac10_io() {
    const auto dir = scratch("io");
    bool ok = true;
    std::string notes;
    auto expect_kind = [&](const std::string& label, const std::function<void()>& f, IoErrorKind want) {
        try {
            f();
        } catch (const IoError& e) {
            if (e.kind() == want) return;
        } catch (...) {
        }
        ok = false;
        notes += " " + label;
    };

    std::vector<double> vals = randn(12 * 10 * 8, 9);
    for (auto& v : vals) v = double(float(v));
    const RealVolume v(make_meta({12, 10, 8}, {0.9, 1.0, 1.2}, {0.0, 0.6, 0.8}), vals);
    write_volume(v, dir / "a.dbv");
    const RealVolume back = read_volume(dir / "a.dbv");
    write_volume(back, dir / "b.dbv");
    ok = ok && back.meta() == v.meta() && std::memcmp(back.values().data(), vals.data(), vals.size() * 8) == 0 &&
         slurp(dir / "a.dbv") == slurp(dir / "b.dbv");

    nn::GeneratorConfig gc;
    gc.depth = 2;
    gc.base_channels = 4;
    write_checkpoint(nn::Generator(gc), dir / "g.dbc");
    write_checkpoint(nn::load_generator(dir / "g.dbc"), dir / "g2.dbc");
    write_checkpoint(nn::Discriminator{}, dir / "d.dbc");
    write_checkpoint(nn::load_discriminator(dir / "d.dbc"), dir / "d2.dbc");
    ok = ok && slurp(dir / "g.dbc") == slurp(dir / "g2.dbc") && slurp(dir / "d.dbc") == slurp(dir / "d2.dbc");

    const std::string good = slurp(dir / "a.dbv");
    auto spit = [&](const std::string& name, const std::string& s) { std::ofstream(dir / name, std::ios::binary) << s; };
    const auto nl = good.find('\n');
    spit("trunc.dbv", good.substr(0, good.size() - 4));
    spit("magic.dbv", "{\"magic\":\"XXXX\"}\n" + good.substr(nl + 1));
    std::string nan = good;
    const float q = std::numeric_limits<float>::quiet_NaN();
    std::memcpy(nan.data() + nl + 1, &q, 4);
    spit("nan.dbv", nan);
    expect_kind("missing", [&] { read_volume(dir / "none.dbv"); }, IoErrorKind::CannotOpen);
    expect_kind("truncated", [&] { read_volume(dir / "trunc.dbv"); }, IoErrorKind::SizeMismatch);
    expect_kind("magic", [&] { read_volume(dir / "magic.dbv"); }, IoErrorKind::MalformedHeader);
    expect_kind("nan", [&] { read_volume(dir / "nan.dbv"); }, IoErrorKind::NonFinitePayload);

    const std::string g = slurp(dir / "g.dbc");
    spit("trunc.dbc", g.substr(0, g.size() - 4));
    spit("magic.dbc", "DBC9" + g.substr(4));
    expect_kind("ckpt truncated", [&] { nn::read_checkpoint(dir / "trunc.dbc"); }, IoErrorKind::SizeMismatch);
    expect_kind("ckpt magic", [&] { nn::read_checkpoint(dir / "magic.dbc"); }, IoErrorKind::MalformedHeader);
    expect_kind("ckpt missing", [&] { nn::read_checkpoint(dir / "none.dbc"); }, IoErrorKind::CannotOpen);
    std::filesystem::remove_all(dir);
    return {ok, ok ? "DBV1/DBC1 round trips bit-exact, 7 malformed inputs raise the expected kinds"
                   : "mismatch:" + (notes.empty() ? std::string(" round trip") : notes)};
}

} // namespace

int main() {
    struct Criterion {
        const char* id;
        const char* name;
        double budget_s;
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> all = {
        {"AC1", "dipole physics", 5, ac1_physics},
        {"AC2", "analytic sphere", 60, ac2_sphere},
        {"AC3", "exact spectral recovery", 5, ac3_recovery},
        {"AC4", "gradient integrity", 120, ac4_gradients},
        {"AC5", "solver sanity", 120, ac5_solvers},
        {"AC6", "desk-scale cycle training", 900, ac6_training},
        {"AC7", "reconstruction ordering", 1200, ac7_ordering},
        {"AC8", "metric oracles", 10, ac8_metrics},
        {"AC9", "masking contract", 10, ac9_masking},
        {"AC10", "I/O", 5, ac10_io},
    };
    int failed = 0;
    for (const auto& c : all) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_time = secs < c.budget_s;
        const bool pass = o.ok && in_time;
        failed += !pass;
        std::printf("[%s] %s %s: %s (%.1f s, budget %.0f s%s)\n", pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(),
                    secs, c.budget_s, in_time ? "" : ", over budget");
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
