#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "qsm/dipole.hpp"
#include "qsm/errors.hpp"
#include "qsm/nn/checkpoint.hpp"
#include "qsm/training.hpp"
#include "test_util.hpp"

using namespace qsm;

namespace {

nn::Generator small_generator(std::uint64_t seed, bool zero_head = false) {
    nn::GeneratorConfig c;
    c.depth = 2;
    c.base_channels = 4;
    c.seed = seed;
    c.zero_init_output = zero_head;
    return nn::Generator(c);
}

nn::Discriminator small_discriminator(std::uint64_t seed) {
    nn::DiscriminatorConfig c;
    c.n_layers = 1;
    c.base_channels = 2;
    c.seed = seed;
    return nn::Discriminator(c);
}

UnpairedDataset toy_dataset(const VolumeMeta& meta, int n, bool band_limited, std::uint64_t seed) {
    const DipoleKernel k = build_dipole(meta);
    UnpairedDataset ds;
    for (int i = 0; i < n; ++i) {
        RealVolume chi = make_random_piecewise(meta, 3, {-0.2, 0.2}, seed + i);
        if (band_limited) chi = band_limit(chi, k, 0.15);
        ds.field_cases.push_back(simulate_case(chi, Mask::ones(meta), 0.0, seed + 100 + i));
        ds.chi_volumes.push_back(chi);
        ds.chi_masks.push_back(std::nullopt);
    }
    return ds;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

double median(std::vector<double> v) {
    std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
    return v[v.size() / 2];
}

} // namespace

// ------------------------------------------------------------------------------------------

TEST_CASE("train config validation") {
    TrainConfig c;
    CHECK_NOTHROW(c.validate(2));
    CHECK(c.stride() == 8);
    c.patch_size = 12;
    CHECK_THROWS_AS(c.validate(8), InputError);
    c = TrainConfig{};
    c.infer_stride = 32;
    CHECK_THROWS_AS(c.validate(2), InputError);
    c = TrainConfig{};
    c.adam.lr = 0.0;
    CHECK_THROWS_AS(c.validate(2), InputError);
    c = TrainConfig{};
    c.batch_size = 4;
    c.patches_per_epoch = 10;
    CHECK(c.steps_per_epoch() == 2);
    c.patches_per_epoch = 3;
    CHECK_THROWS_AS(c.validate(2), InputError);
}

TEST_CASE("patch origins are uniform over valid positions") {
    std::mt19937_64 rng(17);
    const Dims d{8, 8, 8};
    const std::size_t p = 4, draws = 10000;
    std::map<std::array<std::size_t, 3>, int> hist;
    for (std::size_t i = 0; i < draws; ++i) {
        const Dims o = sample_origin(d, p, rng);
        for (int a = 0; a < 3; ++a) REQUIRE(o[a] + p <= d[a]);
        ++hist[{o[0], o[1], o[2]}];
    }
    CHECK(hist.size() == 125);
    const double expected = double(draws) / 125.0;
    double chi2 = 0.0;
    for (const auto& [k, n] : hist) chi2 += (n - expected) * (n - expected) / expected;
    // Wilson-Hilferty upper 0.1% point for 124 degrees of freedom.
    const double df = 124.0, z = 3.090232;
    const double crit = df * std::pow(1.0 - 2.0 / (9.0 * df) + z * std::sqrt(2.0 / (9.0 * df)), 3.0);
    CHECK(chi2 < crit);

    std::mt19937_64 r2(1);
    const Dims same = sample_origin({6, 6, 6}, 6, r2);
    CHECK(same == Dims{0, 0, 0});
    CHECK_THROWS_AS(sample_origin({6, 5, 6}, 6, r2), InputError);
}

TEST_CASE("extract_patch copies the right voxels") {
    const auto meta = make_meta({7, 6, 5}, {1.0, 1.5, 2.0}, {0, 0, 1});
    const RealVolume v = testutil::random_volume(meta, 3);
    const RealVolume p = extract_patch(v, {2, 1, 0}, 4);
    CHECK(p.dims() == Dims{4, 4, 4});
    CHECK(p.meta().voxel_size == meta.voxel_size);
    for (std::size_t z = 0; z < 4; ++z)
        for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t x = 0; x < 4; ++x) CHECK(p.at(x, y, z) == v.at(x + 2, y + 1, z));
    CHECK_THROWS_AS(extract_patch(v, {4, 0, 0}, 4), InputError);
}

TEST_CASE("sample_patches is deterministic and keeps field, magnitude and mask aligned") {
    const auto meta = make_meta({10, 10, 10});
    UnpairedDataset ds = toy_dataset(meta, 3, false, 5);
    TrainConfig cfg;
    cfg.patch_size = 4;
    cfg.batch_size = 3;
    std::mt19937_64 a(9), b(9);
    const PatchBatch pa = sample_patches(ds, cfg, a), pb = sample_patches(ds, cfg, b);
    REQUIRE(pa.fields.size() == 3);
    REQUIRE(pa.chis.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(pa.fields[i].origin == pb.fields[i].origin);
        CHECK(pa.fields[i].source == pb.fields[i].source);
        const auto& c = ds.field_cases[pa.fields[i].source];
        const RealVolume f = extract_patch(c.field, pa.fields[i].origin, 4);
        CHECK(testutil::max_abs_diff(f.values(), pa.fields[i].field.values()) == 0.0);
        CHECK(testutil::max_abs_diff(pa.chis[i].mask.values(), std::vector<double>(64, 1.0)) == 0.0);
    }
    ds.chi_masks.pop_back();
    CHECK_THROWS_AS(sample_patches(ds, cfg, a), InputError);
}

// ------------------------------------------------------------------------------------------

TEST_CASE("augmentation group identities") {
    const auto meta = make_meta({4, 5, 6}, {1.0, 1.2, 0.8}, {0, 0, 1});
    const RealVolume v = testutil::random_volume(meta, 4);
    auto same = [](const RealVolume& a, const RealVolume& b) {
        return a.meta() == b.meta() && testutil::max_abs_diff(a.values(), b.values()) == 0.0;
    };
    CHECK(same(apply_augment({v}, AugmentChoice{})[0], v));
    for (int a = 0; a < 3; ++a) CHECK(same(flip_axis(flip_axis(v, a), a), v));
    for (int p = 0; p < 3; ++p)
        for (int q = 0; q < 3; ++q)
            if (p != q) {
                CHECK(same(rotate90(v, p, q, 4), v));
                CHECK(same(rotate90(rotate90(v, p, q, 1), p, q, 3), v));
            }
    CHECK_THROWS_AS(flip_axis(v, 3), InputError);
    CHECK_THROWS_AS(rotate90(v, 1, 1, 1), InputError);
}

TEST_CASE("quarter turn matches an index oracle") {
    const auto meta = make_meta({3, 4, 5}, {1.0, 2.0, 3.0}, {0, 0, 1});
    const RealVolume v = testutil::random_volume(meta, 8);
    const RealVolume r = rotate90(v, 0, 1, 1);
    CHECK(r.dims() == Dims{4, 3, 5});
    CHECK(r.meta().voxel_size == Vec3{2.0, 1.0, 3.0});
    CHECK(r.meta().b0_dir == Vec3{0.0, 0.0, 1.0});
    for (std::size_t z = 0; z < 5; ++z)
        for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t x = 0; x < 3; ++x) CHECK(r.at(3 - y, x, z) == v.at(x, y, z));

    // b0 along x turned in the (x, y) plane ends up along y.
    const RealVolume bx(make_meta({3, 3, 3}, {1, 1, 1}, {1, 0, 0}));
    CHECK(rotate90(bx, 0, 1, 1).meta().b0_dir == Vec3{0.0, 1.0, 0.0});
}

TEST_CASE("augmentation applies one transform to the whole group") {
    const auto meta = make_meta({6, 6, 6}, {1, 1, 1}, {0, 1, 0});
    const RealVolume a = testutil::random_volume(meta, 1), b = testutil::random_volume(meta, 2);
    std::mt19937_64 rng(33);
    for (int trial = 0; trial < 20; ++trial) {
        std::mt19937_64 probe = rng;
        const AugmentChoice c = draw_augment(probe);
        bool skipped = true;
        const auto out = augment({a, b, a}, rng, &skipped);
        CHECK(!skipped);
        const auto ref_a = apply_augment({a}, c)[0], ref_b = apply_augment({b}, c)[0];
        CHECK(testutil::max_abs_diff(out[0].values(), ref_a.values()) == 0.0);
        CHECK(testutil::max_abs_diff(out[1].values(), ref_b.values()) == 0.0);
        CHECK(testutil::max_abs_diff(out[2].values(), out[0].values()) == 0.0);
    }
    const RealVolume other(make_meta({6, 6, 5}));
    CHECK_THROWS_AS(apply_augment({a, other}, AugmentChoice{}), InputError);
}

TEST_CASE("oblique b0 skips rotation but still flips") {
    const auto meta = make_meta({4, 4, 4}, {1, 1, 1}, {0, 0.6, 0.8});
    const RealVolume v = testutil::random_volume(meta, 6);
    CHECK(!b0_axis(meta.b0_dir));
    CHECK(b0_axis({0, 0, -1}) == 2);
    AugmentChoice c;
    c.rot_k = 1;
    c.flip = {true, false, false};
    bool skipped = false;
    const auto out = apply_augment({v}, c, &skipped);
    CHECK(skipped);
    CHECK(testutil::max_abs_diff(out[0].values(), flip_axis(v, 0).values()) == 0.0);
}

TEST_CASE("forward field commutes with augmentation") {
    for (const Vec3 b0 : {Vec3{0, 0, 1}, Vec3{1, 0, 0}, Vec3{0.36, 0.48, 0.8}}) {
        const auto meta = make_meta({8, 6, 10}, {1.0, 1.3, 0.9}, b0);
        const RealVolume chi = testutil::random_volume(meta, 21);
        const RealVolume field = forward_field(chi, build_dipole(meta));
        std::mt19937_64 rng(4);
        for (int trial = 0; trial < 8; ++trial) {
            const auto out = augment({chi, field}, rng);
            const RealVolume f2 = forward_field(out[0], build_dipole(out[0].meta()));
            CHECK(out[1].meta() == out[0].meta());
            CHECK(testutil::max_abs_diff(f2.values(), out[1].values()) < 1e-12);
        }
    }
}

// ------------------------------------------------------------------------------------------

TEST_CASE("sliding window origins and coverage") {
    CHECK(window_origins(32, 16, 8) == std::vector<std::size_t>{0, 8, 16});
    CHECK(window_origins(20, 16, 8) == std::vector<std::size_t>{0, 4});
    CHECK(window_origins(16, 16, 8) == std::vector<std::size_t>{0});
    CHECK(window_origins(35, 16, 16) == std::vector<std::size_t>{0, 16, 19});
    CHECK_THROWS_AS(window_origins(8, 16, 8), InputError);
    CHECK_THROWS_AS(window_origins(16, 16, 0), InputError);

    const Dims d{20, 9, 24};
    const std::size_t p = 8, s = 5;
    const auto counts = coverage_counts(d, p, s);
    for (std::size_t z = 0; z < d[2]; ++z)
        for (std::size_t y = 0; y < d[1]; ++y)
            for (std::size_t x = 0; x < d[0]; ++x) {
                int n = 1;
                const std::size_t idx[3] = {x, y, z};
                for (int a = 0; a < 3; ++a) {
                    int na = 0;
                    for (std::size_t o : window_origins(d[a], p, s)) na += (idx[a] >= o && idx[a] < o + p);
                    n *= na;
                }
                CHECK(counts[x + d[0] * (y + d[1] * z)] == n);
            }
    for (int c : coverage_counts({5, 5, 5}, 8, 4)) CHECK(c == 1);
}

TEST_CASE("stitched identity map returns the masked input") {
    for (const Dims d : {Dims{24, 16, 20}, Dims{10, 12, 20}, Dims{16, 16, 16}}) {
        const auto meta = make_meta(d);
        const RealVolume f = testutil::random_volume(meta, 2), m = testutil::random_volume(meta, 3);
        std::vector<std::uint8_t> mv(meta.size());
        for (std::size_t i = 0; i < mv.size(); ++i) mv[i] = (i % 3) != 0;
        const Mask mask(meta, mv);
        PatchFn ident = [](const RealVolume& ph, const RealVolume&) {
            return std::vector<double>(ph.values().begin(), ph.values().end());
        };
        const RealVolume out = infer_stitched(ident, f, m, mask, InferConfig{16, 8, 1});
        CHECK(out.meta() == meta);
        CHECK(testutil::max_abs_diff(out.values(), apply_mask(f, mask).values()) < 1e-15);
    }
}

TEST_CASE("stride equal to the patch processes each tile once") {
    const auto meta = make_meta({32, 16, 16});
    const RealVolume f = testutil::random_volume(meta, 5);
    PatchFn tile_sum = [](const RealVolume& ph, const RealVolume&) {
        double s = 0.0;
        for (double v : ph.values()) s += v;
        return std::vector<double>(ph.size(), s);
    };
    const RealVolume out = infer_stitched(tile_sum, f, f, Mask::ones(meta), InferConfig{16, 16, 1});
    for (std::size_t tile = 0; tile < 2; ++tile) {
        double s = 0.0;
        for (std::size_t z = 0; z < 16; ++z)
            for (std::size_t y = 0; y < 16; ++y)
                for (std::size_t x = 0; x < 16; ++x) s += f.at(16 * tile + x, y, z);
        CHECK(out.at(16 * tile + 3, 7, 9) == doctest::Approx(s).epsilon(1e-12));
    }
    PatchFn bad = [](const RealVolume&, const RealVolume&) { return std::vector<double>(3, 0.0); };
    CHECK_THROWS_AS(infer_stitched(bad, f, f, Mask::ones(meta), InferConfig{16, 16, 1}), InputError);
    CHECK_THROWS_AS(infer_stitched(tile_sum, f, f, Mask::ones(meta), InferConfig{16, 17, 1}), InputError);
}

TEST_CASE("generator inference does not depend on the thread count") {
    const auto meta = make_meta({20, 16, 12});
    const RealVolume f = testutil::random_volume(meta, 6, 0.1), m = testutil::random_volume(meta, 7);
    const nn::Generator g = small_generator(3);
    const RealVolume one = infer_stitched(g, f, m, Mask::ones(meta), InferConfig{8, 4, 1});
    const RealVolume three = infer_stitched(g, f, m, Mask::ones(meta), InferConfig{8, 4, 3});
    CHECK(testutil::max_abs_diff(one.values(), three.values()) == 0.0);
    CHECK_THROWS_AS(infer_stitched(g, f, m, Mask::ones(meta), InferConfig{5, 3, 1}), InputError);
}

// ------------------------------------------------------------------------------------------

TEST_CASE("cycle training is deterministic and writes checkpoints") {
    const auto meta = make_meta({8, 8, 8});
    const UnpairedDataset ds = toy_dataset(meta, 2, false, 40);
    const auto dir = testutil::scratch_dir("train_ckpt");
    TrainConfig cfg;
    cfg.patch_size = 8;
    cfg.epochs = 2;
    cfg.patches_per_epoch = 3;
    cfg.adam.lr = 1e-3;
    cfg.seed = 11;
    cfg.checkpoint_dir = dir;
    cfg.log_csv = dir / "log.csv";

    nn::Generator g1 = small_generator(1);
    nn::Discriminator d1 = small_discriminator(2);
    const TrainLog l1 = train_cycleqsm(ds, g1, d1, cfg);
    const std::string csv1 = slurp(cfg.log_csv);

    nn::Generator g2 = small_generator(1);
    nn::Discriminator d2 = small_discriminator(2);
    cfg.checkpoint_dir.clear();
    const TrainLog l2 = train_cycleqsm(ds, g2, d2, cfg);

    REQUIRE(l1.rows.size() == 6);
    CHECK(l1.rows.back().epoch == 1);
    CHECK(l1.rows.back().step == 5);
    CHECK(l1.epoch_mean_cycle().size() == 2);
    CHECK(l1.notices.empty());
    CHECK(csv1 == format_train_log_csv(l2));
    CHECK(csv1.rfind("epoch,step,cycle,gan_g,gan_d,grad,tv,total\n", 0) == 0);
    CHECK(g1.snapshot() == g2.snapshot());
    for (const char* f : {"generator_epoch0.dbc", "generator_epoch1.dbc", "generator_latest.dbc",
                          "discriminator_epoch1.dbc", "discriminator_latest.dbc"})
        CHECK(std::filesystem::exists(dir / f));
    CHECK(slurp(dir / "generator_epoch1.dbc") == slurp(dir / "generator_latest.dbc"));
    const nn::Generator back = nn::load_generator(dir / "generator_latest.dbc");
    const auto a = back.snapshot(), b = g1.snapshot();
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].size(); ++j) CHECK(a[i][j] == double(float(b[i][j])));
    std::filesystem::remove_all(dir);
}

TEST_CASE("oblique b0 training logs a rotation notice once") {
    const auto meta = make_meta({8, 8, 8}, {1, 1, 1}, {0, 0.6, 0.8});
    const UnpairedDataset ds = toy_dataset(meta, 1, false, 3);
    TrainConfig cfg;
    cfg.patch_size = 8;
    cfg.epochs = 1;
    cfg.patches_per_epoch = 6;
    cfg.seed = 2;
    nn::Generator g = small_generator(1);
    nn::Discriminator d = small_discriminator(2);
    const TrainLog log = train_cycleqsm(ds, g, d, cfg);
    CHECK(log.notices.size() == 1);
}

TEST_CASE("divergence restores the last good parameters") {
    const auto meta = make_meta({8, 8, 8});
    const UnpairedDataset ds = toy_dataset(meta, 1, false, 8);
    const auto dir = testutil::scratch_dir("train_nan");
    TrainConfig cfg;
    cfg.patch_size = 8;
    cfg.epochs = 1;
    cfg.patches_per_epoch = 4;
    cfg.adam.lr = 1e300;
    cfg.augment = false;
    cfg.checkpoint_dir = dir;
    nn::Generator g = small_generator(1);
    nn::Discriminator d = small_discriminator(2);
    const auto init = g.snapshot();
    CHECK_THROWS_AS(train_cycleqsm(ds, g, d, cfg), NumericalError);
    CHECK(g.snapshot() == init);
    REQUIRE(std::filesystem::exists(dir / "generator_last_good.dbc"));
    const auto saved = nn::load_generator(dir / "generator_last_good.dbc").snapshot();
    for (std::size_t i = 0; i < init.size(); ++i)
        for (std::size_t j = 0; j < init[i].size(); ++j) CHECK(saved[i][j] == double(float(init[i][j])));
    std::filesystem::remove_all(dir);
}

TEST_CASE("cycle loss drops on a paired band-limited toy set") {
    // With one patch per volume and no adversarial term the cycle objective is a plain
    // regression problem, so the loss has to fall well below its starting level.
    const auto meta = make_meta({8, 8, 8});
    const UnpairedDataset ds = toy_dataset(meta, 2, true, 50);
    TrainConfig cfg;
    cfg.patch_size = 8;
    cfg.epochs = 1;
    cfg.patches_per_epoch = 200;
    cfg.adam.lr = 1e-3;
    cfg.weights = {10.0, 0.0, 0.0, 0.0};
    cfg.augment = false;
    cfg.seed = 3;
    nn::GeneratorConfig gc;
    gc.depth = 2;
    gc.base_channels = 8;
    gc.seed = 1;
    nn::Generator g(gc);
    nn::Discriminator d = small_discriminator(2);
    const TrainLog log = train_cycleqsm(ds, g, d, cfg);
    std::vector<double> c;
    for (const auto& r : log.rows) c.push_back(r.report.cycle);
    const std::size_t m = c.size() / 10;
    const double first = median({c.begin(), c.begin() + m}), last = median({c.end() - m, c.end()});
    INFO("first ", first, " last ", last);
    CHECK(last < 0.5 * first);
}

// ------------------------------------------------------------------------------------------

TEST_CASE("phasor weight normalization") {
    const auto meta = make_meta({2, 2, 1});
    const RealVolume mag(meta, {1.0, 3.0, 5.0, 7.0});
    const Mask mask(meta, {1, 1, 0, 1});
    const RealVolume w = phasor_weight(mag, mask);
    const double mean = 11.0 / 3.0;
    CHECK(w[0] == doctest::Approx(1.0 / mean));
    CHECK(w[1] == doctest::Approx(3.0 / mean));
    CHECK(w[2] == 0.0);
    CHECK(w[3] == doctest::Approx(7.0 / mean));
    const RealVolume zero = phasor_weight(RealVolume(meta), mask);
    CHECK(zero[0] == 1.0);
}

TEST_CASE("dip fits the field and is deterministic") {
    const auto meta = make_meta({12, 12, 12});
    PhantomSpec spec;
    spec.meta = meta;
    spec.shapes = {{Sphere{{6, 6, 6}, 3.5}, 0.1}, {Sphere{{3, 3, 4}, 2.0}, -0.05}};
    const RealVolume chi = make_phantom(spec);
    const SimulatedCase sc = simulate_case(chi, Mask::ones(meta), 0.0, 1);
    const DipoleKernel k = build_dipole(meta);
    DipConfig cfg;
    cfg.iters = 40;
    cfg.lr = 1e-2;
    cfg.depth = 2;
    cfg.seed = 4;
    const DipResult a = optimize_dip(sc.field, sc.magnitude, sc.mask, k, cfg);
    const DipResult b = optimize_dip(sc.field, sc.magnitude, sc.mask, k, cfg);
    REQUIRE(a.trace.size() == 40);
    CHECK(a.trace[a.best_iteration].total < 0.5 * a.trace.front().total);
    for (const auto& r : a.trace) CHECK(r.total == doctest::Approx(r.data + cfg.lambda * r.tv).epsilon(1e-12));
    CHECK(testutil::max_abs_diff(a.chi.values(), b.chi.values()) == 0.0);
    CHECK(a.chi.dims() == meta.dims);

    cfg.iters = 0;
    CHECK_THROWS_AS(optimize_dip(sc.field, sc.magnitude, sc.mask, k, cfg), InputError);
}

TEST_CASE("dip output is zero outside the mask and padded grids are cropped") {
    const auto meta = make_meta({10, 9, 12});
    const RealVolume chi = testutil::random_volume(meta, 3, 0.02);
    std::vector<std::uint8_t> mv(meta.size(), 0);
    for (std::size_t i = 0; i < mv.size(); ++i) mv[i] = (i % 4) != 0;
    const Mask mask(meta, mv);
    const SimulatedCase sc = simulate_case(chi, mask, 0.0, 2);
    DipConfig cfg;
    cfg.iters = 3;
    cfg.depth = 2;
    const DipResult r = optimize_dip(sc.field, sc.magnitude, mask, build_dipole(meta), cfg);
    CHECK(r.chi.meta() == meta);
    for (std::size_t i = 0; i < mv.size(); ++i)
        if (!mask[i]) CHECK(r.chi[i] == 0.0);
}

TEST_CASE("large total-variation weight flattens the dip output") {
    const auto meta = make_meta({8, 8, 8});
    const RealVolume chi = band_limit(make_random_piecewise(meta, 3, {-0.2, 0.2}, 9), build_dipole(meta), 0.15);
    const SimulatedCase sc = simulate_case(chi, Mask::ones(meta), 0.0, 2);
    const DipoleKernel k = build_dipole(meta);
    DipConfig cfg;
    cfg.iters = 60;
    cfg.lr = 1e-2;
    cfg.depth = 2;
    auto tv_of = [](const RealVolume& v) {
        double s = 0.0;
        for (const auto& g : grad3(v))
            for (double x : g.values()) s += std::abs(x);
        return s;
    };
    cfg.lambda = 0.0;
    const double free_tv = tv_of(optimize_dip(sc.field, sc.magnitude, sc.mask, k, cfg).chi);
    cfg.lambda = 10.0;
    const double flat_tv = tv_of(optimize_dip(sc.field, sc.magnitude, sc.mask, k, cfg).chi);
    INFO("free ", free_tv, " flat ", flat_tv);
    CHECK(flat_tv < 0.1 * free_tv);
}

// ------------------------------------------------------------------------------------------

TEST_CASE("uqsm training on zero fields with a zero head has zero loss") {
    const auto meta = make_meta({8, 8, 8});
    UnpairedDataset ds;
    ds.field_cases.push_back(simulate_case(RealVolume(meta), Mask::ones(meta), 0.0, 1));
    TrainConfig cfg;
    cfg.patch_size = 8;
    cfg.epochs = 1;
    cfg.patches_per_epoch = 2;
    nn::Generator g = small_generator(1, true);
    const auto rows = train_uqsm(ds, g, cfg);
    REQUIRE(rows.size() == 2);
    CHECK(std::abs(rows[0].total) < 1e-15);
    CHECK(std::abs(rows[0].data) < 1e-15);
    CHECK(rows[0].tv == 0.0);
}

TEST_CASE("uqsm training is deterministic and writes its log and checkpoints") {
    const auto meta = make_meta({10, 10, 10});
    const UnpairedDataset ds = toy_dataset(meta, 2, false, 70);
    const auto dir = testutil::scratch_dir("uqsm");
    TrainConfig cfg;
    cfg.patch_size = 8;
    cfg.epochs = 2;
    cfg.patches_per_epoch = 4;
    cfg.batch_size = 2;
    cfg.adam.lr = 1e-3;
    cfg.seed = 5;
    cfg.checkpoint_dir = dir;
    cfg.log_csv = dir / "uqsm.csv";
    nn::Generator g1 = small_generator(3), g2 = small_generator(3);
    const auto r1 = train_uqsm(ds, g1, cfg);
    cfg.checkpoint_dir.clear();
    cfg.log_csv.clear();
    const auto r2 = train_uqsm(ds, g2, cfg);
    REQUIRE(r1.size() == 4);
    CHECK(format_uqsm_log_csv(r1) == format_uqsm_log_csv(r2));
    for (const auto& r : r1) {
        CHECK(std::isfinite(r.total));
        CHECK(r.total >= 0.0);
    }
    CHECK(slurp(dir / "uqsm.csv") == format_uqsm_log_csv(r1));
    CHECK(std::filesystem::exists(dir / "uqsm_epoch0.dbc"));
    CHECK(std::filesystem::exists(dir / "uqsm_latest.dbc"));
    std::filesystem::remove_all(dir);
}
