#include "cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "qsm/classical.hpp"
#include "qsm/dipole.hpp"
#include "qsm/errors.hpp"
#include "qsm/gradcheck_suite.hpp"
#include "qsm/metrics.hpp"
#include "qsm/nn/checkpoint.hpp"
#include "qsm/phantom.hpp"
#include "qsm/training.hpp"
#include "qsm/volume.hpp"

namespace qsm::cli {

namespace {

std::string fmt(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

void write_text(const std::string& text, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError(IoErrorKind::CannotOpen, "cannot open " + path + " for writing");
    f << text;
}

void note(const std::string& msg) { std::cerr << "qsmtool: " << msg << '\n'; }

Vec3 vec3(const std::vector<double>& v, const char* flag) {
    if (v.size() != 3) throw InputError(std::string(flag) + " needs three values");
    return {v[0], v[1], v[2]};
}

Mask mask_or_ones(const std::string& path, const VolumeMeta& meta) {
    if (path.empty()) return Mask::ones(meta);
    Mask m = read_mask(path);
    require_same_grid(meta, m.meta(), "--mask");
    return m;
}

RealVolume magnitude_or_mask(const std::string& path, const Mask& mask) {
    if (path.empty()) return mask.to_volume();
    RealVolume m = read_volume(path);
    require_same_grid(mask.meta(), m.meta(), "--magnitude");
    return m;
}

// key = value lines; '#' starts a comment. Values are whitespace-separated tokens.
std::vector<std::pair<std::string, std::vector<std::string>>> read_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError(IoErrorKind::CannotOpen, "--config: cannot open " + path);
    std::vector<std::pair<std::string, std::vector<std::string>>> out;
    std::string line;
    int n = 0;
    while (std::getline(f, line)) {
        ++n;
        if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw InputError(path + ":" + std::to_string(n) + ": expected key = value");
        std::istringstream ks(line.substr(0, eq)), vs(line.substr(eq + 1));
        std::string key, tok;
        ks >> key;
        std::vector<std::string> vals;
        while (vs >> tok) vals.push_back(tok);
        if (key.empty()) throw InputError(path + ":" + std::to_string(n) + ": empty key");
        out.emplace_back(key, vals);
    }
    return out;
}

// Shared model and training flags.
struct ModelFlags {
    int depth = 3;
    int base_channels = 16;
    double init_std = 0.02;
    int disc_layers = 3;
    int disc_channels = 16;
};

struct DatasetFlags {
    std::vector<std::string> fields, field_masks, magnitudes, chis, chi_masks;
    int synthetic_fields = 0;
    int synthetic_chis = 0;
    std::size_t synthetic_dims = 32;
    int synthetic_blobs = 8;
    double noise_rel = 0.0;
};

struct TrainFlags {
    TrainConfig cfg;
    std::string norm = "l1";
    std::string reduction = "sum";
    double d_lr = 0.0;
    std::string out_dir;
    std::string log;
};

void add_model_flags(CLI::App* sc, ModelFlags& m, bool with_disc) {
    sc->add_option("--depth", m.depth, "U-Net resolution levels");
    sc->add_option("--base-channels", m.base_channels, "U-Net channels at the finest level");
    sc->add_option("--init-std", m.init_std, "std of the truncated-normal weight init");
    if (with_disc) {
        sc->add_option("--disc-layers", m.disc_layers, "patchGAN conv layers before the head");
        sc->add_option("--disc-channels", m.disc_channels, "patchGAN channels in the first layer");
    }
}

void add_dataset_flags(CLI::App* sc, DatasetFlags& d, bool with_chi) {
    sc->add_option("--field", d.fields, "local-field volume (repeatable)");
    sc->add_option("--field-mask", d.field_masks, "mask per --field (repeatable, parallel)");
    sc->add_option("--magnitude", d.magnitudes, "magnitude per --field (repeatable, parallel; default: mask)");
    if (with_chi) {
        sc->add_option("--chi", d.chis, "unpaired susceptibility label volume (repeatable)");
        sc->add_option("--chi-mask", d.chi_masks, "mask per --chi (repeatable, parallel)");
        sc->add_option("--synthetic-chis", d.synthetic_chis, "generate this many random piecewise chi labels");
    }
    sc->add_option("--synthetic-fields", d.synthetic_fields, "simulate this many random piecewise field cases");
    sc->add_option("--synthetic-dims", d.synthetic_dims, "grid extent of synthetic volumes");
    sc->add_option("--synthetic-blobs", d.synthetic_blobs, "ellipsoids per synthetic volume");
    sc->add_option("--noise-rel", d.noise_rel, "synthetic field noise sigma as a fraction of the field peak");
}

void add_train_flags(CLI::App* sc, TrainFlags& t, bool with_gan) {
    auto& c = t.cfg;
    sc->add_option("--epochs", c.epochs, "training epochs");
    sc->add_option("--patches-per-epoch", c.patches_per_epoch, "patches drawn per epoch");
    sc->add_option("--patch", c.patch_size, "cubic patch extent");
    sc->add_option("--batch", c.batch_size, "patches per side per step");
    sc->add_option("--lr", c.adam.lr, "Adam learning rate");
    sc->add_option("--beta1", c.adam.beta1, "Adam beta1");
    sc->add_option("--beta2", c.adam.beta2, "Adam beta2");
    sc->add_flag("!--no-augment", c.augment, "disable flips and rotations about b0");
    if (with_gan) {
        sc->add_option("--d-lr", t.d_lr, "discriminator learning rate (0: same as --lr)");
        sc->add_option("--gamma", c.weights.gamma, "cycle-consistency weight");
        sc->add_option("--eta", c.weights.eta, "gradient-difference weight");
        sc->add_option("--rho", c.weights.rho, "total-variation weight");
        sc->add_option("--adv", c.weights.adversarial, "adversarial (LSGAN generator) weight");
        sc->add_option("--d-steps", c.d_steps_per_g_step, "discriminator steps per generator step");
        sc->add_option("--norm", t.norm, "norm of cycle, gradient and TV terms")->check(CLI::IsMember({"l1", "l2"}));
        sc->add_option("--reduction", t.reduction, "sum or voxel-mean of each norm")
            ->check(CLI::IsMember({"sum", "mean"}));
        sc->add_flag("--mask-losses", c.loss.mask_losses, "mask both sides of cycle, gradient and TV terms");
    }
    sc->add_option("--out-dir", t.out_dir, "directory for checkpoints")->required();
    sc->add_option("--log", t.log, "CSV training log (default: <out-dir>/train_log.csv)");
}

UnpairedDataset build_dataset(const DatasetFlags& d, bool need_chi, std::uint64_t seed) {
    UnpairedDataset ds;
    if (!d.field_masks.empty() && d.field_masks.size() != d.fields.size())
        throw InputError("--field-mask must be given once per --field");
    if (!d.magnitudes.empty() && d.magnitudes.size() != d.fields.size())
        throw InputError("--magnitude must be given once per --field");
    for (std::size_t i = 0; i < d.fields.size(); ++i) {
        RealVolume f = read_volume(d.fields[i]);
        Mask m = d.field_masks.empty() ? Mask::ones(f.meta()) : read_mask(d.field_masks[i]);
        require_same_grid(f.meta(), m.meta(), "--field-mask");
        RealVolume mag = d.magnitudes.empty() ? m.to_volume() : read_volume(d.magnitudes[i]);
        require_same_grid(f.meta(), mag.meta(), "--magnitude");
        ds.field_cases.push_back({RealVolume(f.meta()), std::move(f), std::move(mag), std::move(m), 0.0});
    }
    if (!d.chi_masks.empty() && d.chi_masks.size() != d.chis.size())
        throw InputError("--chi-mask must be given once per --chi");
    for (std::size_t i = 0; i < d.chis.size(); ++i) {
        ds.chi_volumes.push_back(read_volume(d.chis[i]));
        ds.chi_masks.push_back(d.chi_masks.empty() ? std::optional<Mask>() : std::optional<Mask>(read_mask(d.chi_masks[i])));
    }
    const std::size_t n = d.synthetic_dims;
    const VolumeMeta meta = make_meta({n, n, n});
    // Field cases and chi labels use disjoint seed ranges so the two sides never pair.
    for (int i = 0; i < d.synthetic_fields; ++i) {
        const RealVolume chi = make_random_piecewise(meta, d.synthetic_blobs, {-0.2, 0.2}, seed * 1000 + i);
        const Mask mask = Mask::ones(meta);
        const double sigma = d.noise_rel * max_abs(forward_field(chi, build_dipole(meta)));
        ds.field_cases.push_back(simulate_case(chi, mask, sigma, seed * 1000 + 500 + i));
    }
    if (need_chi)
        for (int i = 0; i < d.synthetic_chis; ++i) {
            ds.chi_volumes.push_back(make_random_piecewise(meta, d.synthetic_blobs, {-0.2, 0.2}, seed * 1000 + 100000 + i));
            ds.chi_masks.emplace_back();
        }
    if (ds.field_cases.empty()) throw InputError("no field cases: give --field or --synthetic-fields");
    if (need_chi && ds.chi_volumes.empty()) throw InputError("no chi labels: give --chi or --synthetic-chis");
    return ds;
}

void finish_train_flags(TrainFlags& t, std::uint64_t seed) {
    t.cfg.seed = seed;
    t.cfg.loss.norm = t.norm == "l2" ? NormKind::L2 : NormKind::L1;
    t.cfg.loss.reduction = t.reduction == "mean" ? Reduction::Mean : Reduction::Sum;
    if (t.d_lr > 0.0) t.cfg.d_lr = t.d_lr;
    t.cfg.checkpoint_dir = t.out_dir;
    t.cfg.log_csv = t.log.empty() ? (std::filesystem::path(t.out_dir) / "train_log.csv") : std::filesystem::path(t.log);
    std::filesystem::create_directories(t.out_dir);
}

nn::GeneratorConfig generator_config(const ModelFlags& m, std::uint64_t seed) {
    nn::GeneratorConfig g;
    g.depth = m.depth;
    g.base_channels = m.base_channels;
    g.init_std = m.init_std;
    g.seed = seed;
    return g;
}

} // namespace

int run(int argc, char** argv) {
    CLI::App app{"Dipole inversion toolkit for quantitative susceptibility mapping"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    std::uint64_t seed = 0;
    int threads = 1;
    std::string config_path;
    std::function<void()> action;

    auto common = [&](CLI::App* sc) {
        sc->add_option("--seed", seed, "random seed");
        sc->add_option("--config", config_path, "key = value file; flags override it");
    };

    // phantom ---------------------------------------------------------------------------
    struct {
        std::string spec, out, mask_out, labels_out;
        std::vector<std::size_t> dims{32, 32, 32};
        std::vector<double> voxel{1, 1, 1}, b0{0, 0, 1};
        int blobs = 8;
        double chi_min = -0.2, chi_max = 0.2;
    } ph;
    {
        auto* sc = app.add_subcommand("phantom", "build a susceptibility phantom");
        common(sc);
        sc->add_option("--spec", ph.spec, "phantom description file (random blobs when absent)");
        sc->add_option("--dims", ph.dims, "grid extent for random phantoms")->expected(3);
        sc->add_option("--voxel", ph.voxel, "voxel size in mm")->expected(3);
        sc->add_option("--b0", ph.b0, "main field direction")->expected(3);
        sc->add_option("--blobs", ph.blobs, "number of random ellipsoids");
        sc->add_option("--chi-min", ph.chi_min, "lower chi bound of random blobs (ppm)");
        sc->add_option("--chi-max", ph.chi_max, "upper chi bound of random blobs (ppm)");
        sc->add_option("--out", ph.out, "output chi volume")->required();
        sc->add_option("--mask-out", ph.mask_out, "output mask volume");
        sc->add_option("--labels-out", ph.labels_out, "output label volume (shape index + 1, spec phantoms only)");
        sc->callback([&] {
            action = [&] {
                if (!ph.spec.empty()) {
                    const PhantomSpec spec = read_phantom_spec(ph.spec);
                    write_volume(make_phantom(spec), ph.out);
                    if (!ph.mask_out.empty()) write_mask(make_phantom_mask(spec), ph.mask_out);
                    if (!ph.labels_out.empty()) {
                        std::vector<double> lab(spec.meta.size(), 0.0);
                        const RoiSet rois = phantom_rois(spec);
                        for (const auto& r : rois) {
                            const double id = std::stod(r.name.substr(5)) + 1.0;
                            for (std::size_t i = 0; i < lab.size(); ++i)
                                if (r.mask[i]) lab[i] = id;
                        }
                        write_volume(RealVolume(spec.meta, std::move(lab)), ph.labels_out);
                    }
                } else {
                    if (!ph.labels_out.empty()) throw InputError("--labels-out needs --spec");
                    const VolumeMeta meta = make_meta({ph.dims[0], ph.dims[1], ph.dims[2]}, vec3(ph.voxel, "--voxel"),
                                                      vec3(ph.b0, "--b0"));
                    write_volume(make_random_piecewise(meta, ph.blobs, {ph.chi_min, ph.chi_max}, seed), ph.out);
                    if (!ph.mask_out.empty()) write_mask(Mask::ones(meta), ph.mask_out);
                }
                note("wrote " + ph.out);
            };
        });
    }

    // forward ---------------------------------------------------------------------------
    struct {
        std::string chi, out, mask, magnitude_out;
        double noise = 0.0, noise_rel = 0.0;
    } fw;
    {
        auto* sc = app.add_subcommand("forward", "simulate the local field b = H chi (+ noise)");
        common(sc);
        sc->add_option("--chi", fw.chi, "input chi volume")->required();
        sc->add_option("--out", fw.out, "output field volume")->required();
        sc->add_option("--mask", fw.mask, "mask (magnitude source)");
        sc->add_option("--noise", fw.noise, "absolute Gaussian noise sigma");
        sc->add_option("--noise-rel", fw.noise_rel, "noise sigma as a fraction of the noiseless field peak");
        sc->add_option("--magnitude-out", fw.magnitude_out, "write the simulated magnitude");
        sc->callback([&] {
            action = [&] {
                const RealVolume chi = read_volume(fw.chi);
                const Mask mask = mask_or_ones(fw.mask, chi.meta());
                if (fw.noise < 0.0 || fw.noise_rel < 0.0) throw InputError("--noise must be >= 0");
                double sigma = fw.noise;
                if (fw.noise_rel > 0.0) sigma = fw.noise_rel * max_abs(forward_field(chi, build_dipole(chi.meta())));
                const SimulatedCase c = simulate_case(chi, mask, sigma, seed);
                write_volume(c.field, fw.out);
                if (!fw.magnitude_out.empty()) write_volume(c.magnitude, fw.magnitude_out);
                note("wrote " + fw.out + " (noise sigma " + fmt(sigma) + ")");
            };
        });
    }

    // naive / tkd -----------------------------------------------------------------------
    struct {
        std::string field, out, mask;
        double eps = kNaiveInverseEps;
        double a = TkdParams{}.a;
    } inv;
    {
        auto* sc = app.add_subcommand("naive", "direct k-space division with |d| <= eps zeroed");
        common(sc);
        sc->add_option("--field", inv.field, "input field")->required();
        sc->add_option("--eps", inv.eps, "kernel magnitude below which components are dropped");
        sc->add_option("--mask", inv.mask, "mask applied to the output");
        sc->add_option("--out", inv.out, "output chi")->required();
        sc->callback([&] {
            action = [&] {
                const RealVolume b = read_volume(inv.field);
                const RealVolume chi = naive_inverse(b, build_dipole(b.meta()), inv.eps);
                write_volume(inv.mask.empty() ? chi : apply_mask(chi, mask_or_ones(inv.mask, b.meta())), inv.out);
                note("wrote " + inv.out);
            };
        });
    }
    {
        auto* sc = app.add_subcommand("tkd", "thresholded k-space division");
        common(sc);
        sc->add_option("--field", inv.field, "input field")->required();
        sc->add_option("--a", inv.a, "kernel threshold");
        sc->add_option("--mask", inv.mask, "mask applied to the output");
        sc->add_option("--out", inv.out, "output chi")->required();
        sc->callback([&] {
            action = [&] {
                const RealVolume b = read_volume(inv.field);
                const RealVolume chi = tkd_invert(b, build_dipole(b.meta()), TkdParams{inv.a});
                write_volume(inv.mask.empty() ? chi : apply_mask(chi, mask_or_ones(inv.mask, b.meta())), inv.out);
                note("wrote " + inv.out);
            };
        });
    }

    // medi ------------------------------------------------------------------------------
    struct {
        std::string field, magnitude, mask, out, trace;
        MediParams p;
    } md;
    {
        auto* sc = app.add_subcommand("medi", "edge-weighted TV inversion");
        common(sc);
        sc->add_option("--field", md.field, "input field")->required();
        sc->add_option("--magnitude", md.magnitude, "magnitude image (default: mask)");
        sc->add_option("--mask", md.mask, "mask");
        sc->add_option("--lambda", md.p.lambda, "TV weight");
        sc->add_option("--edge-fraction", md.p.edge_fraction, "fraction of magnitude gradients treated as edges");
        sc->add_option("--iters", md.p.iters, "iterations");
        sc->add_option("--step", md.p.step, "initial line-search step");
        sc->add_option("--smoothing", md.p.smoothing, "TV smoothing eps");
        sc->add_flag("!--no-backtracking", md.p.backtracking, "fixed step instead of Armijo backtracking");
        sc->add_option("--trace", md.trace, "CSV objective trace");
        sc->add_option("--out", md.out, "output chi")->required();
        sc->callback([&] {
            action = [&] {
                const RealVolume b = read_volume(md.field);
                const Mask mask = mask_or_ones(md.mask, b.meta());
                const RealVolume mag = magnitude_or_mask(md.magnitude, mask);
                const MediWeights w = build_medi_weights(mag, md.p.edge_fraction, mask);
                const MediResult r = medi_invert(b, build_dipole(b.meta()), w, md.p);
                write_volume(apply_mask(r.chi, mask), md.out);
                if (!md.trace.empty()) {
                    std::ostringstream os;
                    os << "iteration,objective,data,reg\n";
                    for (const auto& t : r.trace)
                        os << t.iteration << ',' << fmt(t.objective) << ',' << fmt(t.data_term) << ',' << fmt(t.reg_term) << '\n';
                    write_text(os.str(), md.trace);
                }
                note("wrote " + md.out);
            };
        });
    }

    // cgls ------------------------------------------------------------------------------
    struct {
        std::string field, weight, mask, out, residuals;
        int iters = 100;
        double tol = 1e-10;
    } cg;
    {
        auto* sc = app.add_subcommand("cgls", "weighted least squares by conjugate gradients");
        common(sc);
        sc->add_option("--field", cg.field, "input field")->required();
        sc->add_option("--weight", cg.weight, "data weight volume (default: mask indicator)");
        sc->add_option("--mask", cg.mask, "mask");
        sc->add_option("--iters", cg.iters, "maximum iterations");
        sc->add_option("--tol", cg.tol, "relative normal-equation residual tolerance");
        sc->add_option("--residuals", cg.residuals, "CSV of residual norms");
        sc->add_option("--out", cg.out, "output chi")->required();
        sc->callback([&] {
            action = [&] {
                const RealVolume b = read_volume(cg.field);
                const Mask mask = mask_or_ones(cg.mask, b.meta());
                RealVolume W = cg.weight.empty() ? mask.to_volume() : read_volume(cg.weight);
                require_same_grid(b.meta(), W.meta(), "--weight");
                const CgResult r = cg_least_squares(b, build_dipole(b.meta()), W, cg.iters, cg.tol);
                write_volume(r.chi, cg.out);
                if (!cg.residuals.empty()) {
                    std::ostringstream os;
                    os << "iteration,residual\n";
                    for (std::size_t i = 0; i < r.residual_norms.size(); ++i) os << i << ',' << fmt(r.residual_norms[i]) << '\n';
                    write_text(os.str(), cg.residuals);
                }
                note("wrote " + cg.out + " after " + std::to_string(r.iterations) + " iterations");
            };
        });
    }

    // train -----------------------------------------------------------------------------
    ModelFlags tm;
    DatasetFlags td;
    TrainFlags tt;
    {
        auto* sc = app.add_subcommand("train", "unpaired cycle training of the generator and discriminator");
        common(sc);
        add_dataset_flags(sc, td, true);
        add_model_flags(sc, tm, true);
        add_train_flags(sc, tt, true);
        sc->callback([&] {
            action = [&] {
                finish_train_flags(tt, seed);
                const UnpairedDataset ds = build_dataset(td, true, seed);
                nn::Generator g(generator_config(tm, seed));
                nn::DiscriminatorConfig dc;
                dc.n_layers = tm.disc_layers;
                dc.base_channels = tm.disc_channels;
                dc.init_std = tm.init_std;
                dc.seed = seed + 1;
                nn::Discriminator d(dc);
                const TrainLog log = train_cycleqsm(ds, g, d, tt.cfg);
                for (const auto& n : log.notices) note(n);
                nn::write_checkpoint(g, std::filesystem::path(tt.out_dir) / "generator.dbc");
                nn::write_checkpoint(d, std::filesystem::path(tt.out_dir) / "discriminator.dbc");
                const auto means = log.epoch_mean_cycle();
                note("trained " + std::to_string(log.rows.size()) + " steps; cycle loss " + fmt(means.front()) +
                     " -> " + fmt(means.back()));
            };
        });
    }

    // infer -----------------------------------------------------------------------------
    struct {
        std::string checkpoint, field, magnitude, mask, out;
        std::size_t patch = 16, stride = 0;
    } in;
    {
        auto* sc = app.add_subcommand("infer", "stitched sliding-window reconstruction with a trained generator");
        common(sc);
        sc->add_option("--checkpoint", in.checkpoint, "generator checkpoint")->required();
        sc->add_option("--field", in.field, "input field")->required();
        sc->add_option("--magnitude", in.magnitude, "magnitude (default: mask)");
        sc->add_option("--mask", in.mask, "mask");
        sc->add_option("--patch", in.patch, "window extent");
        sc->add_option("--stride", in.stride, "window stride (0: patch / 2)");
        sc->add_option("--threads", threads, "worker threads");
        sc->add_option("--out", in.out, "output chi")->required();
        sc->callback([&] {
            action = [&] {
                const nn::Generator g = nn::load_generator(in.checkpoint);
                const RealVolume b = read_volume(in.field);
                const Mask mask = mask_or_ones(in.mask, b.meta());
                const RealVolume mag = magnitude_or_mask(in.magnitude, mask);
                InferConfig ic{in.patch, in.stride == 0 ? std::max<std::size_t>(1, in.patch / 2) : in.stride, threads};
                write_volume(infer_stitched(g, b, mag, mask, ic), in.out);
                note("wrote " + in.out);
            };
        });
    }

    // dip -------------------------------------------------------------------------------
    struct {
        std::string field, magnitude, mask, out, trace;
        DipConfig c;
    } dp;
    {
        auto* sc = app.add_subcommand("dip", "per-volume optimization of an untrained generator");
        common(sc);
        sc->add_option("--field", dp.field, "input field")->required();
        sc->add_option("--magnitude", dp.magnitude, "magnitude (default: mask)");
        sc->add_option("--mask", dp.mask, "mask");
        sc->add_option("--lambda", dp.c.lambda, "TV weight");
        sc->add_option("--iters", dp.c.iters, "iterations");
        sc->add_option("--lr", dp.c.lr, "Adam learning rate");
        sc->add_option("--depth", dp.c.depth, "U-Net resolution levels");
        sc->add_option("--base-channels", dp.c.base_channels, "U-Net channels at the finest level");
        sc->add_option("--trace", dp.trace, "CSV objective trace");
        sc->add_option("--out", dp.out, "output chi")->required();
        sc->callback([&] {
            action = [&] {
                dp.c.seed = seed;
                const RealVolume b = read_volume(dp.field);
                const Mask mask = mask_or_ones(dp.mask, b.meta());
                const RealVolume mag = magnitude_or_mask(dp.magnitude, mask);
                const DipResult r = optimize_dip(b, mag, mask, build_dipole(b.meta()), dp.c);
                write_volume(r.chi, dp.out);
                if (!dp.trace.empty()) {
                    std::ostringstream os;
                    os << "iteration,total,data,tv\n";
                    for (const auto& t : r.trace) os << t.iteration << ',' << fmt(t.total) << ',' << fmt(t.data) << ',' << fmt(t.tv) << '\n';
                    write_text(os.str(), dp.trace);
                }
                note("wrote " + dp.out + " (best iteration " + std::to_string(r.best_iteration) + ")");
            };
        });
    }

    // uqsm ------------------------------------------------------------------------------
    ModelFlags um;
    DatasetFlags ud;
    TrainFlags ut;
    double u_lambda = kDipLambda;
    {
        auto* sc = app.add_subcommand("uqsm", "unsupervised training on field patches with the phasor loss");
        common(sc);
        add_dataset_flags(sc, ud, false);
        add_model_flags(sc, um, false);
        add_train_flags(sc, ut, false);
        sc->add_option("--lambda", u_lambda, "TV weight");
        sc->callback([&] {
            action = [&] {
                finish_train_flags(ut, seed);
                const UnpairedDataset ds = build_dataset(ud, false, seed);
                nn::Generator g(generator_config(um, seed));
                const auto rows = train_uqsm(ds, g, ut.cfg, u_lambda);
                nn::write_checkpoint(g, std::filesystem::path(ut.out_dir) / "generator.dbc");
                note("trained " + std::to_string(rows.size()) + " steps; loss " + fmt(rows.front().total) + " -> " +
                     fmt(rows.back().total));
            };
        });
    }

    // eval ------------------------------------------------------------------------------
    struct {
        std::string truth, recon, mask, rois, roi_mode = "pooled", region = "full", out;
        double peak = 0.0;
        std::size_t window = 7;
    } ev;
    {
        auto* sc = app.add_subcommand("eval", "RMSE, PSNR, SSIM and ROI regression as CSV");
        common(sc);
        sc->add_option("--truth", ev.truth, "reference chi")->required();
        sc->add_option("--recon", ev.recon, "reconstructed chi")->required();
        sc->add_option("--mask", ev.mask, "mask for RMSE (default: whole grid)");
        sc->add_option("--rois", ev.rois, "integer label volume; adds regression columns");
        sc->add_option("--roi-mode", ev.roi_mode, "regression points")->check(CLI::IsMember({"pooled", "means"}));
        sc->add_option("--region", ev.region, "PSNR/SSIM region")->check(CLI::IsMember({"full", "mask"}));
        sc->add_option("--peak", ev.peak, "PSNR peak (0: max |truth|)");
        sc->add_option("--window", ev.window, "SSIM window extent");
        sc->add_option("--out", ev.out, "CSV output (default: stdout)");
        sc->callback([&] {
            action = [&] {
                const RealVolume truth = read_volume(ev.truth), recon = read_volume(ev.recon);
                require_same_grid(truth.meta(), recon.meta(), "--recon");
                const Mask mask = mask_or_ones(ev.mask, truth.meta());
                const std::optional<Mask> region = ev.region == "mask" ? std::optional<Mask>(mask) : std::nullopt;
                std::ostringstream head, row;
                head << "RMSE(%),RMSE,PSNR(dB),SSIM";
                row << fmt(rmse_percent(truth, recon, mask)) << ',' << fmt(rmse(truth, recon, mask)) << ','
                    << fmt(psnr(truth, recon, region, ev.peak > 0.0 ? std::optional<double>(ev.peak) : std::nullopt))
                    << ',' << fmt(ssim3(truth, recon, region, SsimParams{ev.window}));
                if (!ev.rois.empty()) {
                    const RoiSet rois = rois_from_labels(read_volume(ev.rois));
                    const RegressionResult r = roi_regression(
                        truth, recon, rois, ev.roi_mode == "means" ? RegressionMode::RoiMeans : RegressionMode::PooledVoxels);
                    head << ",slope,intercept,R2,corr,mean_abs_error,std_abs_error";
                    row << ',' << fmt(r.slope) << ',' << fmt(r.intercept) << ',' << fmt(r.r_squared) << ','
                        << fmt(r.corr) << ',' << fmt(r.mean_abs_error) << ',' << fmt(r.std_abs_error);
                }
                const std::string csv = head.str() + "\n" + row.str() + "\n";
                if (ev.out.empty())
                    std::cout << csv;
                else
                    write_text(csv, ev.out);
            };
        });
    }

    // gradcheck -------------------------------------------------------------------------
    struct {
        int cases = 20;
        double tol = 1e-6;
    } gc;
    {
        auto* sc = app.add_subcommand("gradcheck", "central-difference check of every op, network and loss");
        common(sc);
        sc->add_option("--cases", gc.cases, "random cases per check");
        sc->add_option("--tol", gc.tol, "maximum allowed relative error");
        sc->callback([&] {
            action = [&] {
                double worst = 0.0;
                std::cout << "check,cases,max_rel_error\n";
                for (const auto& r : run_gradcheck_suite(seed, gc.cases)) {
                    std::cout << r.name << ',' << r.cases << ',' << fmt(r.max_rel_error) << '\n';
                    worst = std::max(worst, r.max_rel_error);
                }
                std::cout << "max," << gc.cases << ',' << fmt(worst) << '\n';
                if (!(worst < gc.tol)) throw NumericalError("gradient check exceeded tolerance " + fmt(gc.tol));
            };
        });
    }

    try {
        app.parse(argc, argv);
        if (!config_path.empty()) {
            // Re-parse with file entries for every option the command line left unset.
            CLI::App* sc = app.get_subcommands().front();
            std::vector<std::string> args;
            for (const auto& [key, vals] : read_config(config_path)) {
                CLI::Option* opt = nullptr;
                try {
                    opt = sc->get_option("--" + key);
                } catch (const CLI::OptionNotFound&) {
                    throw InputError("--config: unknown key '" + key + "' for " + sc->get_name());
                }
                if (opt->count() > 0 || key == "config") continue;
                if (opt->get_expected_max() == 0) {
                    if (vals.size() != 1 || (vals[0] != "true" && vals[0] != "false"))
                        throw InputError("--config: flag '" + key + "' needs true or false");
                    if (vals[0] == "true") args.push_back("--" + key);
                    continue;
                }
                args.push_back("--" + key);
                args.insert(args.end(), vals.begin(), vals.end());
            }
            std::vector<std::string> full{argv[0]};
            for (int i = 1; i < argc; ++i) full.emplace_back(argv[i]);
            full.insert(full.end(), args.begin(), args.end());
            std::reverse(full.begin() + 1, full.end()); // CLI11 consumes a reversed vector
            action = nullptr;
            config_path.clear();
            app.clear();
            full.erase(full.begin());
            app.parse(full);
        }
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const InputError& e) {
        std::cerr << "qsmtool: error: " << e.what() << '\n';
        return 1;
    }

    try {
        if (action) action();
        return 0;
    } catch (const NumericalError& e) {
        std::cerr << "qsmtool: numerical failure: " << e.what() << '\n';
        return 2;
    } catch (const InputError& e) {
        std::cerr << "qsmtool: error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "qsmtool: error: " << e.what() << '\n';
        return 1;
    }
}

} // namespace qsm::cli
