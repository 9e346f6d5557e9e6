#include "qsm/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <thread>

#include "qsm/errors.hpp"
#include "qsm/nn/checkpoint.hpp"

namespace qsm {

using nn::Tape;
using nn::Tensor;

void TrainConfig::validate(std::size_t multiple) const {
    if (epochs < 1) throw InputError("epochs must be >= 1");
    if (batch_size < 1) throw InputError("batch_size must be >= 1");
    if (patches_per_epoch < batch_size) throw InputError("patches_per_epoch must be >= batch_size");
    if (patch_size == 0) throw InputError("patch_size must be positive");
    if (multiple > 0 && patch_size % multiple != 0)
        throw InputError("patch_size " + std::to_string(patch_size) + " must be divisible by " + std::to_string(multiple));
    if (stride() > patch_size) throw InputError("infer_stride must not exceed patch_size");
    if (d_steps_per_g_step < 1) throw InputError("d_steps_per_g_step must be >= 1");
    if (!(adam.lr > 0.0)) throw InputError("lr must be positive");
    if (d_lr && !(*d_lr > 0.0)) throw InputError("discriminator lr must be positive");
    weights.validate();
}

// -------------------------------------------------------------------------------------------
// Patches

Dims sample_origin(const Dims& dims, std::size_t patch, std::mt19937_64& rng) {
    Dims o{};
    for (int a = 0; a < 3; ++a) {
        if (dims[a] < patch)
            throw InputError("volume extent " + std::to_string(dims[a]) + " is smaller than patch " + std::to_string(patch));
        std::uniform_int_distribution<std::size_t> u(0, dims[a] - patch);
        o[a] = u(rng);
    }
    return o;
}

RealVolume extract_patch(const RealVolume& v, const Dims& origin, std::size_t patch) {
    const auto& d = v.dims();
    for (int a = 0; a < 3; ++a)
        if (origin[a] + patch > d[a]) throw InputError("patch exceeds volume bounds");
    const VolumeMeta meta = make_meta({patch, patch, patch}, v.meta().voxel_size, v.meta().b0_dir);
    std::vector<double> out(patch * patch * patch);
    std::size_t i = 0;
    for (std::size_t z = 0; z < patch; ++z)
        for (std::size_t y = 0; y < patch; ++y)
            for (std::size_t x = 0; x < patch; ++x) out[i++] = v.at(origin[0] + x, origin[1] + y, origin[2] + z);
    return RealVolume(meta, std::move(out));
}

PatchBatch sample_patches(const UnpairedDataset& ds, const TrainConfig& cfg, std::mt19937_64& rng) {
    if (ds.field_cases.empty() || ds.chi_volumes.empty()) throw InputError("dataset needs field cases and chi volumes");
    if (!ds.chi_masks.empty() && ds.chi_masks.size() != ds.chi_volumes.size())
        throw InputError("chi_masks must be empty or parallel to chi_volumes");
    const std::size_t p = cfg.patch_size;
    PatchBatch batch;
    std::uniform_int_distribution<std::size_t> pick_field(0, ds.field_cases.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_chi(0, ds.chi_volumes.size() - 1);
    for (int b = 0; b < cfg.batch_size; ++b) {
        const std::size_t s = pick_field(rng);
        const auto& c = ds.field_cases[s];
        const Dims o = sample_origin(c.field.dims(), p, rng);
        batch.fields.push_back({extract_patch(c.field, o, p), extract_patch(c.magnitude, o, p),
                                extract_patch(c.mask.to_volume(), o, p), s, o});
    }
    for (int b = 0; b < cfg.batch_size; ++b) {
        const std::size_t s = pick_chi(rng);
        const auto& chi = ds.chi_volumes[s];
        const Dims o = sample_origin(chi.dims(), p, rng);
        const bool has_mask = !ds.chi_masks.empty() && ds.chi_masks[s].has_value();
        RealVolume mask = has_mask ? extract_patch(ds.chi_masks[s]->to_volume(), o, p)
                                   : RealVolume(make_meta({p, p, p}, chi.meta().voxel_size, chi.meta().b0_dir),
                                                std::vector<double>(p * p * p, 1.0));
        batch.chis.push_back({extract_patch(chi, o, p), std::move(mask), s, o});
    }
    return batch;
}

// -------------------------------------------------------------------------------------------
// Augmentation

std::optional<int> b0_axis(const Vec3& b0) {
    int axis = -1;
    for (int a = 0; a < 3; ++a) {
        if (std::abs(b0[a]) > 1e-12) {
            if (axis >= 0) return std::nullopt;
            axis = a;
        }
    }
    if (axis < 0) return std::nullopt;
    return axis;
}

RealVolume flip_axis(const RealVolume& v, int axis) {
    if (axis < 0 || axis > 2) throw InputError("flip axis must be 0, 1 or 2");
    const auto& d = v.dims();
    VolumeMeta meta = v.meta();
    meta.b0_dir[axis] = -meta.b0_dir[axis];
    std::vector<double> out(v.values().size());
    for (std::size_t z = 0; z < d[2]; ++z)
        for (std::size_t y = 0; y < d[1]; ++y)
            for (std::size_t x = 0; x < d[0]; ++x) {
                std::array<std::size_t, 3> src{x, y, z};
                src[axis] = d[axis] - 1 - src[axis];
                out[meta.index(x, y, z)] = v.at(src[0], src[1], src[2]);
            }
    return RealVolume(meta, std::move(out));
}

RealVolume rotate90(const RealVolume& v, int p, int q, int k) {
    if (p == q || p < 0 || q < 0 || p > 2 || q > 2) throw InputError("rotation plane needs two distinct axes");
    k = ((k % 4) + 4) % 4;
    RealVolume cur = v;
    for (int turn = 0; turn < k; ++turn) {
        const auto& d = cur.dims();
        VolumeMeta meta = cur.meta();
        std::swap(meta.dims[p], meta.dims[q]);
        std::swap(meta.voxel_size[p], meta.voxel_size[q]);
        // b0 rotates with the grid: (bp, bq) -> (-bq, bp).
        const double bp = meta.b0_dir[p], bq = meta.b0_dir[q];
        meta.b0_dir[p] = -bq;
        meta.b0_dir[q] = bp;
        for (auto& c : meta.b0_dir)
            if (c == 0.0) c = 0.0; // drop negative zeros so metas compare and serialize cleanly
        std::vector<double> out(cur.values().size());
        for (std::size_t z = 0; z < d[2]; ++z)
            for (std::size_t y = 0; y < d[1]; ++y)
                for (std::size_t x = 0; x < d[0]; ++x) {
                    std::array<std::size_t, 3> src{x, y, z};
                    std::array<std::size_t, 3> dst = src;
                    dst[p] = d[q] - 1 - src[q];
                    dst[q] = src[p];
                    out[meta.index(dst[0], dst[1], dst[2])] = cur.at(x, y, z);
                }
        cur = RealVolume(meta, std::move(out));
    }
    return cur;
}

AugmentChoice draw_augment(std::mt19937_64& rng) {
    std::bernoulli_distribution coin(0.5);
    std::uniform_int_distribution<int> quarter(0, 3);
    AugmentChoice c;
    for (auto& f : c.flip) f = coin(rng);
    c.rot_k = quarter(rng);
    return c;
}

std::vector<RealVolume> apply_augment(const std::vector<RealVolume>& group, const AugmentChoice& c,
                                      bool* rotation_skipped) {
    if (rotation_skipped) *rotation_skipped = false;
    std::vector<RealVolume> out;
    out.reserve(group.size());
    for (const auto& v : group) {
        if (!out.empty() && v.dims() != group.front().dims()) throw InputError("augment group volumes differ in shape");
        RealVolume cur = v;
        for (int a = 0; a < 3; ++a)
            if (c.flip[a]) cur = flip_axis(cur, a);
        if (c.rot_k % 4 != 0) {
            const auto axis = b0_axis(cur.meta().b0_dir);
            if (!axis) {
                if (rotation_skipped) *rotation_skipped = true;
            } else {
                const int p = (*axis + 1) % 3, q = (*axis + 2) % 3;
                cur = rotate90(cur, p, q, c.rot_k);
            }
        }
        out.push_back(std::move(cur));
    }
    return out;
}

std::vector<RealVolume> augment(const std::vector<RealVolume>& group, std::mt19937_64& rng, bool* rotation_skipped) {
    return apply_augment(group, draw_augment(rng), rotation_skipped);
}

// -------------------------------------------------------------------------------------------
// Logs

std::vector<double> TrainLog::epoch_mean_cycle() const {
    std::vector<double> sums, counts;
    for (const auto& r : rows) {
        const auto e = static_cast<std::size_t>(r.epoch);
        if (sums.size() <= e) {
            sums.resize(e + 1, 0.0);
            counts.resize(e + 1, 0.0);
        }
        sums[e] += r.report.cycle;
        counts[e] += 1.0;
    }
    std::vector<double> out;
    for (std::size_t e = 0; e < sums.size(); ++e)
        if (counts[e] > 0) out.push_back(sums[e] / counts[e]);
    return out;
}

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void write_text(const std::string& text, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError(IoErrorKind::CannotOpen, "cannot open " + path.string() + " for writing");
    f << text;
    if (!f) throw IoError(IoErrorKind::CannotOpen, "write failed for " + path.string());
}

Tensor as_tensor(const RealVolume& v) { return to_tensor(v); }

class KernelCache {
public:
    std::shared_ptr<const DipoleKernel> get(const VolumeMeta& meta) {
        for (const auto& k : kernels_)
            if (k->meta() == meta) return k;
        kernels_.push_back(std::make_shared<const DipoleKernel>(build_dipole(meta)));
        return kernels_.back();
    }

private:
    std::vector<std::shared_ptr<const DipoleKernel>> kernels_;
};

struct AugmentedBatch {
    std::vector<ChiSample> chis;
    std::vector<FieldSample> fields;
    std::vector<Tensor> real_masked; // chi * mask, discriminator reals
};

AugmentedBatch prepare_batch(const PatchBatch& pb, const TrainConfig& cfg, std::mt19937_64& rng, KernelCache& kernels,
                             bool& rotation_skipped) {
    AugmentedBatch out;
    for (const auto& f : pb.fields) {
        std::vector<RealVolume> group{f.field, f.magnitude, f.mask};
        if (cfg.augment) {
            bool skipped = false;
            group = augment(group, rng, &skipped);
            rotation_skipped = rotation_skipped || skipped;
        }
        out.fields.push_back({as_tensor(group[0]), as_tensor(group[1]), as_tensor(group[2]), kernels.get(group[0].meta())});
    }
    for (const auto& c : pb.chis) {
        std::vector<RealVolume> group{c.chi, c.mask};
        if (cfg.augment) {
            bool skipped = false;
            group = augment(group, rng, &skipped);
            rotation_skipped = rotation_skipped || skipped;
        }
        const Tensor mask = as_tensor(group[1]);
        out.chis.push_back({as_tensor(group[0]), mask, mask, kernels.get(group[0].meta())});
        std::vector<double> rm(group[0].values().begin(), group[0].values().end());
        for (std::size_t i = 0; i < rm.size(); ++i) rm[i] *= group[1][i];
        out.real_masked.push_back(Tensor::constant(mask.shape(), std::move(rm)));
    }
    return out;
}

void checkpoint_pair(const nn::Generator& g, const nn::Discriminator& d, const std::filesystem::path& dir,
                     const std::string& tag) {
    std::filesystem::create_directories(dir);
    nn::write_checkpoint(g, dir / ("generator_" + tag + ".dbc"));
    nn::write_checkpoint(d, dir / ("discriminator_" + tag + ".dbc"));
}

} // namespace

std::string format_train_log_csv(const TrainLog& log) {
    std::ostringstream os;
    os << "epoch,step,cycle,gan_g,gan_d,grad,tv,total\n";
    for (const auto& r : log.rows)
        os << r.epoch << ',' << r.step << ',' << fmt(r.report.cycle) << ',' << fmt(r.report.gan_g) << ','
           << fmt(r.report.gan_d) << ',' << fmt(r.report.grad) << ',' << fmt(r.report.tv) << ','
           << fmt(r.report.total) << '\n';
    return os.str();
}

void write_train_log_csv(const TrainLog& log, const std::filesystem::path& path) {
    write_text(format_train_log_csv(log), path);
}

std::string format_uqsm_log_csv(const std::vector<UqsmLogRow>& rows) {
    std::ostringstream os;
    os << "epoch,step,total,data,tv\n";
    for (const auto& r : rows)
        os << r.epoch << ',' << r.step << ',' << fmt(r.total) << ',' << fmt(r.data) << ',' << fmt(r.tv) << '\n';
    return os.str();
}

// -------------------------------------------------------------------------------------------
// cycle training

TrainLog train_cycleqsm(const UnpairedDataset& ds, nn::Generator& g, nn::Discriminator& d, const TrainConfig& cfg) {
    cfg.validate(g.required_multiple());
    if (ds.field_cases.empty() || ds.chi_volumes.empty()) throw InputError("dataset needs field cases and chi volumes");
    if (d.output_extent(cfg.patch_size) == 0) throw InputError("patch too small for the discriminator");

    std::mt19937_64 rng(cfg.seed);
    KernelCache kernels;
    nn::Adam g_opt(g, cfg.adam);
    nn::AdamConfig d_cfg = cfg.adam;
    if (cfg.d_lr) d_cfg.lr = *cfg.d_lr;
    nn::Adam d_opt(d, d_cfg);

    TrainLog log;
    bool notice_logged = false;
    nn::ParameterSnapshot good_g = g.snapshot(), good_d = d.snapshot();
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int s = 0; s < cfg.steps_per_epoch(); ++s, ++step) {
            try {
                const PatchBatch pb = sample_patches(ds, cfg, rng);
                bool skipped = false;
                const AugmentedBatch batch = prepare_batch(pb, cfg, rng, kernels, skipped);
                if (skipped && !notice_logged) {
                    log.notices.push_back("b0 is not axis-aligned; rotation augmentation skipped");
                    notice_logged = true;
                }

                LossReport report;
                std::vector<Tensor> fakes;
                {
                    Tape tape;
                    const GeneratorObjective obj =
                        total_generator_loss(tape, g, d, batch.chis, batch.fields, cfg.weights, cfg.loss);
                    tape.backward(obj.total);
                    g_opt.step();
                    d.zero_grad();
                    report = obj.report;
                    for (const auto& f : obj.fakes) fakes.push_back(nn::detach(f));
                }
                for (int k = 0; k < cfg.d_steps_per_g_step; ++k) {
                    Tape tape;
                    const Tensor gan_d = lsgan_discriminator_loss(tape, d, batch.real_masked, fakes);
                    tape.backward(gan_d);
                    d_opt.step();
                    if (k == 0) report.gan_d = gan_d.item();
                }
                for (double v : {report.cycle, report.gan_g, report.gan_d, report.grad, report.tv, report.total})
                    if (!std::isfinite(v)) throw NumericalError("non-finite loss value");
                log.rows.push_back({epoch, step, report});
            } catch (const NumericalError& e) {
                g.restore(good_g);
                d.restore(good_d);
                g.zero_grad();
                d.zero_grad();
                if (!cfg.checkpoint_dir.empty()) checkpoint_pair(g, d, cfg.checkpoint_dir, "last_good");
                if (!cfg.log_csv.empty()) write_train_log_csv(log, cfg.log_csv);
                throw NumericalError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                                     std::to_string(step) + " (" + e.what() + "); parameters restored to " +
                                     (epoch == 0 ? std::string("initialization") : "end of epoch " + std::to_string(epoch - 1)));
            }
        }
        good_g = g.snapshot();
        good_d = d.snapshot();
        if (!cfg.checkpoint_dir.empty()) {
            checkpoint_pair(g, d, cfg.checkpoint_dir, "epoch" + std::to_string(epoch));
            checkpoint_pair(g, d, cfg.checkpoint_dir, "latest");
        }
    }
    if (!cfg.log_csv.empty()) write_train_log_csv(log, cfg.log_csv);
    return log;
}

// -------------------------------------------------------------------------------------------
// Stitched inference

std::vector<std::size_t> window_origins(std::size_t n, std::size_t patch, std::size_t stride) {
    if (patch == 0 || stride == 0) throw InputError("patch and stride must be positive");
    if (n < patch) throw InputError("extent smaller than patch");
    std::vector<std::size_t> o;
    for (std::size_t s = 0; s + patch <= n; s += stride) o.push_back(s);
    if (o.back() + patch < n) o.push_back(n - patch);
    return o;
}

namespace {

Dims padded_dims(const Dims& d, std::size_t patch) {
    return {std::max(d[0], patch), std::max(d[1], patch), std::max(d[2], patch)};
}

RealVolume pad_volume(const RealVolume& v, const Dims& to) {
    if (v.dims() == to) return v;
    const auto& d = v.dims();
    const VolumeMeta meta = make_meta(to, v.meta().voxel_size, v.meta().b0_dir);
    std::vector<double> out(meta.size(), 0.0);
    for (std::size_t z = 0; z < d[2]; ++z)
        for (std::size_t y = 0; y < d[1]; ++y)
            for (std::size_t x = 0; x < d[0]; ++x) out[meta.index(x, y, z)] = v.at(x, y, z);
    return RealVolume(meta, std::move(out));
}

std::vector<double> crop_values(std::span<const double> v, const Dims& from, const Dims& to) {
    std::vector<double> out(voxel_count(to));
    std::size_t i = 0;
    for (std::size_t z = 0; z < to[2]; ++z)
        for (std::size_t y = 0; y < to[1]; ++y)
            for (std::size_t x = 0; x < to[0]; ++x) out[i++] = v[x + from[0] * (y + from[1] * z)];
    return out;
}

} // namespace

std::vector<int> coverage_counts(const Dims& dims, std::size_t patch, std::size_t stride) {
    const Dims pd = padded_dims(dims, patch);
    const auto ox = window_origins(pd[0], patch, stride), oy = window_origins(pd[1], patch, stride),
               oz = window_origins(pd[2], patch, stride);
    std::vector<int> counts(voxel_count(pd), 0);
    for (auto z0 : oz)
        for (auto y0 : oy)
            for (auto x0 : ox)
                for (std::size_t z = z0; z < z0 + patch; ++z)
                    for (std::size_t y = y0; y < y0 + patch; ++y)
                        for (std::size_t x = x0; x < x0 + patch; ++x) ++counts[x + pd[0] * (y + pd[1] * z)];
    std::vector<int> out(voxel_count(dims));
    std::size_t i = 0;
    for (std::size_t z = 0; z < dims[2]; ++z)
        for (std::size_t y = 0; y < dims[1]; ++y)
            for (std::size_t x = 0; x < dims[0]; ++x) out[i++] = counts[x + pd[0] * (y + pd[1] * z)];
    return out;
}

RealVolume infer_stitched(const PatchFn& fn, const RealVolume& field, const RealVolume& magnitude, const Mask& mask,
                          const InferConfig& cfg) {
    require_same_grid(field.meta(), magnitude.meta(), "infer_stitched magnitude");
    require_same_grid(field.meta(), mask.meta(), "infer_stitched mask");
    const std::size_t p = cfg.patch_size;
    if (p == 0 || cfg.stride == 0) throw InputError("patch and stride must be positive");
    if (cfg.stride > p) throw InputError("stride must not exceed the patch size");

    const Dims dims = field.dims();
    const Dims pd = padded_dims(dims, p);
    const RealVolume f = pad_volume(field, pd), m = pad_volume(magnitude, pd);

    std::vector<Dims> windows;
    for (auto z0 : window_origins(pd[2], p, cfg.stride))
        for (auto y0 : window_origins(pd[1], p, cfg.stride))
            for (auto x0 : window_origins(pd[0], p, cfg.stride)) windows.push_back({x0, y0, z0});

    std::vector<std::vector<double>> outputs(windows.size());
    auto work = [&](std::size_t begin, std::size_t end, std::exception_ptr& err) {
        try {
            for (std::size_t w = begin; w < end; ++w) {
                outputs[w] = fn(extract_patch(f, windows[w], p), extract_patch(m, windows[w], p));
                if (outputs[w].size() != p * p * p) throw InputError("patch function returned the wrong size");
            }
        } catch (...) {
            err = std::current_exception();
        }
    };
    const std::size_t n_threads = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(cfg.threads, 1)), 1, windows.size());
    std::vector<std::exception_ptr> errors(n_threads);
    if (n_threads == 1) {
        work(0, windows.size(), errors[0]);
    } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (windows.size() + n_threads - 1) / n_threads;
        for (std::size_t t = 0; t < n_threads; ++t)
            pool.emplace_back(work, std::min(windows.size(), t * chunk), std::min(windows.size(), (t + 1) * chunk),
                              std::ref(errors[t]));
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    // Merge in window order so the result does not depend on the thread count.
    std::vector<double> acc(voxel_count(pd), 0.0), cnt(voxel_count(pd), 0.0);
    for (std::size_t w = 0; w < windows.size(); ++w) {
        const auto& o = windows[w];
        std::size_t i = 0;
        for (std::size_t z = 0; z < p; ++z)
            for (std::size_t y = 0; y < p; ++y)
                for (std::size_t x = 0; x < p; ++x, ++i) {
                    const std::size_t j = (o[0] + x) + pd[0] * ((o[1] + y) + pd[1] * (o[2] + z));
                    acc[j] += outputs[w][i];
                    cnt[j] += 1.0;
                }
    }
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] /= cnt[j];
    std::vector<double> out = crop_values(acc, pd, dims);
    for (std::size_t i = 0; i < out.size(); ++i)
        if (mask[i] == 0) out[i] = 0.0;
    return RealVolume(field.meta(), std::move(out));
}

RealVolume infer_stitched(const nn::Generator& g, const RealVolume& field, const RealVolume& magnitude,
                          const Mask& mask, const InferConfig& cfg) {
    if (cfg.patch_size % g.required_multiple() != 0)
        throw InputError("patch size must be divisible by " + std::to_string(g.required_multiple()));
    PatchFn fn = [&g](const RealVolume& phase, const RealVolume& mag) {
        Tape tape;
        const Tensor out = nn::forward_generator(tape, g, to_tensor(phase), to_tensor(mag));
        return std::vector<double>(out.values().begin(), out.values().end());
    };
    return infer_stitched(fn, field, magnitude, mask, cfg);
}

// -------------------------------------------------------------------------------------------
// Phasor-loss optimization

RealVolume phasor_weight(const RealVolume& magnitude, const Mask& mask) {
    require_same_grid(magnitude.meta(), mask.meta(), "phasor_weight");
    double s = 0.0;
    for (std::size_t i = 0; i < magnitude.values().size(); ++i)
        if (mask[i]) s += magnitude[i];
    const double mean = s / static_cast<double>(mask.count());
    std::vector<double> w(magnitude.values().size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = mask[i] ? (mean > 0.0 ? magnitude[i] / mean : 1.0) : 0.0;
    return RealVolume(magnitude.meta(), std::move(w));
}

namespace {

// Same weighting on raw patch values; all-zero masks give zero weight.
std::vector<double> patch_weight(std::span<const double> magnitude, std::span<const double> mask) {
    double s = 0.0, n = 0.0;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i] != 0.0) {
            s += magnitude[i];
            n += 1.0;
        }
    std::vector<double> w(mask.size(), 0.0);
    if (n == 0.0) return w;
    const double mean = s / n;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i] != 0.0) w[i] = mean > 0.0 ? magnitude[i] / mean : 1.0;
    return w;
}

std::size_t round_up(std::size_t n, std::size_t m) { return (n + m - 1) / m * m; }

} // namespace

DipResult optimize_dip(const RealVolume& field, const RealVolume& magnitude, const Mask& mask,
                       const DipoleKernel& kernel, const DipConfig& cfg) {
    require_same_grid(field.meta(), kernel.meta(), "optimize_dip kernel");
    require_same_grid(field.meta(), magnitude.meta(), "optimize_dip magnitude");
    require_same_grid(field.meta(), mask.meta(), "optimize_dip mask");
    if (cfg.iters < 1) throw InputError("dip iterations must be >= 1");
    if (!(cfg.lr > 0.0)) throw InputError("dip lr must be positive");
    if (!(cfg.lambda >= 0.0)) throw InputError("dip lambda must be >= 0");

    nn::GeneratorConfig gc;
    gc.in_channels = 1;
    gc.depth = cfg.depth;
    gc.base_channels = cfg.base_channels;
    gc.init_std = cfg.init_std;
    gc.seed = cfg.seed;
    nn::Generator g(gc);

    const Dims dims = field.dims();
    const std::size_t m = g.required_multiple();
    const Dims pd{round_up(dims[0], m), round_up(dims[1], m), round_up(dims[2], m)};
    const VolumeMeta pmeta = make_meta(pd, field.meta().voxel_size, field.meta().b0_dir);
    std::optional<DipoleKernel> padded_kernel;
    if (pd != dims) padded_kernel = build_dipole(pmeta);
    const DipoleKernel& k = padded_kernel ? *padded_kernel : kernel;

    const Tensor b = to_tensor(pad_volume(field, pd));
    const Tensor w = to_tensor(pad_volume(phasor_weight(magnitude, mask), pd));
    const Tensor mk = to_tensor(pad_volume(mask.to_volume(), pd));

    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_real_distribution<double> u(0.0, cfg.input_scale);
    std::vector<double> z(voxel_count(pd));
    for (auto& v : z) v = u(rng);
    const Tensor input = Tensor::constant({1, pd[0], pd[1], pd[2]}, std::move(z));

    nn::AdamConfig ac;
    ac.lr = cfg.lr;
    nn::Adam opt(g, ac);

    DipResult result{RealVolume(field.meta()), {}, 0};
    double best = std::numeric_limits<double>::infinity();
    for (int it = 0; it < cfg.iters; ++it) {
        Tape tape;
        const Tensor chi = nn::mul(tape, g.forward(tape, input), mk);
        const DipTerms terms = dip_loss(tape, chi, b, w, k, cfg.lambda);
        const double total = terms.total.item();
        if (!std::isfinite(total)) throw NumericalError("dip objective became non-finite at iteration " + std::to_string(it));
        result.trace.push_back({it, total, terms.data, terms.tv});
        if (total < best) {
            best = total;
            result.best_iteration = it;
            result.chi = RealVolume(field.meta(), crop_values(chi.values(), pd, dims));
        }
        tape.backward(terms.total);
        opt.step();
    }
    return result;
}

std::vector<UqsmLogRow> train_uqsm(const UnpairedDataset& ds, nn::Generator& g, const TrainConfig& cfg, double lambda) {
    cfg.validate(g.required_multiple());
    if (ds.field_cases.empty()) throw InputError("dataset needs field cases");
    if (!(lambda >= 0.0)) throw InputError("lambda must be >= 0");

    std::mt19937_64 rng(cfg.seed);
    KernelCache kernels;
    nn::Adam opt(g, cfg.adam);
    std::vector<UqsmLogRow> rows;
    const std::size_t p = cfg.patch_size;
    std::uniform_int_distribution<std::size_t> pick(0, ds.field_cases.size() - 1);
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int s = 0; s < cfg.steps_per_epoch(); ++s, ++step) {
            Tape tape;
            std::vector<DipTerms> terms;
            for (int bi = 0; bi < cfg.batch_size; ++bi) {
                const std::size_t src = pick(rng);
                const auto& c = ds.field_cases[src];
                const Dims o = sample_origin(c.field.dims(), p, rng);
                std::vector<RealVolume> group{extract_patch(c.field, o, p), extract_patch(c.magnitude, o, p),
                                              extract_patch(c.mask.to_volume(), o, p)};
                if (cfg.augment) group = augment(group, rng);
                const auto kernel = kernels.get(group[0].meta());
                const Tensor field = to_tensor(group[0]), mag = to_tensor(group[1]), mask = to_tensor(group[2]);
                const Tensor weight = Tensor::constant(field.shape(), patch_weight(group[1].values(), group[2].values()));
                const Tensor chi = nn::mul(tape, nn::forward_generator(tape, g, field, mag), mask);
                terms.push_back(dip_loss(tape, chi, field, weight, *kernel, lambda));
            }
            Tensor total = terms.front().total;
            double data = terms.front().data, tv = terms.front().tv;
            for (std::size_t i = 1; i < terms.size(); ++i) {
                total = nn::add(tape, total, terms[i].total);
                data += terms[i].data;
                tv += terms[i].tv;
            }
            const double inv = 1.0 / static_cast<double>(terms.size());
            total = nn::scale(tape, total, inv);
            if (!std::isfinite(total.item())) throw NumericalError("uqsm loss became non-finite at step " + std::to_string(step));
            rows.push_back({epoch, step, total.item(), data * inv, tv * inv});
            tape.backward(total);
            opt.step();
        }
        if (!cfg.checkpoint_dir.empty()) {
            std::filesystem::create_directories(cfg.checkpoint_dir);
            nn::write_checkpoint(g, cfg.checkpoint_dir / ("uqsm_epoch" + std::to_string(epoch) + ".dbc"));
            nn::write_checkpoint(g, cfg.checkpoint_dir / "uqsm_latest.dbc");
        }
    }
    if (!cfg.log_csv.empty()) write_text(format_uqsm_log_csv(rows), cfg.log_csv);
    return rows;
}

} // namespace qsm
