#pragma once

// Patch sampling, augmentation, the cycle training loop, per-volume DIP optimization,
// unsupervised phasor-loss training and stitched full-volume inference.

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "qsm/losses.hpp"
#include "qsm/nn/optim.hpp"
#include "qsm/phantom.hpp"

namespace qsm {

struct TrainConfig {
    int epochs = 50;
    int patches_per_epoch = 256; // generator steps per epoch = patches_per_epoch / batch_size
    std::size_t patch_size = 16;
    std::size_t infer_stride = 0; // 0 means patch_size / 2
    int batch_size = 1;
    nn::AdamConfig adam;          // lr 1e-5, beta1 0.5, beta2 0.999
    std::optional<double> d_lr;   // discriminator lr, defaults to adam.lr
    LossWeights weights;
    LossOptions loss;
    int d_steps_per_g_step = 1;
    bool augment = true;
    std::uint64_t seed = 0;
    std::filesystem::path checkpoint_dir; // empty: no checkpoints
    std::filesystem::path log_csv;        // empty: no CSV

    std::size_t stride() const { return infer_stride == 0 ? std::max<std::size_t>(1, patch_size / 2) : infer_stride; }
    int steps_per_epoch() const { return patches_per_epoch / batch_size; }
    // Throws InputError; `multiple` is the generator's required spatial multiple.
    void validate(std::size_t multiple) const;
};

// Two unpaired empirical sample sets. chi_masks is parallel to chi_volumes; a missing
// entry means the whole grid.
struct UnpairedDataset {
    std::vector<SimulatedCase> field_cases;
    std::vector<RealVolume> chi_volumes;
    std::vector<std::optional<Mask>> chi_masks;
};

// Patch volumes carry their own meta (origin-free grid, inherited voxel size and b0).
struct FieldPatch {
    RealVolume field;
    RealVolume magnitude;
    RealVolume mask; // 0/1, may be all zero
    std::size_t source = 0;
    Dims origin{};
};

struct ChiPatch {
    RealVolume chi;
    RealVolume mask;
    std::size_t source = 0;
    Dims origin{};
};

struct PatchBatch {
    std::vector<FieldPatch> fields;
    std::vector<ChiPatch> chis;
};

// Uniform origin with the patch fully inside `dims`.
Dims sample_origin(const Dims& dims, std::size_t patch, std::mt19937_64& rng);
RealVolume extract_patch(const RealVolume& v, const Dims& origin, std::size_t patch);

// batch_size field patches and batch_size chi patches, sources drawn independently.
PatchBatch sample_patches(const UnpairedDataset& ds, const TrainConfig& cfg, std::mt19937_64& rng);

struct AugmentChoice {
    std::array<bool, 3> flip{};
    int rot_k = 0; // quarter turns in the plane perpendicular to b0
};

// Index of the axis b0 points along, or nullopt if b0 is oblique.
std::optional<int> b0_axis(const Vec3& b0);

RealVolume flip_axis(const RealVolume& v, int axis);
// Quarter turns in the (p, q) plane: (ip, iq) -> (nq - 1 - iq, ip) per turn.
RealVolume rotate90(const RealVolume& v, int p, int q, int k);

AugmentChoice draw_augment(std::mt19937_64& rng);
// Applies one choice to every volume in the group. Rotation is skipped (and `rotation_skipped`
// set) when b0 is oblique.
std::vector<RealVolume> apply_augment(const std::vector<RealVolume>& group, const AugmentChoice& c,
                                      bool* rotation_skipped = nullptr);
std::vector<RealVolume> augment(const std::vector<RealVolume>& group, std::mt19937_64& rng,
                                bool* rotation_skipped = nullptr);

struct TrainLogRow {
    int epoch = 0;
    int step = 0; // global generator step
    LossReport report;
};

struct TrainLog {
    std::vector<TrainLogRow> rows;
    std::vector<std::string> notices;
    // Mean cycle loss per epoch.
    std::vector<double> epoch_mean_cycle() const;
};

std::string format_train_log_csv(const TrainLog& log);
void write_train_log_csv(const TrainLog& log, const std::filesystem::path& path);

// G step on total_generator_loss, then d_steps D steps on the LSGAN loss with masked reals
// and masked detached fakes. On a non-finite loss the parameters are restored to the last
// completed epoch (written as *_last_good.dbc when checkpointing) and NumericalError is thrown.
TrainLog train_cycleqsm(const UnpairedDataset& ds, nn::Generator& g, nn::Discriminator& d, const TrainConfig& cfg);

// -------------------------------------------------------------------------------------------

// Start offsets of sliding windows along one axis: 0, s, 2s, ... plus a final window clamped
// to the end. Requires n >= p.
std::vector<std::size_t> window_origins(std::size_t n, std::size_t patch, std::size_t stride);
// Number of windows covering each voxel (after padding volumes smaller than the patch).
std::vector<int> coverage_counts(const Dims& dims, std::size_t patch, std::size_t stride);

struct InferConfig {
    std::size_t patch_size = 16;
    std::size_t stride = 8;
    int threads = 1;
};

// Maps (phase, magnitude) patches of extent patch^3 to an output patch.
using PatchFn = std::function<std::vector<double>(const RealVolume& phase, const RealVolume& magnitude)>;

// Sliding-window inference with per-voxel uniform averaging, then masking. Axes shorter
// than the patch are zero-padded to the patch extent and cropped afterwards.
RealVolume infer_stitched(const PatchFn& fn, const RealVolume& field, const RealVolume& magnitude, const Mask& mask,
                          const InferConfig& cfg);
RealVolume infer_stitched(const nn::Generator& g, const RealVolume& field, const RealVolume& magnitude,
                          const Mask& mask, const InferConfig& cfg);

// -------------------------------------------------------------------------------------------

struct DipConfig {
    double lambda = kDipLambda;
    int iters = 300;
    double lr = 1e-3;
    int depth = 3;
    int base_channels = 8; // half the training width
    double init_std = 0.02;
    double input_scale = 0.1; // fixed input ~ U(0, input_scale)
    std::uint64_t seed = 0;
};

struct DipTraceRow {
    int iteration = 0;
    double total = 0.0;
    double data = 0.0;
    double tv = 0.0;
};

struct DipResult {
    RealVolume chi;
    std::vector<DipTraceRow> trace;
    int best_iteration = 0;
};

// Data weight for the phasor loss: magnitude normalized to mean 1 over the mask, zero outside.
RealVolume phasor_weight(const RealVolume& magnitude, const Mask& mask);

// Optimizes a freshly initialized generator fed a fixed noise volume against dip_loss on one
// field; chi = mask * G(z). Returns the lowest-objective iterate.
DipResult optimize_dip(const RealVolume& field, const RealVolume& magnitude, const Mask& mask,
                       const DipoleKernel& kernel, const DipConfig& cfg);

struct UqsmLogRow {
    int epoch = 0;
    int step = 0;
    double total = 0.0;
    double data = 0.0;
    double tv = 0.0;
};

std::string format_uqsm_log_csv(const std::vector<UqsmLogRow>& rows);

// Minimizes the phasor loss of chi = mask * G(b, magnitude) over field patches only.
std::vector<UqsmLogRow> train_uqsm(const UnpairedDataset& ds, nn::Generator& g, const TrainConfig& cfg,
                                   double lambda = kDipLambda);

} // namespace qsm
