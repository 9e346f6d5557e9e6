#pragma once

// Reconstruction quality: RMSE, PSNR, 3D SSIM and ROI regression statistics.

#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "qsm/phantom.hpp"
#include "qsm/volume.hpp"

namespace qsm {

// sqrt(sum_{i in mask} (truth_i - recon_i)^2 / N).
double rmse(const RealVolume& truth, const RealVolume& recon, const Mask& mask);
// 100 * rmse / rms(truth over mask), i.e. 100 * ||truth - recon|| / ||truth||.
double rmse_percent(const RealVolume& truth, const RealVolume& recon, const Mask& mask);

constexpr double kInfinitePsnr = std::numeric_limits<double>::infinity();

// 10 log10(peak^2 / MSE). Without a mask the whole volume is used; peak defaults to
// max |truth| over the same region. MSE = 0 returns kInfinitePsnr.
double psnr(const RealVolume& truth, const RealVolume& recon, const std::optional<Mask>& mask = std::nullopt,
            std::optional<double> peak = std::nullopt);

struct SsimParams {
    std::size_t window = 7;
    double k1 = 0.01;
    double k2 = 0.03;
};

// Mean local SSIM over every uniform window that fits inside the volume and whose centre
// lies in the mask (all windows without a mask). Dynamic range L = max - min of truth over
// the region; a flat truth falls back to L = 1. Singleton axes shrink the window to 1.
double ssim3(const RealVolume& truth, const RealVolume& recon, const std::optional<Mask>& mask = std::nullopt,
             const SsimParams& p = {});

struct Roi {
    std::string name;
    Mask mask;
};
using RoiSet = std::vector<Roi>;

void validate_rois(const RoiSet& rois, const VolumeMeta& meta);

// One ROI per distinct nonzero label value, named "label<value>".
RoiSet rois_from_labels(const RealVolume& labels);
// One ROI per phantom shape (voxels where that shape wins), named "shape<i>".
RoiSet phantom_rois(const PhantomSpec& spec);

enum class RegressionMode { PooledVoxels, RoiMeans };

struct RegressionResult {
    double slope = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
    double corr = 0.0;
    double mean_abs_error = 0.0;
    double std_abs_error = 0.0; // population standard deviation
    std::size_t n_points = 0;
};

// Least-squares fit recon = slope * truth + intercept. Pooled mode uses every ROI voxel
// (a voxel in two ROIs counts twice); ROI-mean mode uses one point per ROI. A constant
// recon gives corr = r_squared = 0.
RegressionResult regress(const std::vector<double>& truth, const std::vector<double>& recon);
RegressionResult roi_regression(const RealVolume& truth, const RealVolume& recon, const RoiSet& rois,
                                RegressionMode mode = RegressionMode::PooledVoxels);

struct RoiStat {
    std::string name;
    double mean = 0.0;
    double std = 0.0; // population
    std::size_t count = 0;
};

std::vector<RoiStat> roi_means(const RealVolume& recon, const RoiSet& rois);

} // namespace qsm
