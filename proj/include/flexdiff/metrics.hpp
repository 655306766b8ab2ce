#pragma once

#include "flexdiff/dataio.hpp"
#include "flexdiff/diffusion.hpp"
#include "flexdiff/schedule.hpp"
#include "flexdiff/tensor.hpp"

#include <cstdint>
#include <vector>

namespace flexdiff {

// ||pred - truth||_F / ||truth||_F.
double rfne(const Tensor& pred, const Tensor& truth);

// Pearson correlation over all pixels.
double pcc(const Tensor& pred, const Tensor& truth);

struct SpectrumBins {
    std::vector<double> k_centers;   // 1 .. n/2
    std::vector<double> energy;
    std::vector<int64_t> n_modes;
    double corner_energy = 0.0;  // modes with round(|k|) > n/2
    int64_t corner_modes = 0;
};

// Unit-width annuli of pi |w_hat|^2 / (n^4 |k|), DC excluded.
SpectrumBins vorticity_spectrum(const Tensor& omega);

struct PullStats {
    double pull_mean = 0.0;
    double pull_std = 0.0;
    // pull_std / sqrt(1 + 1/m): the spread expected of a calibrated ensemble
    // whose truth is exchangeable with the members is sqrt(1 + 1/m).
    double pull_std_corrected = 0.0;
    int64_t used = 0;
    int64_t excluded = 0;  // pixels with std below the floor
    int members = 0;
};

// pull = (mean - truth) / std over pixels with std >= std_floor.
PullStats pull_stats(const EnsembleStats& ensemble, const Tensor& truth, double std_floor = 1e-8);

struct RolloutStep {
    int step = 0;
    Tensor field;                 // physical units
    double pcc = 0.0;
    double rfne = 0.0;
    double persistence_pcc = 0.0;  // PCC of the initial current frame against the truth
};

struct RolloutOptions {
    int horizon = 1;
    int n_steps = 2;
    int members = 1;        // residual = ensemble mean when > 1
    int step_size = 1;      // forecast step s in snapshots
    double norm_std = 1.0;  // residual and conditioning scale
    double re_tag = 0.0;
    uint64_t seed = 0;
    TimeGrid grid = TimeGrid::UniformT;
};

// Feeds predictions back as conditioning for horizon steps. truth[k] is the
// ground truth k+1 steps after current.
std::vector<RolloutStep> autoregressive_rollout(const VelocityPredictor& predictor,
                                                const Tensor& previous, const Tensor& current,
                                                const std::vector<Tensor>& truth,
                                                const NoiseSchedule& schedule,
                                                const RolloutOptions& options);

} // namespace flexdiff
