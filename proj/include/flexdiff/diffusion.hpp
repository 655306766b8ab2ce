#pragma once

#include "flexdiff/context.hpp"
#include "flexdiff/schedule.hpp"
#include "flexdiff/tensor.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace flexdiff {

struct NoisedSample {
    Tensor z;
    double t = 0.0;
    Tensor eps;
};

// v_theta(t, z, context). The returned tensor must have the shape of z. z may
// carry a leading batch axis; every item then shares the context.
using VelocityPredictor =
    std::function<Tensor(double t, const Tensor& z, const ConditioningContext& context)>;

enum class TimeGrid { UniformT, UniformLogSnr };

NoisedSample forward_perturb(const Tensor& r, double t, const Tensor& eps,
                             const NoiseSchedule& schedule);

Tensor velocity_target(const Tensor& r, double t, const Tensor& eps,
                       const NoiseSchedule& schedule);

// Clean-residual estimate alpha(t) z - sigma(t) v.
Tensor predict_clean(const Tensor& z, double t, const Tensor& v_hat, const NoiseSchedule& schedule);

// One deterministic DDIM update from t_from down to t_to using velocity v_hat.
Tensor ddim_step(const Tensor& z, double t_from, double t_to, const Tensor& v_hat,
                 const NoiseSchedule& schedule);

// Decreasing grid t_0 = t_max > ... > t_N = 0. The predictor is only evaluated
// at t_0 .. t_{N-1}, all inside the schedule clamps.
std::vector<double> sampling_grid(const NoiseSchedule& schedule, int n_steps, TimeGrid grid);

Tensor standard_normal(const Shape& shape, uint64_t seed);

Tensor sample(const VelocityPredictor& predictor, const ConditioningContext& context,
              const Shape& shape, int n_steps, const NoiseSchedule& schedule, uint64_t seed,
              TimeGrid grid = TimeGrid::UniformT);

// Same as sample but starting from a caller-provided Z_1.
Tensor sample_from(const VelocityPredictor& predictor, const ConditioningContext& context,
                   Tensor z1, int n_steps, const NoiseSchedule& schedule,
                   TimeGrid grid = TimeGrid::UniformT);

// Per-pixel statistics over ensemble members. std uses the population
// denominator (m).
struct EnsembleStats {
    Shape shape;
    std::vector<double> mean;
    std::vector<double> std;
    int members = 0;
    Tensor stack;  // [members, shape...]
};

EnsembleStats ensemble_stats(const Tensor& stack);

uint64_t member_seed(uint64_t seed, int member);

EnsembleStats ensemble(const VelocityPredictor& predictor, const ConditioningContext& context,
                       const Shape& shape, int n_steps, int m_members,
                       const NoiseSchedule& schedule, uint64_t seed,
                       TimeGrid grid = TimeGrid::UniformT);

} // namespace flexdiff
