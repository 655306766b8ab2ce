#include "flexdiff/diffusion.hpp"

#include "flexdiff/error.hpp"

#include <cmath>
#include <random>

namespace flexdiff {

namespace {

// out = a*x + b*y elementwise, coefficients in double.
Tensor combine(double a, const Tensor& x, double b, const Tensor& y) {
    Tensor out(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        out[i] = static_cast<float>(a * x[i] + b * y[i]);
    }
    return out;
}

} // namespace

NoisedSample forward_perturb(const Tensor& r, double t, const Tensor& eps,
                             const NoiseSchedule& schedule) {
    check_same_shape(r, eps, "forward_perturb");
    const auto [alpha, sigma] = schedule.alpha_sigma(t);
    return {combine(alpha, r, sigma, eps), t, eps};
}

Tensor velocity_target(const Tensor& r, double t, const Tensor& eps,
                       const NoiseSchedule& schedule) {
    check_same_shape(r, eps, "velocity_target");
    const auto [alpha, sigma] = schedule.alpha_sigma(t);
    return combine(alpha, eps, -sigma, r);
}

Tensor predict_clean(const Tensor& z, double t, const Tensor& v_hat,
                     const NoiseSchedule& schedule) {
    check_same_shape(z, v_hat, "predict_clean");
    const auto [alpha, sigma] = schedule.alpha_sigma(t);
    return combine(alpha, z, -sigma, v_hat);
}

Tensor ddim_step(const Tensor& z, double t_from, double t_to, const Tensor& v_hat,
                 const NoiseSchedule& schedule) {
    check_same_shape(z, v_hat, "ddim_step");
    if (!(t_to < t_from)) {
        fail(ErrorKind::Ordering, "ddim_step requires t_to < t_from (got " +
                                      std::to_string(t_to) + " >= " + std::to_string(t_from) + ")");
    }
    const auto [a_from, s_from] = schedule.alpha_sigma(t_from);
    const auto [a_to, s_to] = schedule.alpha_sigma(t_to);
    Tensor out(z.shape());
    for (int64_t i = 0; i < z.numel(); ++i) {
        const double mean = a_from * z[i] - s_from * v_hat[i];
        const double eps = a_from * v_hat[i] + s_from * z[i];
        out[i] = static_cast<float>(a_to * mean + s_to * eps);
    }
    return out;
}

std::vector<double> sampling_grid(const NoiseSchedule& schedule, int n_steps, TimeGrid grid) {
    require(n_steps >= 1, ErrorKind::Parameter, "n_steps must be >= 1");
    std::vector<double> ts(static_cast<size_t>(n_steps) + 1);
    const double t_max = schedule.t_max();
    if (grid == TimeGrid::UniformT) {
        for (int i = 0; i <= n_steps; ++i) {
            ts[static_cast<size_t>(i)] = t_max * (1.0 - static_cast<double>(i) / n_steps);
        }
    } else {
        const double l0 = schedule.log_snr(t_max);
        const double l1 = schedule.log_snr(schedule.t_min());
        for (int i = 0; i < n_steps; ++i) {
            ts[static_cast<size_t>(i)] =
                schedule.t_from_log_snr(l0 + (l1 - l0) * static_cast<double>(i) / n_steps);
        }
        ts[0] = t_max;
    }
    ts.back() = 0.0;
    return ts;
}

Tensor standard_normal(const Shape& shape, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    Tensor out(shape);
    for (auto& v : out.values()) v = normal(rng);
    return out;
}

Tensor sample_from(const VelocityPredictor& predictor, const ConditioningContext& context,
                   Tensor z, int n_steps, const NoiseSchedule& schedule, TimeGrid grid) {
    const std::vector<double> ts = sampling_grid(schedule, n_steps, grid);
    for (int i = 0; i < n_steps; ++i) {
        const double t_from = ts[static_cast<size_t>(i)];
        const double t_to = ts[static_cast<size_t>(i) + 1];
        Tensor v_hat = predictor(t_from, z, context);
        if (!v_hat.same_shape(z)) {
            fail(ErrorKind::Shape, "predictor returned " + shape_str(v_hat.shape()) +
                                       " for input " + shape_str(z.shape()));
        }
        z = ddim_step(z, t_from, t_to, v_hat, schedule);
    }
    return z;
}

Tensor sample(const VelocityPredictor& predictor, const ConditioningContext& context,
              const Shape& shape, int n_steps, const NoiseSchedule& schedule, uint64_t seed,
              TimeGrid grid) {
    require(n_steps >= 1, ErrorKind::Parameter, "n_steps must be >= 1");
    return sample_from(predictor, context, standard_normal(shape, seed), n_steps, schedule, grid);
}

EnsembleStats ensemble_stats(const Tensor& stack) {
    require(stack.rank() >= 2, ErrorKind::Shape, "ensemble stack needs a member axis");
    const int64_t m = stack.dim(0);
    require(m >= 2, ErrorKind::Parameter, "ensemble statistics need at least 2 members");
    EnsembleStats stats;
    stats.shape.assign(stack.shape().begin() + 1, stack.shape().end());
    const int64_t n = stack.numel() / m;
    stats.members = static_cast<int>(m);
    stats.mean.assign(static_cast<size_t>(n), 0.0);
    stats.std.assign(static_cast<size_t>(n), 0.0);
    for (int64_t k = 0; k < m; ++k) {
        for (int64_t i = 0; i < n; ++i) stats.mean[static_cast<size_t>(i)] += stack[k * n + i];
    }
    for (auto& v : stats.mean) v /= static_cast<double>(m);
    for (int64_t k = 0; k < m; ++k) {
        for (int64_t i = 0; i < n; ++i) {
            const double d = stack[k * n + i] - stats.mean[static_cast<size_t>(i)];
            stats.std[static_cast<size_t>(i)] += d * d;
        }
    }
    for (auto& v : stats.std) v = std::sqrt(v / static_cast<double>(m));
    stats.stack = stack;
    return stats;
}

uint64_t member_seed(uint64_t seed, int member) { return seed ^ static_cast<uint64_t>(member); }

EnsembleStats ensemble(const VelocityPredictor& predictor, const ConditioningContext& context,
                       const Shape& shape, int n_steps, int m_members,
                       const NoiseSchedule& schedule, uint64_t seed, TimeGrid grid) {
    require(m_members >= 2, ErrorKind::Parameter, "ensemble needs m_members >= 2");
    Shape stack_shape{m_members};
    stack_shape.insert(stack_shape.end(), shape.begin(), shape.end());
    Tensor stack(stack_shape);
    const int64_t n = shape_numel(shape);
    for (int k = 0; k < m_members; ++k) {
        Tensor member =
            sample(predictor, context, shape, n_steps, schedule, member_seed(seed, k), grid);
        std::copy(member.data(), member.data() + n, stack.data() + k * n);
    }
    return ensemble_stats(stack);
}

} // namespace flexdiff
