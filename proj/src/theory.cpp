#include "flexdiff/theory.hpp"

#include "flexdiff/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace flexdiff {

namespace {

void require_clamped(double t, const NoiseSchedule& schedule) {
    require(t >= schedule.t_min() && t <= schedule.t_max(), ErrorKind::Domain,
            "t = " + std::to_string(t) + " lies outside the schedule clamps");
}

double mean_of(const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v;
    return s / static_cast<double>(x.size());
}

double sd_of(const std::vector<double>& x) {
    const double m = mean_of(x);
    double ss = 0.0;
    for (double v : x) ss += (v - m) * (v - m);
    return std::sqrt(ss / static_cast<double>(x.size()));
}

double quantile(std::vector<double> x, double q) {
    const size_t k = static_cast<size_t>(q * static_cast<double>(x.size() - 1));
    std::nth_element(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(k), x.end());
    return x[k];
}

} // namespace

double silverman_bandwidth(const std::vector<double>& samples) {
    require(samples.size() >= 2, ErrorKind::Estimator, "bandwidth needs at least 2 samples");
    const double sd = sd_of(samples);
    const double iqr = quantile(samples, 0.75) - quantile(samples, 0.25);
    double spread = sd;
    if (iqr > 0.0) spread = std::min(sd, iqr / 1.34);
    return 0.9 * spread * std::pow(static_cast<double>(samples.size()), -0.2);
}

double fisher_divergence_1d(const std::vector<double>& samples, double bandwidth) {
    require(samples.size() >= 100, ErrorKind::Estimator,
            "fisher_divergence_1d needs at least 100 samples, got " + std::to_string(samples.size()));
    for (double v : samples) {
        require(std::isfinite(v), ErrorKind::Estimator, "samples contain non-finite values");
    }
    const double sd = sd_of(samples);
    require(sd > 0.0, ErrorKind::Estimator, "samples have zero variance");
    const double h = bandwidth > 0.0 ? bandwidth : silverman_bandwidth(samples);
    require(h > 0.0, ErrorKind::Estimator, "KDE bandwidth must be positive");

    const auto [lo_it, hi_it] = std::minmax_element(samples.begin(), samples.end());
    const double lo = *lo_it - 6.0 * h, hi = *hi_it + 6.0 * h;
    // Bin width at most h/8, with the grid capped for very wide ranges.
    const int64_t m = std::clamp<int64_t>(static_cast<int64_t>(std::ceil((hi - lo) / (h / 8.0))) + 1,
                                          1024, int64_t{1} << 20);
    const double dx = (hi - lo) / static_cast<double>(m - 1);

    // Linear binning of the sample mass.
    std::vector<double> mass(static_cast<size_t>(m), 0.0);
    for (double v : samples) {
        const double pos = (v - lo) / dx;
        const auto i = std::min<int64_t>(static_cast<int64_t>(pos), m - 2);
        const double frac = pos - static_cast<double>(i);
        mass[static_cast<size_t>(i)] += 1.0 - frac;
        mass[static_cast<size_t>(i) + 1] += frac;
    }

    // Density and derivative on the grid (unnormalized; the score is a ratio).
    const auto half = static_cast<int64_t>(std::ceil(6.0 * h / dx));
    std::vector<double> k0(static_cast<size_t>(2 * half + 1)), k1(k0.size());
    for (int64_t j = -half; j <= half; ++j) {
        const double u = static_cast<double>(j) * dx / h;
        const double g = std::exp(-0.5 * u * u);
        k0[static_cast<size_t>(j + half)] = g;
        k1[static_cast<size_t>(j + half)] = -u / h * g;  // d/dx of the kernel at offset j
    }
    std::vector<double> dens(static_cast<size_t>(m), 0.0), ddens(static_cast<size_t>(m), 0.0);
    for (int64_t i = 0; i < m; ++i) {
        const double w = mass[static_cast<size_t>(i)];
        if (w == 0.0) continue;
        const int64_t a = std::max<int64_t>(0, i - half), b = std::min<int64_t>(m - 1, i + half);
        for (int64_t g = a; g <= b; ++g) {
            dens[static_cast<size_t>(g)] += w * k0[static_cast<size_t>(g - i + half)];
            ddens[static_cast<size_t>(g)] += w * k1[static_cast<size_t>(g - i + half)];
        }
    }

    double acc = 0.0;
    for (double v : samples) {
        const double pos = (v - lo) / dx;
        const auto i = std::min<int64_t>(static_cast<int64_t>(pos), m - 2);
        const double frac = pos - static_cast<double>(i);
        const double p = (1.0 - frac) * dens[static_cast<size_t>(i)] + frac * dens[static_cast<size_t>(i) + 1];
        const double dp = (1.0 - frac) * ddens[static_cast<size_t>(i)] + frac * ddens[static_cast<size_t>(i) + 1];
        const double score = dp / p;
        acc += (score + v) * (score + v);
    }
    return acc / static_cast<double>(samples.size());
}

double fisher_divergence_gaussian(double mean, double var) {
    require(var > 0.0, ErrorKind::Parameter, "variance must be > 0");
    const double a = 1.0 - 1.0 / var;
    return a * a * var + mean * mean;
}

double marginal_variance(double t, double prior_var, const NoiseSchedule& schedule) {
    const double alpha = schedule.alpha_sigma(t).first;
    return 1.0 + alpha * alpha * (prior_var - 1.0);
}

double optimal_velocity_gaussian(double t, double z, double prior_var, const NoiseSchedule& schedule) {
    require(prior_var > 0.0, ErrorKind::Parameter, "prior_var must be > 0");
    require_clamped(t, schedule);
    const auto [alpha, sigma] = schedule.alpha_sigma(t);
    const double v = marginal_variance(t, prior_var, schedule);
    // -(sigma/alpha)(z + score) with z + score = z (V - 1) / V and V - 1 = alpha^2 (p - 1).
    return -sigma * alpha * (prior_var - 1.0) * z / v;
}

namespace {

void finish(Prop1Report& report) {
    for (auto& row : report.rows) {
        row.discrepancy = row.rhs != 0.0 ? std::abs(row.lhs - row.rhs) / std::abs(row.rhs)
                                         : std::abs(row.lhs - row.rhs);
        report.max_discrepancy = std::max(report.max_discrepancy, row.discrepancy);
    }
}

double prop1_rhs(double t, double prior_var, const NoiseSchedule& schedule) {
    const auto [alpha, sigma] = schedule.alpha_sigma(t);
    const double excess = sigma * alpha * (prior_var - 1.0);
    return excess * excess / marginal_variance(t, prior_var, schedule);
}

} // namespace

Prop1Report prop1_check_analytic(double prior_var, const std::vector<double>& t_grid,
                                 const NoiseSchedule& schedule) {
    Prop1Report report;
    for (double t : t_grid) {
        require_clamped(t, schedule);
        const double v = marginal_variance(t, prior_var, schedule);
        const double sv = std::sqrt(v);
        // Composite Simpson over z = sqrt(V) u, u in [-14, 14].
        constexpr int n = 8000;
        const double a = -14.0, b = 14.0, du = (b - a) / n;
        double acc = 0.0;
        for (int i = 0; i <= n; ++i) {
            const double u = a + du * i;
            const double z = sv * u;
            const double vel = optimal_velocity_gaussian(t, z, prior_var, schedule);
            const double pdf = std::exp(-0.5 * u * u) / std::sqrt(2.0 * std::numbers::pi);
            const double w = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
            acc += w * vel * vel * pdf;
        }
        report.rows.push_back({t, acc * du / 3.0, prop1_rhs(t, prior_var, schedule), 0.0});
    }
    finish(report);
    return report;
}

Prop1Report prop1_check_monte_carlo(double prior_var, const std::vector<double>& t_grid,
                                    int n_samples, uint64_t seed, const NoiseSchedule& schedule) {
    require(n_samples >= 2, ErrorKind::Parameter, "Monte Carlo check needs samples");
    Prop1Report report;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double sd = std::sqrt(prior_var);
    for (double t : t_grid) {
        require_clamped(t, schedule);
        const auto [alpha, sigma] = schedule.alpha_sigma(t);
        double acc = 0.0;
        for (int i = 0; i < n_samples; ++i) {
            const double z = alpha * sd * normal(rng) + sigma * normal(rng);
            const double vel = optimal_velocity_gaussian(t, z, prior_var, schedule);
            acc += vel * vel;
        }
        report.rows.push_back({t, acc / n_samples, prop1_rhs(t, prior_var, schedule), 0.0});
    }
    finish(report);
    return report;
}

const char* to_string(FisherSource s) {
    switch (s) {
    case FisherSource::Raw: return "raw";
    case FisherSource::SrResidual: return "sr_residual";
    case FisherSource::FcResidual: return "fc_residual";
    }
    return "unknown";
}

FisherCurve fisher_curve(const std::vector<double>& samples, FisherSource source,
                         const std::vector<double>& t_grid, const NoiseSchedule& schedule,
                         uint64_t seed, double bandwidth) {
    require(samples.size() >= 5000, ErrorKind::Data,
            "fisher_curve needs at least 5000 scalar samples, got " + std::to_string(samples.size()));
    FisherCurve curve;
    curve.source = source;
    curve.t_grid = t_grid;
    curve.n_samples = static_cast<int64_t>(samples.size());
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> noised(samples.size());
    for (size_t k = 0; k < t_grid.size(); ++k) {
        const double t = t_grid[k];
        require_clamped(t, schedule);
        const auto [alpha, sigma] = schedule.alpha_sigma(t);
        for (size_t i = 0; i < samples.size(); ++i) noised[i] = alpha * samples[i] + sigma * normal(rng);
        const double h = bandwidth > 0.0 ? bandwidth : silverman_bandwidth(noised);
        if (k == 0) curve.kde_bandwidth = h;
        const double d = fisher_divergence_1d(noised, h);
        const double ratio = sigma / alpha;
        curve.d_f.push_back(d);
        curve.scaled.push_back(ratio * ratio * d);
    }
    std::vector<double> reference(samples.size());
    for (double& v : reference) v = normal(rng);
    curve.noise_floor = fisher_divergence_1d(reference, bandwidth);
    return curve;
}

HessianReport hessian_covariance_check(double prior_var, double t, const NoiseSchedule& schedule) {
    require(prior_var > 0.0, ErrorKind::Parameter, "prior_var must be > 0");
    require_clamped(t, schedule);
    const auto [alpha, sigma] = schedule.alpha_sigma(t);
    HessianReport r;
    r.t = t;
    r.prior_var = prior_var;
    r.marginal_var = marginal_variance(t, prior_var, schedule);
    r.true_hessian = -1.0 / r.marginal_var;
    r.posterior_cov = prior_var * sigma * sigma / r.marginal_var;
    const double s2 = sigma * sigma, s4 = s2 * s2;
    r.printed_hessian = alpha * alpha / s4 * r.posterior_cov;
    r.corrected_hessian = -1.0 / s2 + r.printed_hessian;
    r.identity_error = std::abs(r.true_hessian - r.corrected_hessian);
    // d v*/dz = -(sigma/alpha)(H + 1) with H the Hessian of log p_t.
    r.grad_v = std::abs((sigma / alpha) * (r.true_hessian + 1.0));
    r.first_bound = (sigma / alpha) * std::abs(r.true_hessian - (-1.0));
    r.bound = sigma / alpha + alpha / (s2 * sigma) * r.posterior_cov;
    r.bound_holds = r.bound >= r.grad_v;
    return r;
}

double top_eigen_covariance(const std::vector<double>& samples, int64_t n, int64_t d, double tol,
                            int max_iter) {
    require(n >= 2 && d >= 1 && static_cast<int64_t>(samples.size()) == n * d, ErrorKind::Shape,
            "top_eigen_covariance expects an N x d matrix with N >= 2");
    require(n > d, ErrorKind::Estimator, "sample covariance needs N > d");
    std::vector<double> mean(static_cast<size_t>(d), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += samples[static_cast<size_t>(i * d + j)];
    }
    for (double& m : mean) m /= static_cast<double>(n);
    std::vector<double> cov(static_cast<size_t>(d * d), 0.0), row(static_cast<size_t>(d));
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < d; ++j) row[static_cast<size_t>(j)] = samples[static_cast<size_t>(i * d + j)] - mean[static_cast<size_t>(j)];
        for (int64_t a = 0; a < d; ++a) {
            const double ra = row[static_cast<size_t>(a)];
            double* c = cov.data() + a * d;
            for (int64_t b = a; b < d; ++b) c[b] += ra * row[static_cast<size_t>(b)];
        }
    }
    for (int64_t a = 0; a < d; ++a) {
        for (int64_t b = a; b < d; ++b) {
            double& c = cov[static_cast<size_t>(a * d + b)];
            c /= static_cast<double>(n - 1);
            cov[static_cast<size_t>(b * d + a)] = c;
        }
    }

    std::vector<double> v(static_cast<size_t>(d), 1.0 / std::sqrt(static_cast<double>(d)));
    std::vector<double> w(static_cast<size_t>(d));
    double lambda = 0.0;
    for (int it = 0; it < max_iter; ++it) {
        for (int64_t a = 0; a < d; ++a) {
            double s = 0.0;
            for (int64_t b = 0; b < d; ++b) s += cov[static_cast<size_t>(a * d + b)] * v[static_cast<size_t>(b)];
            w[static_cast<size_t>(a)] = s;
        }
        double rq = 0.0, norm = 0.0;
        for (int64_t a = 0; a < d; ++a) {
            rq += v[static_cast<size_t>(a)] * w[static_cast<size_t>(a)];
            norm += w[static_cast<size_t>(a)] * w[static_cast<size_t>(a)];
        }
        norm = std::sqrt(norm);
        if (norm == 0.0) return 0.0;
        for (int64_t a = 0; a < d; ++a) v[static_cast<size_t>(a)] = w[static_cast<size_t>(a)] / norm;
        if (it > 0 && std::abs(rq - lambda) <= tol * std::abs(rq)) return rq;
        lambda = rq;
    }
    fail(ErrorKind::Iteration, "power iteration did not converge in " + std::to_string(max_iter) +
                                   " iterations");
}

} // namespace flexdiff
