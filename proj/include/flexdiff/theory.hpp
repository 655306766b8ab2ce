#pragma once

#include "flexdiff/schedule.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace flexdiff {

// Silverman's rule 0.9 min(sd, IQR/1.34) N^(-1/5).
double silverman_bandwidth(const std::vector<double>& samples);

// Monte Carlo estimate of D_F(p || N(0,1)) = E_p[(d/dx log p + x)^2] with the
// score taken from a Gaussian KDE of the samples (evaluated on a binned grid).
// bandwidth <= 0 selects Silverman's rule.
double fisher_divergence_1d(const std::vector<double>& samples, double bandwidth = 0.0);

// Closed form D_F(N(mu, var) || N(0,1)) = (1 - 1/var)^2 var + mu^2.
double fisher_divergence_gaussian(double mean, double var);

// v*(t, z) = -(sigma/alpha)(z + d/dz log p_t(z)) for R ~ N(0, prior_var).
double optimal_velocity_gaussian(double t, double z, double prior_var, const NoiseSchedule& schedule);

// Marginal variance alpha^2 prior_var + sigma^2 of Z_t.
double marginal_variance(double t, double prior_var, const NoiseSchedule& schedule);

struct Prop1Row {
    double t = 0.0;
    double lhs = 0.0;  // E_{p_t} |v*|^2
    double rhs = 0.0;  // (sigma/alpha)^2 D_F(p_t || N(0,1))
    double discrepancy = 0.0;  // relative, or absolute when rhs == 0
};

struct Prop1Report {
    std::vector<Prop1Row> rows;
    double max_discrepancy = 0.0;
};

// LHS by deterministic quadrature of v*^2 against p_t, RHS in closed form.
Prop1Report prop1_check_analytic(double prior_var, const std::vector<double>& t_grid,
                                 const NoiseSchedule& schedule);
// LHS by Monte Carlo over (R, eps), RHS in closed form.
Prop1Report prop1_check_monte_carlo(double prior_var, const std::vector<double>& t_grid,
                                    int n_samples, uint64_t seed, const NoiseSchedule& schedule);

enum class FisherSource { Raw, SrResidual, FcResidual };
const char* to_string(FisherSource s);

struct FisherCurve {
    std::vector<double> t_grid;
    std::vector<double> d_f;
    std::vector<double> scaled;  // tan^2(pi t/2) d_f
    FisherSource source = FisherSource::Raw;
    int64_t n_samples = 0;
    double kde_bandwidth = 0.0;  // bandwidth at the first grid point
    // D_F estimate for pure N(0,1) samples of the same size; values below it
    // are indistinguishable from zero.
    double noise_floor = 0.0;
};

// Per-scalar curve: samples are flattened pixel values already in model units.
FisherCurve fisher_curve(const std::vector<double>& samples, FisherSource source,
                         const std::vector<double>& t_grid, const NoiseSchedule& schedule,
                         uint64_t seed, double bandwidth = 0.0);

struct HessianReport {
    double t = 0.0;
    double prior_var = 0.0;
    double marginal_var = 0.0;
    double true_hessian = 0.0;       // d^2/dz^2 log p_t = -1/V
    double posterior_cov = 0.0;      // Cov_t(Z0, Z0) = prior_var sigma^2 / V
    double corrected_hessian = 0.0;  // -1/sigma^2 + (alpha^2/sigma^4) Cov_t
    double printed_hessian = 0.0;    // (alpha^2/sigma^4) Cov_t as stated without the -1/sigma^2 term
    double identity_error = 0.0;     // |true - corrected|
    double grad_v = 0.0;             // |d v*/dz|
    double first_bound = 0.0;        // (sigma/alpha) |H_true - H_ref|
    double bound = 0.0;              // sigma/alpha + (alpha/sigma^3) lambda_max(Cov_t)
    bool bound_holds = false;
};

HessianReport hessian_covariance_check(double prior_var, double t, const NoiseSchedule& schedule);

// Largest eigenvalue of the sample covariance of an N x d row-major matrix by
// power iteration. Throws ErrorKind::Iteration without convergence.
double top_eigen_covariance(const std::vector<double>& samples, int64_t n, int64_t d,
                            double tol = 1e-8, int max_iter = 100000);

} // namespace flexdiff
