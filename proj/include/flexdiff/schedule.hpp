#pragma once

#include <utility>

namespace flexdiff {

enum class ScheduleKind { Cosine };

struct DriftCoeffs {
    double f;   // d log alpha / dt
    double g2;  // squared diffusion coefficient of the forward SDE
};

// Variance-preserving cosine noise schedule: alpha = cos(pi t/2), sigma = sin(pi t/2).
// The clamps keep every coefficient finite; log-SNR and the SDE coefficients
// diverge at t = 0 and t = 1.
class NoiseSchedule {
public:
    NoiseSchedule() = default;
    NoiseSchedule(ScheduleKind kind, double t_min, double t_max);

    ScheduleKind kind() const noexcept { return kind_; }
    double t_min() const noexcept { return t_min_; }
    double t_max() const noexcept { return t_max_; }

    // Valid on the closed interval [0, 1].
    std::pair<double, double> alpha_sigma(double t) const;
    double alpha(double t) const { return alpha_sigma(t).first; }
    double sigma(double t) const { return alpha_sigma(t).second; }

    // Valid on [t_min, t_max].
    double log_snr(double t) const;
    DriftCoeffs drift_coeffs(double t) const;

    // Inverse of log_snr, used by the uniform-lambda sampling grid.
    double t_from_log_snr(double lambda) const;

private:
    void check_clamped(double t, const char* what) const;

    ScheduleKind kind_ = ScheduleKind::Cosine;
    double t_min_ = 1e-3;
    double t_max_ = 1.0 - 1e-3;
};

} // namespace flexdiff
