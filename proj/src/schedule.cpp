#include "flexdiff/schedule.hpp"

#include "flexdiff/error.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace flexdiff {

namespace {
constexpr double kHalfPi = std::numbers::pi / 2.0;
}

NoiseSchedule::NoiseSchedule(ScheduleKind kind, double t_min, double t_max)
    : kind_(kind), t_min_(t_min), t_max_(t_max) {
    require(t_min > 0.0 && t_min < 0.5, ErrorKind::Config, "schedule t_min must lie in (0, 0.5)");
    require(t_max > 0.5 && t_max < 1.0, ErrorKind::Config, "schedule t_max must lie in (0.5, 1)");
}

std::pair<double, double> NoiseSchedule::alpha_sigma(double t) const {
    if (!(t >= 0.0 && t <= 1.0)) {
        fail(ErrorKind::Domain, "diffusion time " + std::to_string(t) + " outside [0, 1]");
    }
    // Exact endpoints; cos(pi/2) is not exactly zero in floating point.
    if (t == 0.0) return {1.0, 0.0};
    if (t == 1.0) return {0.0, 1.0};
    return {std::cos(kHalfPi * t), std::sin(kHalfPi * t)};
}

void NoiseSchedule::check_clamped(double t, const char* what) const {
    if (!(t >= t_min_ && t <= t_max_)) {
        fail(ErrorKind::Domain, std::string(what) + ": t=" + std::to_string(t) +
                                    " outside clamps [" + std::to_string(t_min_) + ", " +
                                    std::to_string(t_max_) + "]");
    }
}

double NoiseSchedule::log_snr(double t) const {
    check_clamped(t, "log_snr");
    return -2.0 * std::log(std::tan(kHalfPi * t));
}

DriftCoeffs NoiseSchedule::drift_coeffs(double t) const {
    check_clamped(t, "drift_coeffs");
    const double tan_t = std::tan(kHalfPi * t);
    return {-kHalfPi * tan_t, std::numbers::pi * tan_t};
}

double NoiseSchedule::t_from_log_snr(double lambda) const {
    return std::atan(std::exp(-0.5 * lambda)) / kHalfPi;
}

} // namespace flexdiff
