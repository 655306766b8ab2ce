#include <doctest.h>

#include "flexdiff/error.hpp"
#include "flexdiff/theory.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

using namespace flexdiff;

namespace {

const NoiseSchedule kSched(ScheduleKind::Cosine, 1e-3, 1.0 - 1e-3);

std::vector<double> gaussian(size_t n, double mean, double sd, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(mean, sd);
    std::vector<double> x(n);
    for (auto& v : x) v = nd(rng);
    return x;
}

// E_{N(mu,var)} (score + x)^2 by trapezoid quadrature.
double fisher_quadrature(double mu, double var) {
    const double sd = std::sqrt(var);
    const int n = 20000;
    const double a = mu - 12 * sd, b = mu + 12 * sd, dx = (b - a) / n;
    double acc = 0.0;
    for (int i = 0; i <= n; ++i) {
        const double x = a + i * dx;
        const double pdf = std::exp(-0.5 * (x - mu) * (x - mu) / var) / std::sqrt(2 * std::numbers::pi * var);
        const double s = -(x - mu) / var + x;
        acc += (i == 0 || i == n ? 0.5 : 1.0) * s * s * pdf;
    }
    return acc * dx;
}

}  // namespace

TEST_CASE("gaussian fisher divergence closed form") {
    CHECK(fisher_divergence_gaussian(0.0, 1.0) == 0.0);
    for (double mu : {0.0, 0.7, -1.5})
        for (double var : {0.25, 1.0, 3.0}) CHECK(fisher_divergence_gaussian(mu, var) == doctest::Approx(fisher_quadrature(mu, var)).epsilon(1e-8));
    CHECK_THROWS_AS(fisher_divergence_gaussian(0.0, 0.0), Error);
}

TEST_CASE("silverman bandwidth") {
    std::vector<double> x{1, 2, 3, 4, 5, 6, 7, 8};
    // sd = sqrt(5.25), IQR from nearest-rank quartiles x[1] and x[5]
    const double sd = std::sqrt(5.25), iqr = 6.0 - 2.0;
    CHECK(silverman_bandwidth(x) == doctest::Approx(0.9 * std::min(sd, iqr / 1.34) * std::pow(8.0, -0.2)));
    CHECK_THROWS_AS(silverman_bandwidth({1.0}), Error);
}

TEST_CASE("kde fisher estimate against closed forms") {
    const auto unit = gaussian(100000, 0.0, 1.0, 1);
    CHECK(fisher_divergence_1d(unit) < 0.03);
    const auto wide = gaussian(100000, 0.0, std::sqrt(2.0), 2);
    CHECK(fisher_divergence_1d(wide) == doctest::Approx(0.5).epsilon(0.1));
    const auto shifted = gaussian(100000, 1.0, 1.0, 3);
    CHECK(fisher_divergence_1d(shifted) == doctest::Approx(1.0).epsilon(0.1));

    try {
        fisher_divergence_1d(std::vector<double>(50, 1.0));
        FAIL("expected estimator error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Estimator);
    }
    CHECK_THROWS_AS(fisher_divergence_1d(std::vector<double>(200, 1.0)), Error);
    auto bad = unit;
    bad[4] = NAN;
    CHECK_THROWS_AS(fisher_divergence_1d(bad), Error);
}

TEST_CASE("optimal gaussian velocity matches the posterior-mean form") {
    for (double p : {0.3, 1.0, 4.0})
        for (double t : {0.05, 0.3, 0.5, 0.9})
            for (double z : {-2.0, 0.1, 1.3}) {
                auto [a, s] = kSched.alpha_sigma(t);
                const double V = a * a * p + s * s;
                const double r_hat = a * p * z / V;
                const double eps_hat = (z - a * r_hat) / s;
                CHECK(optimal_velocity_gaussian(t, z, p, kSched) == doctest::Approx(a * eps_hat - s * r_hat).epsilon(1e-12));
            }
    try {
        optimal_velocity_gaussian(1.0, 0.0, 1.0, kSched);
        FAIL("expected domain error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Domain);
    }
    CHECK(optimal_velocity_gaussian(0.5, 2.0, 1.0, kSched) == doctest::Approx(0.0));
}

TEST_CASE("proposition identity, analytic and monte carlo") {
    const std::vector<double> ts{0.1, 0.3, 0.5, 0.7, 0.9};
    for (double p : {0.25, 1.0, 4.0}) {
        auto an = prop1_check_analytic(p, ts, kSched);
        CHECK(an.rows.size() == ts.size());
        CHECK(an.max_discrepancy < 1e-10);
        auto mc = prop1_check_monte_carlo(p, ts, 100000, 7, kSched);
        CHECK(mc.max_discrepancy < 0.02);
    }
    auto unit = prop1_check_analytic(1.0, ts, kSched);
    for (const auto& row : unit.rows) CHECK(row.rhs == 0.0);
    CHECK_THROWS_AS(prop1_check_analytic(1.0, {0.0}, kSched), Error);
}

TEST_CASE("hessian covariance identity and gradient bound") {
    int holds = 0;
    for (double p : {0.25, 1.0, 4.0})
        for (double t : {0.01, 0.1, 0.2, 0.3, 0.5, 0.7, 0.8, 0.9, 0.99}) {
            auto r = hessian_covariance_check(p, t, kSched);
            CHECK(r.identity_error < 1e-10);
            const double h = 1e-4;
            const double fd = (optimal_velocity_gaussian(t, h, p, kSched) - optimal_velocity_gaussian(t, -h, p, kSched)) / (2 * h);
            CHECK(r.grad_v == doctest::Approx(std::abs(fd)).epsilon(1e-6));
            CHECK(r.first_bound >= r.grad_v - 1e-12);
            holds += r.bound_holds;
            // The uncorrected form misses -1/sigma^2.
            if (p != 1.0) CHECK(std::abs(r.printed_hessian - r.true_hessian) > 1e-6);
        }
    CHECK(holds == 27);
}

TEST_CASE("fisher curve on gaussian samples") {
    const auto x = gaussian(20000, 0.0, 2.0, 4);
    const std::vector<double> ts{0.05, 0.3, 0.6};
    auto c = fisher_curve(x, FisherSource::Raw, ts, kSched, 5);
    REQUIRE(c.d_f.size() == 3);
    for (size_t k = 0; k < ts.size(); ++k) {
        const double V = marginal_variance(ts[k], 4.0, kSched);
        CHECK(c.d_f[k] == doctest::Approx(fisher_divergence_gaussian(0.0, V)).epsilon(0.15));
        auto [a, s] = kSched.alpha_sigma(ts[k]);
        CHECK(c.scaled[k] == doctest::Approx(c.d_f[k] * s * s / (a * a)));
    }
    CHECK(c.d_f[0] > c.d_f[1]);
    CHECK(c.d_f[1] > c.d_f[2]);
    CHECK(c.noise_floor < 0.05);
    CHECK(c.kde_bandwidth > 0.0);
    CHECK(std::string(to_string(c.source)) == "raw");
    try {
        fisher_curve(gaussian(1000, 0, 1, 1), FisherSource::Raw, ts, kSched, 1);
        FAIL("expected data error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Data);
    }
}

TEST_CASE("top covariance eigenvalue") {
    // 2-D closed form against the sample covariance.
    std::mt19937_64 rng(9);
    std::normal_distribution<double> nd;
    const int64_t n = 5000;
    std::vector<double> xy(2 * n);
    for (int64_t i = 0; i < n; ++i) {
        const double u = nd(rng), v = nd(rng);
        xy[2 * i] = 2 * u + 0.5 * v;
        xy[2 * i + 1] = 0.3 * u - v;
    }
    double mx = 0, my = 0;
    for (int64_t i = 0; i < n; ++i) {
        mx += xy[2 * i];
        my += xy[2 * i + 1];
    }
    mx /= n;
    my /= n;
    double a = 0, b = 0, c = 0;
    for (int64_t i = 0; i < n; ++i) {
        const double dx = xy[2 * i] - mx, dy = xy[2 * i + 1] - my;
        a += dx * dx;
        b += dx * dy;
        c += dy * dy;
    }
    a /= n - 1;
    b /= n - 1;
    c /= n - 1;
    const double lam = 0.5 * (a + c) + std::sqrt(0.25 * (a - c) * (a - c) + b * b);
    CHECK(top_eigen_covariance(xy, n, 2) == doctest::Approx(lam).epsilon(1e-7));

    std::vector<double> diag(3 * 20000);
    for (size_t i = 0; i < diag.size(); i += 3) {
        diag[i] = 0.5 * nd(rng);
        diag[i + 1] = 3 * nd(rng);
        diag[i + 2] = nd(rng);
    }
    CHECK(top_eigen_covariance(diag, 20000, 3) == doctest::Approx(9.0).epsilon(0.05));
    CHECK_THROWS_AS(top_eigen_covariance(diag, 20000, 4), Error);
    CHECK_THROWS_AS(top_eigen_covariance(std::vector<double>(9, 1.0), 3, 3), Error);
    try {
        top_eigen_covariance(xy, n, 2, 0.0, 3);
        FAIL("expected iteration error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Iteration);
    }
}
