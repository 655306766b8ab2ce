#include <doctest.h>

#include "flexdiff/diffusion.hpp"
#include "flexdiff/error.hpp"

#include <cmath>
#include <random>

using namespace flexdiff;

namespace {

const NoiseSchedule kSched(ScheduleKind::Cosine, 1e-3, 1.0 - 1e-3);

Tensor randn(const Shape& s, uint64_t seed) { return standard_normal(s, seed); }

ConditioningContext sr_ctx(const Shape& s) {
    ConditioningContext c;
    c.task = Task::SR;
    c.snapshots.push_back(Tensor(s));
    c.upsample_factor = 4;
    return c;
}

// Velocity implied by the noisy state and a known clean residual.
VelocityPredictor oracle(const Tensor& r) {
    return [r](double t, const Tensor& z, const ConditioningContext&) {
        auto [a, s] = kSched.alpha_sigma(t);
        Tensor v(z.shape());
        for (int64_t i = 0; i < z.numel(); ++i) {
            const double eps = (z[i] - a * r[i]) / s;
            v[i] = static_cast<float>(a * eps - s * r[i]);
        }
        return v;
    };
}

}  // namespace

TEST_CASE("forward_perturb endpoints and a hand example") {
    Tensor r({2}, {2.0f, 0.0f}), eps({2}, {0.0f, 2.0f});
    auto z0 = forward_perturb(r, 0.0, eps, kSched);
    CHECK(max_abs_diff(z0.z, r) == 0.0f);
    auto z1 = forward_perturb(r, 1.0, eps, kSched);
    CHECK(max_abs_diff(z1.z, eps) < 1e-7f);
    auto zh = forward_perturb(r, 0.5, eps, kSched);
    CHECK(zh.z[0] == doctest::Approx(std::sqrt(2.0)).epsilon(1e-6));
    CHECK(zh.z[1] == doctest::Approx(std::sqrt(2.0)).epsilon(1e-6));
    CHECK(zh.t == 0.5);
}

TEST_CASE("forward_perturb shape mismatch") {
    CHECK_THROWS_AS(forward_perturb(Tensor({3}), 0.3, Tensor({4}), kSched), Error);
}

TEST_CASE("velocity_target endpoints") {
    Tensor r = randn({8, 8}, 1), eps = randn({8, 8}, 2);
    CHECK(max_abs_diff(velocity_target(r, 0.0, eps, kSched), eps) == 0.0f);
    Tensor neg_r(r.shape());
    for (int64_t i = 0; i < r.numel(); ++i) neg_r[i] = -r[i];
    CHECK(max_abs_diff(velocity_target(r, 1.0, eps, kSched), neg_r) < 1e-6f);
}

TEST_CASE("reconstruction identity alpha z - sigma v = r") {
    Tensor r = randn({16, 16}, 3), eps = randn({16, 16}, 4);
    for (double t : {0.0, 0.1, 0.37, 0.5, 0.81, 1.0}) {
        auto z = forward_perturb(r, t, eps, kSched).z;
        auto v = velocity_target(r, t, eps, kSched);
        CHECK(max_abs_diff(predict_clean(z, t, v, kSched), r) < 1e-6f);
    }
}

TEST_CASE("ddim_step single oracle step from t=1 lands on r") {
    Tensor r = randn({8, 8}, 5), eps = randn({8, 8}, 6);
    auto z = forward_perturb(r, 1.0, eps, kSched).z;
    auto v = velocity_target(r, 1.0, eps, kSched);
    CHECK(max_abs_diff(ddim_step(z, 1.0, 0.0, v, kSched), r) < 1e-6f);
}

TEST_CASE("ddim_step with zero velocity") {
    Tensor z = randn({4, 4}, 7);
    Tensor v(z.shape());
    const double t_to = 0.2;
    auto out = ddim_step(z, 0.5, t_to, v, kSched);
    auto [a, s] = kSched.alpha_sigma(0.5);
    auto [a2, s2] = kSched.alpha_sigma(t_to);
    for (int64_t i = 0; i < z.numel(); ++i)
        CHECK(out[i] == doctest::Approx((a2 * a + s2 * s) * z[i]).epsilon(1e-6));
}

TEST_CASE("ddim_step ordering error") {
    Tensor z({4});
    try {
        ddim_step(z, 0.3, 0.3, z, kSched);
        FAIL("expected ordering error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Ordering);
    }
}

TEST_CASE("sampling grid runs from t_max to 0") {
    for (auto g : {TimeGrid::UniformT, TimeGrid::UniformLogSnr}) {
        auto grid = sampling_grid(kSched, 4, g);
        REQUIRE(grid.size() == 5);
        CHECK(grid.front() == kSched.t_max());
        CHECK(grid.back() == 0.0);
        for (size_t i = 1; i < grid.size(); ++i) CHECK(grid[i] < grid[i - 1]);
        for (size_t i = 0; i + 1 < grid.size(); ++i) CHECK(grid[i] >= kSched.t_min());
    }
    CHECK_THROWS_AS(sampling_grid(kSched, 0, TimeGrid::UniformT), Error);
}

TEST_CASE("DDIM with exact velocities recovers r") {
    Tensor r = randn({64, 64}, 11);
    auto pred = oracle(r);
    for (auto g : {TimeGrid::UniformT, TimeGrid::UniformLogSnr}) {
        for (int n : {1, 2, 10, 50}) {
            auto out = sample(pred, sr_ctx(r.shape()), r.shape(), n, kSched, 99, g);
            CHECK(max_abs_diff(out, r) < 1e-6f);
        }
    }
}

TEST_CASE("sample is deterministic under a fixed seed") {
    VelocityPredictor pred = [](double t, const Tensor& z, const ConditioningContext&) {
        Tensor v(z.shape());
        for (int64_t i = 0; i < z.numel(); ++i) v[i] = static_cast<float>(std::sin(z[i]) * t);
        return v;
    };
    auto a = sample(pred, sr_ctx({16, 16}), {16, 16}, 2, kSched, 42);
    auto b = sample(pred, sr_ctx({16, 16}), {16, 16}, 2, kSched, 42);
    CHECK(a.storage() == b.storage());
    auto c = sample(pred, sr_ctx({16, 16}), {16, 16}, 2, kSched, 43);
    CHECK(a.storage() != c.storage());
}

TEST_CASE("sample propagates a predictor shape error") {
    VelocityPredictor bad = [](double, const Tensor&, const ConditioningContext&) { return Tensor({3}); };
    CHECK_THROWS_AS(sample(bad, sr_ctx({8, 8}), {8, 8}, 2, kSched, 0), Error);
}

TEST_CASE("ensemble of a z-independent predictor has zero spread") {
    Tensor r = randn({8, 8}, 12);
    VelocityPredictor pred = [&](double t, const Tensor& z, const ConditioningContext&) {
        return oracle(r)(t, z, {});
    };
    auto e = ensemble(pred, sr_ctx(r.shape()), r.shape(), 2, 5, kSched, 3);
    CHECK(e.members == 5);
    for (size_t i = 0; i < e.std.size(); ++i) CHECK(e.std[i] < 1e-6);
    CHECK_THROWS_AS(ensemble(pred, sr_ctx(r.shape()), r.shape(), 2, 1, kSched, 3), Error);
}

TEST_CASE("member seeds are distinct") {
    for (int i = 0; i < 10; ++i)
        for (int j = i + 1; j < 10; ++j) CHECK(member_seed(7, i) != member_seed(7, j));
}

TEST_CASE("ensemble stats equal a streaming recomputation") {
    const int m = 40;
    const int64_t n = 500;
    Tensor stack({m, n});
    std::mt19937_64 rng(5);
    std::normal_distribution<float> nd(1.0f, 3.0f);
    for (auto& v : stack.storage()) v = nd(rng);
    auto st = ensemble_stats(stack);
    CHECK(st.members == m);
    for (int64_t p = 0; p < n; ++p) {
        double mean = 0.0, m2 = 0.0;
        for (int k = 0; k < m; ++k) {
            const double x = stack[k * n + p];
            const double d = x - mean;
            mean += d / (k + 1);
            m2 += d * (x - mean);
        }
        CHECK(std::abs(st.mean[p] - mean) < 1e-10);
        CHECK(std::abs(st.std[p] - std::sqrt(m2 / m)) < 1e-10);
    }
}

TEST_CASE("synthetic Gaussian ensemble std converges to sigma") {
    const int m = 1000;
    const int64_t n = 50;
    const double sigma = 0.7;
    Tensor stack({m, n});
    std::mt19937_64 rng(9);
    std::normal_distribution<double> nd(0.0, sigma);
    for (auto& v : stack.storage()) v = static_cast<float>(2.0 + nd(rng));
    auto st = ensemble_stats(stack);
    for (int64_t p = 0; p < n; ++p) CHECK(std::abs(st.std[p] / sigma - 1.0) < 0.1);
}
