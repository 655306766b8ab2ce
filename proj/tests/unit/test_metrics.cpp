#include <doctest.h>

#include "flexdiff/error.hpp"
#include "flexdiff/metrics.hpp"

#include <cmath>
#include <numbers>
#include <random>

using namespace flexdiff;

namespace {

const NoiseSchedule kSched(ScheduleKind::Cosine, 1e-3, 1.0 - 1e-3);

Tensor field(uint64_t seed) { return lowpass(standard_normal({32, 32}, seed), 6); }

// Predictor whose sample is exactly `target`: v = a*eps_implied - s*target.
VelocityPredictor oracle(const Tensor& target) {
    return [target](double t, const Tensor& z, const ConditioningContext&) {
        auto [a, s] = kSched.alpha_sigma(t);
        Tensor v(z.shape());
        for (int64_t i = 0; i < z.numel(); ++i) {
            const double eps = (z[i] - a * target[i]) / s;
            v[i] = static_cast<float>(a * eps - s * target[i]);
        }
        return v;
    };
}

}  // namespace

TEST_CASE("rfne and pcc") {
    Tensor a = field(1), b = field(2);
    CHECK(rfne(a, a) == 0.0);
    Tensor twice(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) twice[i] = 2 * a[i];
    CHECK(rfne(twice, a) == doctest::Approx(1.0));
    CHECK(rfne(a, twice) == doctest::Approx(0.5));
    CHECK(pcc(a, a) == doctest::Approx(1.0));
    CHECK(pcc(twice, a) == doctest::Approx(1.0));
    Tensor neg(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) neg[i] = 3.0f - a[i];
    CHECK(pcc(neg, a) == doctest::Approx(-1.0));
    CHECK(pcc(a, b) == doctest::Approx(pcc(b, a)));
    CHECK(std::abs(pcc(a, b)) < 1.0);
    try {
        rfne(a, Tensor(a.shape()));
        FAIL("expected undefined metric");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::UndefinedMetric);
    }
    CHECK_THROWS_AS(pcc(a, Tensor(a.shape(), 1.0f)), Error);
    CHECK_THROWS_AS(rfne(a, Tensor({4, 4})), Error);
}

TEST_CASE("spectrum of a single mode and parseval") {
    const int n = 32;
    Tensor w({n, n});
    const double h = 2 * std::numbers::pi / n;
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) w[y * n + x] = static_cast<float>(std::cos(3 * x * h + 4 * y * h));
    auto s = vorticity_spectrum(w);
    REQUIRE(s.energy.size() == 16);
    CHECK(s.k_centers.front() == 1.0);
    for (size_t k = 0; k < s.energy.size(); ++k) {
        if (k == 4) CHECK(s.energy[k] > 0.0);
        else CHECK(s.energy[k] == doctest::Approx(0.0).epsilon(1e-12));
    }
    // Two modes (+-k) with |w_hat| = n^2 / 2 each: 2 pi (n^4/4) / (n^4 * 5).
    CHECK(s.energy[4] == doctest::Approx(2 * std::numbers::pi / 4 / 5).epsilon(1e-6));

    int64_t modes = s.corner_modes;
    for (auto m : s.n_modes) modes += m;
    CHECK(modes == n * n - 1);
    CHECK_THROWS_AS(vorticity_spectrum(Tensor({8, 16})), Error);
}

TEST_CASE("pull statistics on a calibrated gaussian ensemble") {
    const int m = 100;
    const int64_t pixels = 100000;
    const double sigma = 0.7;
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd;
    Tensor stack({m, pixels});
    Tensor truth({pixels});
    std::vector<double> center(pixels);
    for (int64_t i = 0; i < pixels; ++i) {
        center[i] = nd(rng);
        truth[i] = static_cast<float>(center[i] + sigma * nd(rng));
    }
    for (int k = 0; k < m; ++k)
        for (int64_t i = 0; i < pixels; ++i) stack[k * pixels + i] = static_cast<float>(center[i] + sigma * nd(rng));
    auto stats = ensemble_stats(stack);
    auto pull = pull_stats(stats, truth);
    CHECK(pull.used == pixels);
    CHECK(pull.members == m);
    CHECK(std::abs(pull.pull_mean) < 0.02);
    CHECK(pull.pull_std > 0.95);
    CHECK(pull.pull_std < 1.05);
    CHECK(pull.pull_std_corrected == doctest::Approx(pull.pull_std / std::sqrt(1.01)));

    // Scaling the spread by c scales the pull by 1/c.
    auto scaled = stats;
    for (auto& s : scaled.std) s *= 1.78;
    auto p2 = pull_stats(scaled, truth);
    CHECK(p2.pull_std == doctest::Approx(pull.pull_std / 1.78).epsilon(1e-12));
    CHECK(p2.pull_mean == doctest::Approx(pull.pull_mean / 1.78).epsilon(1e-12));

    auto floored = stats;
    floored.std[0] = 0.0;
    floored.std[1] = 1e-12;
    auto p3 = pull_stats(floored, truth);
    CHECK(p3.excluded == 2);
    CHECK(p3.used == pixels - 2);

    auto one = stats;
    one.members = 1;
    CHECK_THROWS_AS(pull_stats(one, truth), Error);
    auto flat = stats;
    for (auto& s : flat.std) s = 0.0;
    CHECK_THROWS_AS(pull_stats(flat, truth), Error);
}

TEST_CASE("rollout with zero residual is persistence") {
    Tensor prev = field(1), cur = field(2);
    std::vector<Tensor> truth{field(3), field(4), field(5)};
    RolloutOptions o;
    o.horizon = 3;
    o.norm_std = 0.5;
    auto steps = autoregressive_rollout(oracle(Tensor(cur.shape())), prev, cur, truth, kSched, o);
    REQUIRE(steps.size() == 3);
    for (int k = 0; k < 3; ++k) {
        CHECK(steps[k].step == k + 1);
        CHECK(steps[k].pcc == doctest::Approx(pcc(cur, truth[k])).epsilon(1e-5));
        CHECK(steps[k].persistence_pcc == doctest::Approx(steps[k].pcc).epsilon(1e-5));
    }
}

TEST_CASE("rollout with an oracle residual is exact") {
    std::vector<Tensor> frames;
    for (int i = 0; i < 6; ++i) frames.push_back(field(10 + i));
    const double norm = 0.25;
    int call = 0;
    VelocityPredictor pred = [&](double t, const Tensor& z, const ConditioningContext& ctx) {
        // Current frame index from the conditioning; residual to the next one.
        Tensor cur = denormalize(ctx.snapshots[1], 0.0, norm);
        int idx = 0;
        double best = 1e30;
        for (int i = 0; i < 6; ++i) {
            const double d = max_abs_diff(cur, frames[i]);
            if (d < best) best = d, idx = i;
        }
        Tensor r(z.shape());
        for (int64_t i = 0; i < r.numel(); ++i) r[i] = static_cast<float>((frames[idx + 1][i] - frames[idx][i]) / norm);
        ++call;
        return oracle(r)(t, z, ctx);
    };
    RolloutOptions o;
    o.horizon = 4;
    o.norm_std = norm;
    o.members = 3;
    auto steps = autoregressive_rollout(pred, frames[0], frames[1], {frames[2], frames[3], frames[4], frames[5]}, kSched, o);
    for (const auto& s : steps) {
        CHECK(s.pcc == doctest::Approx(1.0).epsilon(1e-5));
        CHECK(s.rfne < 1e-4);
    }
    CHECK(call > 0);

    o.horizon = 5;
    try {
        autoregressive_rollout(pred, frames[0], frames[1], {frames[2]}, kSched, o);
        FAIL("expected data error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Data);
    }
}

TEST_CASE("rollout divergence is reported") {
    VelocityPredictor bad = [](double, const Tensor& z, const ConditioningContext&) {
        return Tensor(z.shape(), NAN);
    };
    RolloutOptions o;
    try {
        autoregressive_rollout(bad, field(1), field(2), {field(3)}, kSched, o);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK((e.kind() == ErrorKind::Divergence || e.kind() == ErrorKind::Consistency));
    }
}
