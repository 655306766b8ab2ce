#include <doctest.h>

#include "flexdiff/autograd.hpp"
#include "flexdiff/diffusion.hpp"
#include "flexdiff/error.hpp"

#include <cmath>
#include <functional>
#include <random>

using namespace flexdiff;

namespace {

Tensor randn(const Shape& s, uint64_t seed, float scale = 1.0f) {
    Tensor t = standard_normal(s, seed);
    for (auto& v : t.storage()) v *= scale;
    return t;
}

// Scalar loss sum(f(x) * w) with a fixed random weighting so every output
// element contributes a distinct gradient.
using Fn = std::function<Var(const std::vector<Var>&)>;

double eval(const Fn& f, const std::vector<Tensor>& inputs, const Tensor& w) {
    NoGradGuard ng;
    std::vector<Var> xs;
    for (const auto& t : inputs) xs.push_back(constant(t));
    Var y = f(xs);
    double s = 0.0;
    for (int64_t i = 0; i < y->value.numel(); ++i) s += static_cast<double>(y->value[i]) * w[i];
    return s;
}

void gradcheck(const Fn& f, std::vector<Tensor> inputs, float h = 1e-2f, double tol = 2e-2) {
    std::vector<Var> xs;
    for (const auto& t : inputs) xs.push_back(parameter(t));
    Var y = f(xs);
    const Tensor w = randn(y->value.shape(), 1234);
    Var loss = ops::sum(ops::mul(y, constant(w)));
    backward(loss);
    for (size_t k = 0; k < inputs.size(); ++k) {
        std::mt19937_64 rng(k + 1);
        const int64_t n = inputs[k].numel();
        for (int probe = 0; probe < std::min<int64_t>(n, 12); ++probe) {
            const int64_t i = static_cast<int64_t>(rng() % static_cast<uint64_t>(n));
            auto plus = inputs, minus = inputs;
            plus[k][i] += h;
            minus[k][i] -= h;
            const double num = (eval(f, plus, w) - eval(f, minus, w)) / (2.0 * h);
            const double ana = xs[k]->grad.empty() ? 0.0 : xs[k]->grad[i];
            CAPTURE(k);
            CAPTURE(i);
            CHECK(std::abs(num - ana) <= tol * std::max(1.0, std::abs(num)));
        }
    }
}

}  // namespace

TEST_CASE("elementwise ops gradients") {
    gradcheck([](const std::vector<Var>& x) { return ops::add(x[0], x[1]); }, {randn({3, 4}, 1), randn({3, 4}, 2)});
    gradcheck([](const std::vector<Var>& x) { return ops::sub(x[0], x[1]); }, {randn({3, 4}, 1), randn({3, 4}, 2)});
    gradcheck([](const std::vector<Var>& x) { return ops::mul(x[0], x[1]); }, {randn({3, 4}, 1), randn({3, 4}, 2)});
    gradcheck([](const std::vector<Var>& x) { return ops::scale(x[0], -2.5f); }, {randn({5}, 3)});
    gradcheck([](const std::vector<Var>& x) { return ops::silu(x[0]); }, {randn({10}, 4)});
    gradcheck([](const std::vector<Var>& x) { return ops::gelu(x[0]); }, {randn({10}, 5)});
}

TEST_CASE("conv2d and linear gradients") {
    gradcheck([](const std::vector<Var>& x) { return ops::conv2d(x[0], x[1], x[2], 1, 1); },
              {randn({2, 3, 6, 6}, 1), randn({4, 3, 3, 3}, 2, 0.3f), randn({4}, 3)});
    gradcheck([](const std::vector<Var>& x) { return ops::conv2d(x[0], x[1], x[2], 2, 1); },
              {randn({1, 2, 8, 8}, 4), randn({3, 2, 3, 3}, 5, 0.3f), randn({3}, 6)});
    gradcheck([](const std::vector<Var>& x) { return ops::linear(x[0], x[1], x[2]); },
              {randn({2, 5, 6}, 7), randn({4, 6}, 8), randn({4}, 9)});
}

TEST_CASE("normalization gradients") {
    gradcheck([](const std::vector<Var>& x) { return ops::group_norm(x[0], x[1], x[2], 2); },
              {randn({2, 4, 3, 3}, 1), randn({4}, 2), randn({4}, 3)});
    gradcheck([](const std::vector<Var>& x) { return ops::layer_norm(x[0], x[1], x[2]); },
              {randn({2, 3, 8}, 4), randn({8}, 5), randn({8}, 6)});
    gradcheck([](const std::vector<Var>& x) { return ops::scale_shift(x[0], x[1]); },
              {randn({2, 3, 4, 4}, 7), randn({2, 6}, 8, 0.5f)});
}

TEST_CASE("attention and token plumbing gradients") {
    gradcheck([](const std::vector<Var>& x) { return ops::self_attention(x[0], 2, 0.0f, nullptr); },
              {randn({2, 5, 12}, 1)});
    gradcheck([](const std::vector<Var>& x) { return ops::prepend_token(x[0], x[1]); },
              {randn({2, 4, 3}, 2), randn({2, 3}, 3)});
    gradcheck([](const std::vector<Var>& x) { return ops::drop_first_token(x[0]); }, {randn({2, 4, 3}, 4)});
    gradcheck([](const std::vector<Var>& x) { return ops::add_positional(x[0], x[1]); },
              {randn({2, 4, 3}, 5), randn({4, 3}, 6)});
    gradcheck([](const std::vector<Var>& x) { return ops::unpatchify(ops::patchify(x[0]), 3, 2); },
              {randn({2, 4, 3, 2}, 7)});
    gradcheck([](const std::vector<Var>& x) { return ops::resize_grid(x[0], 2, 2, 4, 4); }, {randn({4, 3}, 8)});
}

TEST_CASE("layout ops gradients") {
    gradcheck([](const std::vector<Var>& x) { return ops::concat_channels({x[0], x[1]}); },
              {randn({2, 1, 3, 3}, 1), randn({2, 2, 3, 3}, 2)});
    gradcheck([](const std::vector<Var>& x) { return ops::concat_batch({x[0], x[1]}); },
              {randn({1, 2, 3}, 3), randn({2, 2, 3}, 4)});
    gradcheck([](const std::vector<Var>& x) { return ops::slice_batch(x[0], 1, 3); }, {randn({4, 2, 2}, 5)});
    gradcheck([](const std::vector<Var>& x) { return ops::upsample_nearest2x(x[0]); }, {randn({1, 2, 3, 3}, 6)});
}

TEST_CASE("losses") {
    Tensor target = randn({4, 4}, 1);
    gradcheck([&](const std::vector<Var>& x) { return ops::l2_loss(x[0], target); }, {randn({4, 4}, 2)});
    gradcheck([&](const std::vector<Var>& x) { return ops::l1_loss(x[0], target); }, {randn({4, 4}, 3)});

    Tensor p({2}, {1.0f, -1.0f}), q({2}, {0.0f, 0.0f});
    CHECK(ops::l1_loss(constant(p), q)->value[0] == doctest::Approx(1.0));
    CHECK(ops::l2_loss(constant(p), q)->value[0] == doctest::Approx(1.0));
}

TEST_CASE("positional permutation consistency") {
    const Tensor tokens = randn({1, 6, 4}, 1), pos = randn({6, 4}, 2);
    const std::vector<int> perm{3, 0, 5, 1, 4, 2};
    Tensor pt(tokens.shape()), pp(pos.shape());
    for (int i = 0; i < 6; ++i)
        for (int c = 0; c < 4; ++c) {
            pt[i * 4 + c] = tokens[perm[i] * 4 + c];
            pp[i * 4 + c] = pos[perm[i] * 4 + c];
        }
    NoGradGuard ng;
    auto a = ops::add_positional(constant(tokens), constant(pos))->value;
    auto b = ops::add_positional(constant(pt), constant(pp))->value;
    for (int i = 0; i < 6; ++i)
        for (int c = 0; c < 4; ++c) CHECK(b[i * 4 + c] == a[perm[i] * 4 + c]);
}

TEST_CASE("dropout is identity without an rng or grad and scales kept units") {
    Tensor x({1000}, 1.0f);
    std::mt19937_64 rng(3);
    CHECK(max_abs_diff(ops::dropout(constant(x), 0.5f, nullptr)->value, x) == 0.0f);
    {
        NoGradGuard ng;
        CHECK(max_abs_diff(ops::dropout(constant(x), 0.5f, &rng)->value, x) == 0.0f);
    }
    auto y = ops::dropout(constant(x), 0.25f, &rng)->value;
    int kept = 0;
    for (int64_t i = 0; i < y.numel(); ++i) {
        if (y[i] != 0.0f) {
            ++kept;
            CHECK(y[i] == doctest::Approx(1.0 / 0.75));
        }
    }
    CHECK(kept > 700);
    CHECK(kept < 800);
}

TEST_CASE("no graph is recorded under NoGradGuard") {
    Var p = parameter(randn({3}, 1));
    {
        NoGradGuard ng;
        CHECK_FALSE(grad_enabled());
        Var y = ops::scale(p, 2.0f);
        CHECK(y->parents.empty());
    }
    CHECK(grad_enabled());
}

TEST_CASE("backward requires a scalar root") {
    Var p = parameter(randn({3}, 1));
    CHECK_THROWS_AS(backward(ops::scale(p, 2.0f)), Error);
}
