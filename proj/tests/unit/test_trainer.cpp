#include <doctest.h>

#include "flexdiff/config.hpp"
#include "flexdiff/error.hpp"
#include "flexdiff/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

using namespace flexdiff;

namespace {

const NoiseSchedule kSched(ScheduleKind::Cosine, 1e-3, 1.0 - 1e-3);

Tensor smooth(uint64_t seed, int64_t n = 16) {
    Tensor t = lowpass(standard_normal({n, n}, seed), 4);
    double ss = 0.0;
    for (float v : t.values()) ss += v * v;
    const float s = static_cast<float>(1.0 / std::sqrt(ss / t.numel()));
    for (auto& v : t.storage()) v *= s;
    return t;
}

// Residual fully determined by the conditioning snapshot.
ResidualSample toy_sr(uint64_t seed) {
    ResidualSample s;
    s.residual = smooth(seed);
    s.context.task = Task::SR;
    s.context.snapshots = {s.residual};
    s.context.upsample_factor = 4;
    return s;
}

ResidualSample toy_fc(uint64_t seed) {
    ResidualSample s;
    Tensor a = smooth(seed), b = smooth(seed + 100000);
    s.residual = Tensor(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) s.residual[i] = 0.5f * (b[i] - a[i]);
    s.context.task = Task::FC;
    s.context.snapshots = {a, b};
    return s;
}

TrainConfig quick_config() {
    TrainConfig c;
    c.base_lr = 1e-3;
    c.warmup_steps = 20;
    c.steps = 500;
    c.batch_size = 8;
    c.ema_decay = 0.99;
    c.seed = 1;
    return c;
}

double mean_of(const std::vector<double>& v, size_t begin, size_t end) {
    return std::accumulate(v.begin() + static_cast<long>(begin), v.begin() + static_cast<long>(end), 0.0) /
           static_cast<double>(end - begin);
}

std::vector<double> flat_params(const FlexModel& m) {
    std::vector<double> out;
    for (const auto& p : m.params()) out.insert(out.end(), p.var->value.values().begin(), p.var->value.values().end());
    return out;
}

}  // namespace

TEST_CASE("learning rate warmup and cosine decay") {
    TrainConfig c;
    c.base_lr = 1e-3;
    c.warmup_steps = 10;
    c.steps = 110;
    CHECK(learning_rate(c, 0) == doctest::Approx(1e-4));
    CHECK(learning_rate(c, 9) == doctest::Approx(1e-3));
    CHECK(learning_rate(c, 10) == doctest::Approx(1e-3));
    CHECK(learning_rate(c, 60) == doctest::Approx(5e-4));
    CHECK(learning_rate(c, 110) == doctest::Approx(0.0));
    c.lr_schedule = LrSchedule::Constant;
    CHECK(learning_rate(c, 60) == doctest::Approx(1e-3));
}

TEST_CASE("train config validation") {
    TrainConfig c;
    c.ema_decay = 1.0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = TrainConfig{};
    c.base_lr = 0.0;
    CHECK_THROWS_AS(c.validate(), Error);
    CHECK(loss_kind_from_string("l2") == LossKind::L2);
    CHECK(optimizer_from_string(to_string(OptimizerKind::AdamW)) == OptimizerKind::AdamW);
    CHECK(grad_mode_from_string("summed") == GradMode::Summed);
    CHECK_THROWS_AS(grad_mode_from_string("thrice"), Error);
}

TEST_CASE("sampled diffusion times are uniform on the clamps") {
    std::mt19937_64 rng(11);
    std::vector<double> t(100000);
    for (auto& v : t) v = sample_time(rng, kSched);
    std::sort(t.begin(), t.end());
    CHECK(t.front() >= kSched.t_min());
    CHECK(t.back() <= kSched.t_max());
    const double span = kSched.t_max() - kSched.t_min();
    double ks = 0.0;
    const double n = static_cast<double>(t.size());
    for (size_t i = 0; i < t.size(); ++i) {
        const double cdf = (t[i] - kSched.t_min()) / span;
        ks = std::max({ks, std::abs(cdf - i / n), std::abs(cdf - (i + 1) / n)});
    }
    CHECK(ks < 0.01);
}

TEST_CASE("zero predictor L2 loss equals the target energy") {
    FlexConfig cfg = preset("tiny");
    cfg.dropout = 0.0f;
    auto m = FlexModel::build(cfg, 2);
    for (auto& p : m.params())
        if (p.name.rfind("output.conv", 0) == 0) p.var->value.fill(0.0f);
    ResidualSample item = toy_sr(5);
    double r2 = 0.0;
    for (float v : item.residual.values()) r2 += static_cast<double>(v) * v;
    r2 /= static_cast<double>(item.residual.numel());

    for (double t : {0.2, 0.5, 0.8}) {
        auto [a, s] = kSched.alpha_sigma(t);
        const int draws = 200;
        double acc = 0.0;
        for (int k = 0; k < draws; ++k) {
            Tensor eps = standard_normal(item.residual.shape(), 1000 + k);
            NoGradGuard ng;
            const double loss = velocity_loss(m, {item}, {t}, {eps}, kSched, LossKind::L2, nullptr)->value[0];
            double exact = 0.0;
            for (int64_t i = 0; i < eps.numel(); ++i) {
                const double v = a * eps[i] - s * item.residual[i];
                exact += v * v;
            }
            CHECK(loss == doctest::Approx(exact / eps.numel()).epsilon(1e-5));
            acc += loss;
        }
        const double expected = a * a + s * s * r2;
        CHECK(acc / draws == doctest::Approx(expected).epsilon(0.02));
    }
}

TEST_CASE("lr 0 leaves parameters unchanged and moves the EMA by 1 - decay") {
    TrainConfig c = quick_config();
    c.base_lr = 1e-30;
    c.warmup_steps = 0;
    c.lr_schedule = LrSchedule::Constant;
    auto state = TrainState::create(preset("tiny"), c);
    c.base_lr = 0.0;
    const auto before = flat_params(state.model);
    for (auto& e : state.ema)
        for (auto& v : e.storage()) v += 1.0f;
    train_step(state, {toy_sr(1), toy_sr(2)}, kSched, c);
    CHECK(flat_params(state.model) == before);
    CHECK(state.step == 1);
    size_t k = 0;
    for (auto& e : state.ema)
        for (float v : e.values()) {
            CHECK(v - before[k] == doctest::Approx(c.ema_decay).epsilon(1e-5));
            ++k;
        }

    c.multitask = true;
    FlexConfig mt = preset("tiny");
    mt.tasks = {Task::SR, Task::FC};
    c.base_lr = 1e-30;
    auto ms = TrainState::create(mt, c);
    c.base_lr = 0.0;
    const auto mbefore = flat_params(ms.model);
    auto reports = train_step_multitask(ms, {toy_sr(1)}, {toy_fc(2)}, kSched, c);
    CHECK(reports.size() == 2);
    CHECK(reports[0].task == "sr");
    CHECK(reports[1].task == "fc");
    CHECK(ms.step == 2);
    CHECK(flat_params(ms.model) == mbefore);
}

TEST_CASE("EMA follows the scalar recurrence") {
    TrainConfig c = quick_config();
    auto state = TrainState::create(preset("tiny"), c);
    std::vector<double> ref;
    for (const auto& e : state.ema) ref.insert(ref.end(), e.values().begin(), e.values().end());
    for (int k = 0; k < 5; ++k) {
        train_step(state, {toy_sr(k), toy_sr(k + 7)}, kSched, c);
        const auto p = flat_params(state.model);
        for (size_t i = 0; i < ref.size(); ++i) ref[i] = c.ema_decay * ref[i] + (1 - c.ema_decay) * p[i];
    }
    size_t i = 0;
    double worst = 0.0;
    for (const auto& e : state.ema)
        for (float v : e.values()) worst = std::max(worst, std::abs(v - ref[i++]));
    CHECK(worst < 1e-6);
}

TEST_CASE("summed multitask gradient is the sum of per-task gradients") {
    FlexConfig cfg = preset("tiny");
    cfg.tasks = {Task::SR, Task::FC};
    cfg.dropout = 0.0f;
    auto m = FlexModel::build(cfg, 4);
    std::vector<ResidualSample> sr{toy_sr(1), toy_sr(2)}, fc{toy_fc(3), toy_fc(4)};
    std::vector<double> t{0.2, 0.6, 0.4, 0.9};
    std::vector<Tensor> eps;
    for (int i = 0; i < 4; ++i) eps.push_back(standard_normal({16, 16}, 50 + i));

    auto grads = [&](const std::vector<ResidualSample>& items, const std::vector<double>& ts,
                     const std::vector<Tensor>& es, bool per_task) {
        for (auto& p : m.params()) p.var->grad = Tensor();
        backward(velocity_loss(m, items, ts, es, kSched, LossKind::L2, nullptr, per_task));
        std::vector<double> g;
        for (auto& p : m.params()) {
            if (p.var->grad.empty()) {
                g.insert(g.end(), static_cast<size_t>(p.var->value.numel()), 0.0);
            } else {
                g.insert(g.end(), p.var->grad.values().begin(), p.var->grad.values().end());
            }
        }
        return g;
    };
    auto g_sr = grads(sr, {t[0], t[1]}, {eps[0], eps[1]}, false);
    auto g_fc = grads(fc, {t[2], t[3]}, {eps[2], eps[3]}, false);
    std::vector<ResidualSample> both{sr[0], sr[1], fc[0], fc[1]};
    auto g_sum = grads(both, t, eps, true);
    double worst = 0.0, scale = 0.0;
    for (size_t i = 0; i < g_sum.size(); ++i) {
        worst = std::max(worst, std::abs(g_sum[i] - g_sr[i] - g_fc[i]));
        scale = std::max(scale, std::abs(g_sum[i]));
    }
    CHECK(worst < 1e-6 * std::max(1.0, scale));
}

TEST_CASE("single-task smoke training halves the loss") {
    for (LossKind loss : {LossKind::L1, LossKind::L2}) {
        ResidualPool pool, empty;
        for (int i = 0; i < 200; ++i) pool.add(toy_sr(i));
        TrainConfig c = quick_config();
        c.loss = loss;
        auto state = TrainState::create(preset("tiny"), c);
        std::vector<double> losses;
        train(state, pool, empty, kSched, c, 500, [&](const StepReport& r) { losses.push_back(r.loss); });
        REQUIRE(losses.size() == 500);
        const double first = mean_of(losses, 0, 20), last = mean_of(losses, 450, 500);
        CAPTURE(to_string(loss));
        CAPTURE(first);
        CAPTURE(last);
        CHECK(last <= 0.5 * first);
        CHECK(state.model.all_finite());
    }
}

TEST_CASE("multitask smoke training reduces both task losses") {
    ResidualPool sr, fc;
    for (int i = 0; i < 200; ++i) {
        sr.add(toy_sr(i));
        fc.add(toy_fc(i + 500));
    }
    TrainConfig c = quick_config();
    c.multitask = true;
    c.batch_size = 4;
    c.steps = 1000;
    FlexConfig cfg = preset("tiny");
    cfg.tasks = {Task::SR, Task::FC};
    auto state = TrainState::create(cfg, c);
    std::vector<double> l_sr, l_fc;
    train(state, sr, fc, kSched, c, 1000,
          [&](const StepReport& r) { (r.task == "sr" ? l_sr : l_fc).push_back(r.loss); });
    REQUIRE(l_sr.size() == 500);
    REQUIRE(l_fc.size() == 500);
    CHECK(mean_of(l_sr, 450, 500) <= 0.6 * mean_of(l_sr, 0, 20));
    CHECK(mean_of(l_fc, 450, 500) <= 0.6 * mean_of(l_fc, 0, 20));
}

TEST_CASE("fixed seeds give identical loss trajectories") {
    ResidualPool pool, empty;
    for (int i = 0; i < 20; ++i) pool.add(toy_sr(i));
    TrainConfig c = quick_config();
    auto run = [&] {
        auto s = TrainState::create(preset("tiny"), c);
        std::vector<double> l;
        train(s, pool, empty, kSched, c, 15, [&](const StepReport& r) { l.push_back(r.loss); });
        return l;
    };
    CHECK(run() == run());
}

TEST_CASE("checkpoint round trip, resume and mismatch") {
    ResidualPool pool, empty;
    for (int i = 0; i < 20; ++i) pool.add(toy_sr(i));
    TrainConfig c = quick_config();
    c.patch = 8;

    auto full = TrainState::create(preset("tiny"), c);
    std::vector<double> l_full;
    train(full, pool, empty, kSched, c, 50, [&](const StepReport& r) { l_full.push_back(r.loss); });

    auto part = TrainState::create(preset("tiny"), c);
    std::vector<double> l_part;
    train(part, pool, empty, kSched, c, 20, [&](const StepReport& r) { l_part.push_back(r.loss); });
    save_checkpoint(part, c, "trainer_ckpt.bin");
    TrainConfig loaded_cfg;
    auto resumed = load_checkpoint("trainer_ckpt.bin", &loaded_cfg);
    CHECK(train_config_to_text(loaded_cfg) == train_config_to_text(c));
    CHECK(resumed.step == 20);
    train(resumed, pool, empty, kSched, c, 50, [&](const StepReport& r) { l_part.push_back(r.loss); });
    CHECK(l_part == l_full);
    CHECK(encode_checkpoint(resumed, c) == encode_checkpoint(full, c));

    auto bytes = encode_checkpoint(part, c);
    CHECK(encode_checkpoint(decode_checkpoint(bytes), c) == bytes);

    FlexConfig other = preset("tiny");
    other.vit_depth = 3;
    try {
        load_checkpoint("trainer_ckpt.bin", other);
        FAIL("expected config mismatch");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Config);
    }
    CHECK_NOTHROW(load_checkpoint("trainer_ckpt.bin", preset("tiny")));

    auto truncated = bytes;
    truncated.resize(bytes.size() / 2);
    CHECK_THROWS_AS(decode_checkpoint(truncated), Error);
    auto version = bytes;
    version[8] = 99;
    CHECK_THROWS_AS(decode_checkpoint(version), Error);
    std::remove("trainer_ckpt.bin");
}

TEST_CASE("training log csv") {
    write_train_log("trainer_log.csv", {{1, "sr", 0.5, 1e-3, 0.01}});
    std::ifstream in("trainer_log.csv");
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    CHECK(header == "step,task,loss,lr,ema_gap");
    CHECK(row.rfind("1,sr,0.5,", 0) == 0);
    std::remove("trainer_log.csv");
}

TEST_CASE("empty batch and empty pools") {
    auto state = TrainState::create(preset("tiny"), quick_config());
    CHECK_THROWS_AS(train_step(state, {}, kSched, quick_config()), Error);
    ResidualPool a, b;
    CHECK_THROWS_AS(train(state, a, b, kSched, quick_config(), 1), Error);
}
