#include "flexdiff/trainer.hpp"

#include "binio.hpp"
#include "flexdiff/config.hpp"
#include "flexdiff/diffusion.hpp"
#include "flexdiff/error.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace flexdiff {

void TrainConfig::validate() const {
    require(base_lr > 0.0, ErrorKind::Config, "base_lr must be > 0");
    require(ema_decay > 0.0 && ema_decay < 1.0, ErrorKind::Config, "ema_decay must lie in (0, 1)");
    require(steps >= 1, ErrorKind::Config, "steps must be >= 1");
    require(batch_size >= 1, ErrorKind::Config, "batch_size must be >= 1");
    require(patch >= 0, ErrorKind::Config, "patch must be >= 0");
    require(warmup_steps >= 0, ErrorKind::Config, "warmup_steps must be >= 0");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ErrorKind::Config,
            "optimizer betas must lie in [0, 1)");
    require(log_every >= 1, ErrorKind::Config, "log_every must be >= 1");
}

const char* to_string(LossKind k) { return k == LossKind::L1 ? "l1" : "l2"; }
const char* to_string(OptimizerKind k) { return k == OptimizerKind::Lion ? "lion" : "adamw"; }
const char* to_string(GradMode m) { return m == GradMode::TwoSteps ? "two_steps" : "summed"; }
const char* to_string(LrSchedule s) { return s == LrSchedule::Cosine ? "cosine" : "constant"; }

LossKind loss_kind_from_string(const std::string& s) {
    if (s == "l1" || s == "L1") return LossKind::L1;
    if (s == "l2" || s == "L2") return LossKind::L2;
    fail(ErrorKind::Config, "unknown loss '" + s + "' (expected l1 or l2)");
}

OptimizerKind optimizer_from_string(const std::string& s) {
    if (s == "lion") return OptimizerKind::Lion;
    if (s == "adamw") return OptimizerKind::AdamW;
    fail(ErrorKind::Config, "unknown optimizer '" + s + "' (expected lion or adamw)");
}

GradMode grad_mode_from_string(const std::string& s) {
    if (s == "two_steps") return GradMode::TwoSteps;
    if (s == "summed") return GradMode::Summed;
    fail(ErrorKind::Config, "unknown grad_mode '" + s + "' (expected two_steps or summed)");
}

LrSchedule lr_schedule_from_string(const std::string& s) {
    if (s == "cosine") return LrSchedule::Cosine;
    if (s == "constant") return LrSchedule::Constant;
    fail(ErrorKind::Config, "unknown lr_schedule '" + s + "' (expected cosine or constant)");
}

double learning_rate(const TrainConfig& config, int64_t step) {
    if (config.warmup_steps > 0 && step < config.warmup_steps) {
        return config.base_lr * static_cast<double>(step + 1) / config.warmup_steps;
    }
    if (config.lr_schedule == LrSchedule::Constant) return config.base_lr;
    const double span = std::max(1, config.steps - config.warmup_steps);
    const double progress = std::min(1.0, static_cast<double>(step - config.warmup_steps) / span);
    return config.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

TrainState TrainState::create(const FlexConfig& model_config, const TrainConfig& train_config) {
    train_config.validate();
    TrainState s{FlexModel::build(model_config, train_config.seed), {}, {}, {}, 0,
                 std::mt19937_64(train_config.seed ^ 0x9e3779b97f4a7c15ULL), 0.0};
    for (const NamedParam& p : s.model.params()) {
        s.ema.push_back(p.var->value);
        s.opt_m.push_back(Tensor::zeros_like(p.var->value));
        if (train_config.optimizer == OptimizerKind::AdamW) {
            s.opt_v.push_back(Tensor::zeros_like(p.var->value));
        }
    }
    return s;
}

FlexModel TrainState::ema_model() const {
    FlexModel m = model.clone();
    for (size_t i = 0; i < ema.size(); ++i) m.params()[i].var->value = ema[i];
    return m;
}

double TrainState::ema_gap() const {
    double ss = 0.0;
    int64_t n = 0;
    const auto& params = model.params();
    for (size_t i = 0; i < params.size(); ++i) {
        const Tensor& p = params[i].var->value;
        for (int64_t k = 0; k < p.numel(); ++k) {
            const double d = static_cast<double>(p[k]) - ema[i][k];
            ss += d * d;
        }
        n += p.numel();
    }
    return n > 0 ? std::sqrt(ss / static_cast<double>(n)) : 0.0;
}

Var velocity_loss(const FlexModel& model, const std::vector<ResidualSample>& items,
                  const std::vector<double>& t, const std::vector<Tensor>& eps,
                  const NoiseSchedule& schedule, LossKind loss, std::mt19937_64* dropout_rng,
                  bool per_task_mean) {
    require(!items.empty(), ErrorKind::Parameter, "training batch must not be empty");
    require(t.size() == items.size() && eps.size() == items.size(), ErrorKind::Shape,
            "velocity_loss needs one t and one eps per item");
    const Tensor& r0 = items.front().residual;
    require(r0.rank() == 2, ErrorKind::Shape, "residuals must be 2D grids");
    const int64_t B = static_cast<int64_t>(items.size()), H = r0.dim(0), W = r0.dim(1);
    Tensor z({B, 1, H, W}), target({B, 1, H, W});
    std::vector<ConditioningContext> contexts;
    contexts.reserve(items.size());
    for (int64_t b = 0; b < B; ++b) {
        const ResidualSample& item = items[static_cast<size_t>(b)];
        const NoisedSample noised = forward_perturb(item.residual, t[static_cast<size_t>(b)],
                                                    eps[static_cast<size_t>(b)], schedule);
        const Tensor v = velocity_target(item.residual, t[static_cast<size_t>(b)],
                                         eps[static_cast<size_t>(b)], schedule);
        require(noised.z.numel() == H * W, ErrorKind::Shape, "batch items must share a grid");
        std::copy(noised.z.data(), noised.z.data() + H * W, z.data() + b * H * W);
        std::copy(v.data(), v.data() + H * W, target.data() + b * H * W);
        contexts.push_back(item.context);
    }
    Var pred = model.forward(t, constant(std::move(z)), contexts, {}, dropout_rng);
    auto loss_of = [&](const Var& p, const Tensor& tgt) {
        return loss == LossKind::L1 ? ops::l1_loss(p, tgt) : ops::l2_loss(p, tgt);
    };
    if (!per_task_mean) return loss_of(pred, target);

    int64_t n_sr = 0;
    for (const auto& item : items) n_sr += item.context.task == Task::SR ? 1 : 0;
    if (n_sr == 0 || n_sr == B) return loss_of(pred, target);
    auto slice_target = [&](int64_t begin, int64_t end) {
        Tensor out({end - begin, 1, H, W});
        std::copy(target.data() + begin * H * W, target.data() + end * H * W, out.data());
        return out;
    };
    return ops::add(loss_of(ops::slice_batch(pred, 0, n_sr), slice_target(0, n_sr)),
                    loss_of(ops::slice_batch(pred, n_sr, B), slice_target(n_sr, B)));
}

void optimizer_step(TrainState& state, const TrainConfig& config) {
    const double lr = learning_rate(config, state.step);
    auto& params = state.model.params();
    const bool adam = config.optimizer == OptimizerKind::AdamW;
    if (adam && state.opt_v.size() != params.size()) {
        state.opt_v.clear();
        for (const auto& p : params) state.opt_v.push_back(Tensor::zeros_like(p.var->value));
    }
    const double b1 = config.beta1, b2 = config.beta2, wd = config.weight_decay;
    const double t = static_cast<double>(state.step + 1);
    const double bc1 = 1.0 - std::pow(b1, t), bc2 = 1.0 - std::pow(b2, t);
    for (size_t i = 0; i < params.size(); ++i) {
        Node& node = *params[i].var;
        Tensor& w = node.value;
        Tensor& m = state.opt_m[i];
        const bool has_grad = !node.grad.empty();
        for (int64_t k = 0; k < w.numel(); ++k) {
            const double g = has_grad ? node.grad[k] : 0.0;
            double update;
            if (adam) {
                Tensor& v = state.opt_v[i];
                m[k] = static_cast<float>(b1 * m[k] + (1.0 - b1) * g);
                v[k] = static_cast<float>(b2 * v[k] + (1.0 - b2) * g * g);
                update = (m[k] / bc1) / (std::sqrt(v[k] / bc2) + config.adam_eps);
            } else {
                // Lion: sign of the interpolated momentum, then the momentum update.
                const double c = b1 * m[k] + (1.0 - b1) * g;
                update = c > 0.0 ? 1.0 : (c < 0.0 ? -1.0 : 0.0);
                m[k] = static_cast<float>(b2 * m[k] + (1.0 - b2) * g);
            }
            w[k] = static_cast<float>(w[k] - lr * (update + wd * w[k]));
        }
        node.grad = Tensor();
    }
    const double d = config.ema_decay;
    for (size_t i = 0; i < params.size(); ++i) {
        const Tensor& w = params[i].var->value;
        Tensor& e = state.ema[i];
        for (int64_t k = 0; k < w.numel(); ++k) e[k] = static_cast<float>(d * e[k] + (1.0 - d) * w[k]);
    }
    ++state.step;
}

double sample_time(std::mt19937_64& rng, const NoiseSchedule& schedule) {
    return std::uniform_real_distribution<double>(schedule.t_min(), schedule.t_max())(rng);
}

namespace {

void draw_noise(TrainState& state, const std::vector<ResidualSample>& batch,
                const NoiseSchedule& schedule, std::vector<double>& t, std::vector<Tensor>& eps) {
    std::normal_distribution<float> normal(0.0f, 1.0f);
    t.clear();
    eps.clear();
    for (const ResidualSample& item : batch) {
        t.push_back(sample_time(state.rng, schedule));
        Tensor e(item.residual.shape());
        for (auto& v : e.values()) v = normal(state.rng);
        eps.push_back(std::move(e));
    }
}

void discard_grads(TrainState& state) {
    for (auto& p : state.model.params()) p.var->grad = Tensor();
}

std::string batch_task(const std::vector<ResidualSample>& batch) {
    bool sr = false, fc = false;
    for (const auto& item : batch) (item.context.task == Task::SR ? sr : fc) = true;
    return sr && fc ? "sr+fc" : (fc ? "fc" : "sr");
}

StepReport step_on(TrainState& state, const std::vector<ResidualSample>& batch,
                   const NoiseSchedule& schedule, const TrainConfig& config, bool per_task_mean) {
    std::vector<double> t;
    std::vector<Tensor> eps;
    draw_noise(state, batch, schedule, t, eps);
    Var loss = velocity_loss(state.model, batch, t, eps, schedule, config.loss, &state.rng,
                             per_task_mean);
    const double value = loss->value[0];
    if (!std::isfinite(value)) {
        fail(ErrorKind::Divergence,
             "non-finite training loss at step " + std::to_string(state.step + 1));
    }
    backward(loss);
    for (const auto& p : state.model.params()) {
        if (!p.var->grad.empty() && !p.var->grad.all_finite()) {
            discard_grads(state);
            fail(ErrorKind::Divergence, "non-finite gradient for " + p.name + " at step " +
                                            std::to_string(state.step + 1));
        }
    }
    StepReport report;
    report.lr = learning_rate(config, state.step);
    optimizer_step(state, config);
    state.last_loss = value;
    report.step = state.step;
    report.task = batch_task(batch);
    report.loss = value;
    report.ema_gap = state.ema_gap();
    return report;
}

} // namespace

StepReport train_step(TrainState& state, const std::vector<ResidualSample>& batch,
                      const NoiseSchedule& schedule, const TrainConfig& config) {
    require(!batch.empty(), ErrorKind::Parameter, "training batch must not be empty");
    return step_on(state, batch, schedule, config, false);
}

std::vector<StepReport> train_step_multitask(TrainState& state,
                                             const std::vector<ResidualSample>& sr_batch,
                                             const std::vector<ResidualSample>& fc_batch,
                                             const NoiseSchedule& schedule,
                                             const TrainConfig& config) {
    if (sr_batch.empty() || fc_batch.empty()) {
        return {train_step(state, sr_batch.empty() ? fc_batch : sr_batch, schedule, config)};
    }
    if (config.grad_mode == GradMode::TwoSteps) {
        return {train_step(state, sr_batch, schedule, config),
                train_step(state, fc_batch, schedule, config)};
    }
    std::vector<ResidualSample> combined(sr_batch);
    combined.insert(combined.end(), fc_batch.begin(), fc_batch.end());
    return {step_on(state, combined, schedule, config, true)};
}

ResidualSample crop_sample(const ResidualSample& sample, int64_t row, int64_t col, int64_t patch) {
    ResidualSample out = sample;
    out.residual = crop_periodic(sample.residual, row, col, patch);
    for (Tensor& s : out.context.snapshots) s = crop_periodic(s, row, col, patch);
    return out;
}

std::vector<ResidualSample> ResidualPool::sample_batch(std::mt19937_64& rng, int batch,
                                                       int patch) const {
    require(!samples_.empty(), ErrorKind::Data, "no training samples available");
    std::uniform_int_distribution<size_t> pick(0, samples_.size() - 1);
    std::vector<ResidualSample> out;
    out.reserve(static_cast<size_t>(batch));
    for (int b = 0; b < batch; ++b) {
        const ResidualSample& s = samples_[pick(rng)];
        const int64_t H = s.residual.dim(0), W = s.residual.dim(1);
        if (patch <= 0 || (patch >= H && patch >= W)) {
            out.push_back(s);
            continue;
        }
        require(patch <= H && patch <= W, ErrorKind::Parameter, "training patch exceeds the field");
        std::uniform_int_distribution<int64_t> row(0, H - patch), col(0, W - patch);
        const int64_t r = row(rng);
        out.push_back(crop_sample(s, r, col(rng), patch));
    }
    return out;
}

void train(TrainState& state, const ResidualPool& sr, const ResidualPool& fc,
           const NoiseSchedule& schedule, const TrainConfig& config, int64_t until,
           const StepCallback& on_step) {
    config.validate();
    require(!sr.empty() || !fc.empty(), ErrorKind::Data, "no training data");
    while (state.step < until) {
        std::vector<StepReport> reports;
        if (config.multitask && !sr.empty() && !fc.empty()) {
            auto sr_batch = sr.sample_batch(state.rng, config.batch_size, config.patch);
            auto fc_batch = fc.sample_batch(state.rng, config.batch_size, config.patch);
            reports = train_step_multitask(state, sr_batch, fc_batch, schedule, config);
        } else {
            const ResidualPool& pool = sr.empty() ? fc : sr;
            reports.push_back(train_step(state, pool.sample_batch(state.rng, config.batch_size, config.patch),
                                         schedule, config));
        }
        if (on_step) {
            for (const auto& r : reports) on_step(r);
        }
    }
}

void write_train_log(const std::string& path, const std::vector<StepReport>& rows) {
    std::ofstream out(path);
    if (!out) fail(ErrorKind::Io, "cannot open '" + path + "' for writing");
    out << "step,task,loss,lr,ema_gap\n";
    out.precision(9);
    for (const auto& r : rows) {
        out << r.step << ',' << r.task << ',' << r.loss << ',' << r.lr << ',' << r.ema_gap << '\n';
    }
}

namespace {

void write_tensor(detail::ByteWriter& w, const std::string& name, const Tensor& t) {
    w.str(name);
    w.u32(static_cast<uint32_t>(t.rank()));
    for (int64_t d : t.shape()) w.u64(static_cast<uint64_t>(d));
    w.f32s(t.data(), static_cast<size_t>(t.numel()));
}

Tensor read_tensor(detail::ByteReader& r, const std::string& expected_name, const Shape& expected) {
    const std::string name = r.str();
    require(name == expected_name, ErrorKind::Data,
            "checkpoint tensor '" + name + "' found where '" + expected_name + "' was expected");
    const uint32_t rank = r.u32();
    require(rank <= 8, ErrorKind::Data, "implausible tensor rank in checkpoint");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int64_t>(r.u64());
    require(shape == expected, ErrorKind::Data,
            "checkpoint tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                shape_str(expected));
    Tensor t(shape);
    r.f32s(t.data(), static_cast<size_t>(t.numel()));
    return t;
}

} // namespace

std::vector<uint8_t> encode_checkpoint(const TrainState& state, const TrainConfig& config) {
    detail::ByteWriter w;
    w.raw(kCheckpointMagic, sizeof(kCheckpointMagic));
    w.u32(kCheckpointVersion);
    w.str(flex_config_to_text(state.model.config()));
    w.str(train_config_to_text(config));
    w.u64(static_cast<uint64_t>(state.step));
    std::ostringstream rng;
    rng << state.rng;
    w.str(rng.str());
    w.f64(state.last_loss);
    const auto& params = state.model.params();
    w.u32(static_cast<uint32_t>(params.size()));
    w.u8(state.opt_v.empty() ? 0 : 1);
    for (size_t i = 0; i < params.size(); ++i) write_tensor(w, params[i].name, params[i].var->value);
    for (size_t i = 0; i < params.size(); ++i) write_tensor(w, "ema/" + params[i].name, state.ema[i]);
    for (size_t i = 0; i < params.size(); ++i) write_tensor(w, "opt.m/" + params[i].name, state.opt_m[i]);
    for (size_t i = 0; i < state.opt_v.size(); ++i) {
        write_tensor(w, "opt.v/" + params[i].name, state.opt_v[i]);
    }
    return std::move(w.bytes());
}

TrainState decode_checkpoint(const std::vector<uint8_t>& bytes, TrainConfig* config_out) {
    detail::ByteReader r(bytes, "checkpoint");
    char magic[8];
    r.raw(magic, sizeof(magic));
    require(std::equal(magic, magic + 8, kCheckpointMagic), ErrorKind::Data,
            "not a checkpoint file (bad magic)");
    const uint32_t version = r.u32();
    require(version == kCheckpointVersion, ErrorKind::Data,
            "checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                std::to_string(kCheckpointVersion) + ")");
    const FlexConfig model_config = flex_config_from_text(r.str());
    const TrainConfig train_config = train_config_from_text(r.str());
    TrainState state = TrainState::create(model_config, train_config);
    state.step = static_cast<int64_t>(r.u64());
    std::istringstream rng(r.str());
    rng >> state.rng;
    require(!rng.fail(), ErrorKind::Data, "checkpoint RNG state is malformed");
    state.last_loss = r.f64();
    auto& params = state.model.params();
    require(r.u32() == params.size(), ErrorKind::Data, "checkpoint parameter count mismatch");
    const bool has_v = r.u8() != 0;
    for (auto& p : params) p.var->value = read_tensor(r, p.name, p.var->value.shape());
    for (size_t i = 0; i < params.size(); ++i) {
        state.ema[i] = read_tensor(r, "ema/" + params[i].name, params[i].var->value.shape());
    }
    for (size_t i = 0; i < params.size(); ++i) {
        state.opt_m[i] = read_tensor(r, "opt.m/" + params[i].name, params[i].var->value.shape());
    }
    state.opt_v.clear();
    if (has_v) {
        for (size_t i = 0; i < params.size(); ++i) {
            state.opt_v.push_back(
                read_tensor(r, "opt.v/" + params[i].name, params[i].var->value.shape()));
        }
    }
    require(r.done(), ErrorKind::Data, "checkpoint has trailing bytes");
    if (config_out) *config_out = train_config;
    return state;
}

void save_checkpoint(const TrainState& state, const TrainConfig& config, const std::string& path) {
    detail::write_file(path, encode_checkpoint(state, config));
}

TrainState load_checkpoint(const std::string& path, TrainConfig* config) {
    return decode_checkpoint(detail::read_file(path), config);
}

TrainState load_checkpoint(const std::string& path, const FlexConfig& expected, TrainConfig* config) {
    TrainState state = load_checkpoint(path, config);
    const std::string stored = flex_config_to_text(state.model.config());
    const std::string wanted = flex_config_to_text(expected);
    require(stored == wanted, ErrorKind::Config,
            "checkpoint model config does not match the requested config");
    return state;
}

} // namespace flexdiff
