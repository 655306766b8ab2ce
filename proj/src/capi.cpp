#include "flexdiff/flexdiff.h"

#include "flexdiff/backbone.hpp"
#include "flexdiff/commands.hpp"
#include "flexdiff/config.hpp"
#include "flexdiff/dataio.hpp"
#include "flexdiff/error.hpp"
#include "flexdiff/metrics.hpp"
#include "flexdiff/trainer.hpp"

#include <cstring>
#include <new>
#include <optional>
#include <string>

struct flexdiff_config {
    flexdiff::RunConfig value;
};

struct flexdiff_dataset {
    flexdiff::Dataset value;
};

struct flexdiff_model {
    std::optional<flexdiff::FlexModel> value;
};

namespace {

thread_local std::string g_last_error;

flexdiff_status status_of(flexdiff::ErrorKind kind) {
    using flexdiff::ErrorKind;
    switch (kind) {
    case ErrorKind::Domain: return FLEXDIFF_ERR_DOMAIN;
    case ErrorKind::Shape: return FLEXDIFF_ERR_SHAPE;
    case ErrorKind::Config: return FLEXDIFF_ERR_CONFIG;
    case ErrorKind::Parameter: return FLEXDIFF_ERR_PARAMETER;
    case ErrorKind::Consistency: return FLEXDIFF_ERR_CONSISTENCY;
    case ErrorKind::Ordering: return FLEXDIFF_ERR_ORDERING;
    case ErrorKind::Context: return FLEXDIFF_ERR_CONTEXT;
    case ErrorKind::BatchLayout: return FLEXDIFF_ERR_BATCH_LAYOUT;
    case ErrorKind::Coverage: return FLEXDIFF_ERR_COVERAGE;
    case ErrorKind::UndefinedMetric: return FLEXDIFF_ERR_UNDEFINED_METRIC;
    case ErrorKind::Estimator: return FLEXDIFF_ERR_ESTIMATOR;
    case ErrorKind::Iteration: return FLEXDIFF_ERR_ITERATION;
    case ErrorKind::Io: return FLEXDIFF_ERR_IO;
    case ErrorKind::Data: return FLEXDIFF_ERR_DATA;
    case ErrorKind::Divergence: return FLEXDIFF_ERR_DIVERGENCE;
    case ErrorKind::Usage: return FLEXDIFF_ERR_USAGE;
    case ErrorKind::Internal: return FLEXDIFF_ERR_INTERNAL;
    }
    return FLEXDIFF_ERR_INTERNAL;
}

template <typename F>
flexdiff_status guarded(F&& body) {
    try {
        body();
        g_last_error.clear();
        return FLEXDIFF_OK;
    } catch (const flexdiff::Error& e) {
        g_last_error = e.what();
        return status_of(e.kind());
    } catch (const std::bad_alloc&) {
        g_last_error = "out of memory";
        return FLEXDIFF_ERR_INTERNAL;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return FLEXDIFF_ERR_INTERNAL;
    } catch (...) {
        g_last_error = "unknown exception";
        return FLEXDIFF_ERR_INTERNAL;
    }
}

void need(const void* p, const char* what) {
    flexdiff::require(p != nullptr, flexdiff::ErrorKind::Usage, std::string(what) + " must not be NULL");
}

std::string str_or_empty(const char* s) { return s ? std::string(s) : std::string(); }

flexdiff::LogFn make_log(flexdiff_log_fn log, void* user) {
    if (!log) return {};
    return [log, user](const std::string& line) { log(user, line.c_str()); };
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (!out) throw std::bad_alloc();
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

flexdiff::ConditioningContext to_context(const flexdiff_context* c, int64_t h, int64_t w) {
    need(c, "context");
    flexdiff::ConditioningContext ctx;
    ctx.task = c->task == FLEXDIFF_TASK_FC ? flexdiff::Task::FC : flexdiff::Task::SR;
    for (size_t i = 0; i < c->n_snapshots; ++i) {
        need(c->snapshots[i], "context snapshot");
        ctx.snapshots.emplace_back(flexdiff::Shape{h, w}, std::vector<float>(c->snapshots[i], c->snapshots[i] + h * w));
    }
    ctx.re_tag = c->re_tag;
    ctx.step_index = c->step_index;
    ctx.upsample_factor = c->upsample_factor;
    return ctx;
}

const flexdiff::NoiseSchedule& default_schedule() {
    static const flexdiff::NoiseSchedule s = flexdiff::ScheduleConfig{}.make();
    return s;
}

} // namespace

extern "C" {

const char* flexdiff_version(void) { return flexdiff::kVersion; }

const char* flexdiff_status_name(flexdiff_status status) {
    switch (status) {
    case FLEXDIFF_OK: return "ok";
    case FLEXDIFF_ERR_DOMAIN: return "domain";
    case FLEXDIFF_ERR_SHAPE: return "shape";
    case FLEXDIFF_ERR_CONFIG: return "config";
    case FLEXDIFF_ERR_PARAMETER: return "parameter";
    case FLEXDIFF_ERR_CONSISTENCY: return "consistency";
    case FLEXDIFF_ERR_ORDERING: return "ordering";
    case FLEXDIFF_ERR_CONTEXT: return "context";
    case FLEXDIFF_ERR_BATCH_LAYOUT: return "batch_layout";
    case FLEXDIFF_ERR_COVERAGE: return "coverage";
    case FLEXDIFF_ERR_UNDEFINED_METRIC: return "undefined_metric";
    case FLEXDIFF_ERR_ESTIMATOR: return "estimator";
    case FLEXDIFF_ERR_ITERATION: return "iteration";
    case FLEXDIFF_ERR_IO: return "io";
    case FLEXDIFF_ERR_DATA: return "data";
    case FLEXDIFF_ERR_DIVERGENCE: return "divergence";
    case FLEXDIFF_ERR_USAGE: return "usage";
    case FLEXDIFF_ERR_INTERNAL: return "internal";
    }
    return "unknown";
}

const char* flexdiff_last_error(void) { return g_last_error.c_str(); }

int flexdiff_exit_code(flexdiff_status status) {
    switch (status) {
    case FLEXDIFF_OK: return 0;
    case FLEXDIFF_ERR_USAGE:
    case FLEXDIFF_ERR_CONFIG:
    case FLEXDIFF_ERR_PARAMETER: return 2;
    case FLEXDIFF_ERR_DIVERGENCE:
    case FLEXDIFF_ERR_ITERATION: return 4;
    case FLEXDIFF_ERR_INTERNAL: return 1;
    default: return 3;
    }
}

flexdiff_status flexdiff_apply_thread_limit(int* threads) {
    return guarded([&] {
        const int n = flexdiff::apply_thread_limit();
        if (threads) *threads = n;
    });
}

void flexdiff_string_free(char* s) { std::free(s); }

flexdiff_status flexdiff_config_default(flexdiff_config** out) {
    return guarded([&] {
        need(out, "out");
        *out = new flexdiff_config{};
    });
}

flexdiff_status flexdiff_config_parse(const char* text, flexdiff_config** out) {
    return guarded([&] {
        need(text, "text");
        need(out, "out");
        *out = new flexdiff_config{flexdiff::run_config_from_text(text)};
    });
}

flexdiff_status flexdiff_config_load(const char* path, flexdiff_config** out) {
    return guarded([&] {
        need(path, "path");
        need(out, "out");
        *out = new flexdiff_config{flexdiff::load_run_config(path)};
    });
}

flexdiff_status flexdiff_config_set(flexdiff_config* config, const char* key, const char* value) {
    return guarded([&] {
        need(config, "config");
        need(key, "key");
        need(value, "value");
        config->value = flexdiff::apply_override(config->value, key, value);
    });
}

flexdiff_status flexdiff_config_text(const flexdiff_config* config, char** out) {
    return guarded([&] {
        need(config, "config");
        need(out, "out");
        *out = dup_string(flexdiff::run_config_to_text(config->value));
    });
}

flexdiff_status flexdiff_config_hash(const flexdiff_config* config, char out[17]) {
    return guarded([&] {
        need(config, "config");
        need(out, "out");
        const std::string h = flexdiff::config_hash(flexdiff::run_config_to_text(config->value));
        std::memcpy(out, h.c_str(), 17);
    });
}

void flexdiff_config_free(flexdiff_config* config) { delete config; }

flexdiff_status flexdiff_preset_names(char** out) {
    return guarded([&] {
        need(out, "out");
        std::string s;
        for (const auto& n : flexdiff::preset_names()) s += (s.empty() ? "" : ",") + n;
        *out = dup_string(s);
    });
}

flexdiff_status flexdiff_simulate(const flexdiff_config* config, const char* output, flexdiff_log_fn log,
                                  void* user) {
    return guarded([&] {
        need(config, "config");
        flexdiff::cmd_simulate(config->value, str_or_empty(output), make_log(log, user));
    });
}

flexdiff_status flexdiff_make_dataset(const flexdiff_config* config, const char* const* trajectories,
                                      size_t n_trajectories, const char* out_dir, flexdiff_log_fn log,
                                      void* user) {
    return guarded([&] {
        need(config, "config");
        std::vector<std::string> paths;
        for (size_t i = 0; i < n_trajectories; ++i) {
            need(trajectories[i], "trajectory path");
            paths.emplace_back(trajectories[i]);
        }
        flexdiff::cmd_make_dataset(config->value, paths, str_or_empty(out_dir), make_log(log, user));
    });
}

flexdiff_status flexdiff_train(const flexdiff_config* config, const char* dataset_dir, const char* out_dir,
                               const char* resume, int64_t stop_after, flexdiff_log_fn log, void* user) {
    return guarded([&] {
        need(config, "config");
        need(dataset_dir, "dataset_dir");
        flexdiff::TrainRunOptions options;
        options.resume = str_or_empty(resume);
        options.stop_after = stop_after;
        flexdiff::cmd_train(config->value, dataset_dir, str_or_empty(out_dir), options, make_log(log, user));
    });
}

flexdiff_status flexdiff_sample(const flexdiff_config* config, const char* checkpoint, const char* dataset_dir,
                                const char* out_dir, flexdiff_task task, int rollout, flexdiff_log_fn log,
                                void* user) {
    return guarded([&] {
        need(config, "config");
        need(checkpoint, "checkpoint");
        need(dataset_dir, "dataset_dir");
        flexdiff::SampleRunOptions options;
        options.task = task == FLEXDIFF_TASK_FC ? flexdiff::Task::FC : flexdiff::Task::SR;
        options.rollout = rollout != 0;
        flexdiff::cmd_sample(config->value, checkpoint, dataset_dir, str_or_empty(out_dir), options,
                             make_log(log, user));
    });
}

flexdiff_status flexdiff_evaluate(const flexdiff_config* config, const char* predictions, const char* truth,
                                  const char* std, const char* baseline, const char* out_dir,
                                  flexdiff_log_fn log, void* user) {
    return guarded([&] {
        need(config, "config");
        flexdiff::EvaluateInputs in{str_or_empty(predictions), str_or_empty(truth), str_or_empty(std),
                                    str_or_empty(baseline)};
        flexdiff::cmd_evaluate(config->value, in, str_or_empty(out_dir), make_log(log, user));
    });
}

flexdiff_status flexdiff_theory(const flexdiff_config* config, const char* dataset_dir, const char* out_dir,
                                flexdiff_log_fn log, void* user) {
    return guarded([&] {
        need(config, "config");
        need(dataset_dir, "dataset_dir");
        flexdiff::cmd_theory(config->value, dataset_dir, str_or_empty(out_dir), make_log(log, user));
    });
}

flexdiff_status flexdiff_dataset_read(const char* path, flexdiff_dataset** out) {
    return guarded([&] {
        need(path, "path");
        need(out, "out");
        *out = new flexdiff_dataset{flexdiff::read_dataset(path)};
    });
}

flexdiff_status flexdiff_dataset_info(const flexdiff_dataset* dataset, size_t* count, int64_t* ny, int64_t* nx,
                                      double* norm_std) {
    return guarded([&] {
        need(dataset, "dataset");
        if (count) *count = dataset->value.snapshots.size();
        if (ny) *ny = dataset->value.header.ny;
        if (nx) *nx = dataset->value.header.nx;
        if (norm_std) *norm_std = dataset->value.header.norm_std;
    });
}

flexdiff_status flexdiff_dataset_snapshot(const flexdiff_dataset* dataset, size_t index, float* out,
                                          size_t capacity) {
    return guarded([&] {
        need(dataset, "dataset");
        need(out, "out");
        const auto& snaps = dataset->value.snapshots;
        flexdiff::require(index < snaps.size(), flexdiff::ErrorKind::Parameter,
                          "snapshot index " + std::to_string(index) + " out of range");
        const flexdiff::Tensor& t = snaps[index];
        flexdiff::require(capacity >= static_cast<size_t>(t.numel()), flexdiff::ErrorKind::Shape,
                          "output buffer too small for snapshot");
        std::memcpy(out, t.data(), sizeof(float) * static_cast<size_t>(t.numel()));
    });
}

void flexdiff_dataset_free(flexdiff_dataset* dataset) { delete dataset; }

flexdiff_status flexdiff_model_load(const char* checkpoint, int use_ema, flexdiff_model** out) {
    return guarded([&] {
        need(checkpoint, "checkpoint");
        need(out, "out");
        flexdiff::TrainState state = flexdiff::load_checkpoint(checkpoint);
        auto* m = new flexdiff_model{};
        if (use_ema) {
            m->value.emplace(state.ema_model());
        } else {
            m->value.emplace(std::move(state.model));
        }
        *out = m;
    });
}

flexdiff_status flexdiff_model_parameter_count(const flexdiff_model* model, int64_t* out) {
    return guarded([&] {
        need(model, "model");
        need(out, "out");
        *out = model->value->parameter_count();
    });
}

flexdiff_status flexdiff_model_velocity(const flexdiff_model* model, double t, const float* z, int64_t h,
                                        int64_t w, const flexdiff_context* context, float* out) {
    return guarded([&] {
        need(model, "model");
        need(z, "z");
        need(out, "out");
        flexdiff::require(h > 0 && w > 0, flexdiff::ErrorKind::Shape, "grid sizes must be positive");
        const flexdiff::ConditioningContext ctx = to_context(context, h, w);
        const flexdiff::Tensor zt({h, w}, std::vector<float>(z, z + h * w));
        const flexdiff::Tensor v = model->value->predict(t, zt, ctx);
        std::memcpy(out, v.data(), sizeof(float) * static_cast<size_t>(v.numel()));
    });
}

flexdiff_status flexdiff_model_sample(const flexdiff_model* model, const flexdiff_context* context, int64_t h,
                                      int64_t w, int n_steps, uint64_t seed, float* out) {
    return guarded([&] {
        need(model, "model");
        need(out, "out");
        flexdiff::require(h > 0 && w > 0, flexdiff::ErrorKind::Shape, "grid sizes must be positive");
        const flexdiff::ConditioningContext ctx = to_context(context, h, w);
        const flexdiff::Tensor r =
            flexdiff::sample(model->value->predictor(), ctx, {h, w}, n_steps, default_schedule(), seed);
        std::memcpy(out, r.data(), sizeof(float) * static_cast<size_t>(r.numel()));
    });
}

void flexdiff_model_free(flexdiff_model* model) { delete model; }

flexdiff_status flexdiff_alpha_sigma(double t, double* alpha, double* sigma) {
    return guarded([&] {
        need(alpha, "alpha");
        need(sigma, "sigma");
        const auto [a, s] = default_schedule().alpha_sigma(t);
        *alpha = a;
        *sigma = s;
    });
}

flexdiff_status flexdiff_rfne(const float* pred, const float* truth, size_t n, double* out) {
    return guarded([&] {
        need(pred, "pred");
        need(truth, "truth");
        need(out, "out");
        const auto len = static_cast<int64_t>(n);
        *out = flexdiff::rfne(flexdiff::Tensor({len}, std::vector<float>(pred, pred + n)),
                              flexdiff::Tensor({len}, std::vector<float>(truth, truth + n)));
    });
}

flexdiff_status flexdiff_pcc(const float* pred, const float* truth, size_t n, double* out) {
    return guarded([&] {
        need(pred, "pred");
        need(truth, "truth");
        need(out, "out");
        const auto len = static_cast<int64_t>(n);
        *out = flexdiff::pcc(flexdiff::Tensor({len}, std::vector<float>(pred, pred + n)),
                             flexdiff::Tensor({len}, std::vector<float>(truth, truth + n)));
    });
}

} // extern "C"
