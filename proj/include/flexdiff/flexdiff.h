#ifndef FLEXDIFF_H
#define FLEXDIFF_H

#include <stddef.h>
#include <stdint.h>

#if defined(FLEXDIFF_BUILDING)
#define FLEXDIFF_API __attribute__((visibility("default")))
#else
#define FLEXDIFF_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum flexdiff_status {
    FLEXDIFF_OK = 0,
    FLEXDIFF_ERR_DOMAIN = 1,
    FLEXDIFF_ERR_SHAPE = 2,
    FLEXDIFF_ERR_CONFIG = 3,
    FLEXDIFF_ERR_PARAMETER = 4,
    FLEXDIFF_ERR_CONSISTENCY = 5,
    FLEXDIFF_ERR_ORDERING = 6,
    FLEXDIFF_ERR_CONTEXT = 7,
    FLEXDIFF_ERR_BATCH_LAYOUT = 8,
    FLEXDIFF_ERR_COVERAGE = 9,
    FLEXDIFF_ERR_UNDEFINED_METRIC = 10,
    FLEXDIFF_ERR_ESTIMATOR = 11,
    FLEXDIFF_ERR_ITERATION = 12,
    FLEXDIFF_ERR_IO = 13,
    FLEXDIFF_ERR_DATA = 14,
    FLEXDIFF_ERR_DIVERGENCE = 15,
    FLEXDIFF_ERR_USAGE = 16,
    FLEXDIFF_ERR_INTERNAL = 17
} flexdiff_status;

typedef enum flexdiff_task { FLEXDIFF_TASK_SR = 0, FLEXDIFF_TASK_FC = 1 } flexdiff_task;

FLEXDIFF_API const char* flexdiff_version(void);
FLEXDIFF_API const char* flexdiff_status_name(flexdiff_status status);
/* Message of the most recent failure on the calling thread ("" if none). */
FLEXDIFF_API const char* flexdiff_last_error(void);
/* Process exit code for a status: 0 ok, 2 usage/config, 3 data, 4 divergence, 1 otherwise. */
FLEXDIFF_API int flexdiff_exit_code(flexdiff_status status);
/* Applies FLEXDIFF_THREADS (default 1) to the numerical backends. */
FLEXDIFF_API flexdiff_status flexdiff_apply_thread_limit(int* threads);
FLEXDIFF_API void flexdiff_string_free(char* s);

/* Run configuration */
typedef struct flexdiff_config flexdiff_config;

FLEXDIFF_API flexdiff_status flexdiff_config_default(flexdiff_config** out);
FLEXDIFF_API flexdiff_status flexdiff_config_parse(const char* text, flexdiff_config** out);
FLEXDIFF_API flexdiff_status flexdiff_config_load(const char* path, flexdiff_config** out);
/* key is "section.field"; value is JSON text or a bare string. */
FLEXDIFF_API flexdiff_status flexdiff_config_set(flexdiff_config* config, const char* key, const char* value);
/* Canonical text; release with flexdiff_string_free. */
FLEXDIFF_API flexdiff_status flexdiff_config_text(const flexdiff_config* config, char** out);
/* 16 hex digits plus terminator. */
FLEXDIFF_API flexdiff_status flexdiff_config_hash(const flexdiff_config* config, char out[17]);
FLEXDIFF_API void flexdiff_config_free(flexdiff_config* config);
/* Comma-separated preset names; release with flexdiff_string_free. */
FLEXDIFF_API flexdiff_status flexdiff_preset_names(char** out);

/* Commands. log may be NULL; it receives one line per call. */
typedef void (*flexdiff_log_fn)(void* user, const char* line);

FLEXDIFF_API flexdiff_status flexdiff_simulate(const flexdiff_config* config, const char* output,
                                               flexdiff_log_fn log, void* user);
FLEXDIFF_API flexdiff_status flexdiff_make_dataset(const flexdiff_config* config, const char* const* trajectories,
                                                   size_t n_trajectories, const char* out_dir,
                                                   flexdiff_log_fn log, void* user);
/* resume may be NULL; stop_after 0 trains to train.steps. */
FLEXDIFF_API flexdiff_status flexdiff_train(const flexdiff_config* config, const char* dataset_dir,
                                            const char* out_dir, const char* resume, int64_t stop_after,
                                            flexdiff_log_fn log, void* user);
FLEXDIFF_API flexdiff_status flexdiff_sample(const flexdiff_config* config, const char* checkpoint,
                                             const char* dataset_dir, const char* out_dir, flexdiff_task task,
                                             int rollout, flexdiff_log_fn log, void* user);
/* std and baseline may be NULL. */
FLEXDIFF_API flexdiff_status flexdiff_evaluate(const flexdiff_config* config, const char* predictions,
                                               const char* truth, const char* std, const char* baseline,
                                               const char* out_dir, flexdiff_log_fn log, void* user);
FLEXDIFF_API flexdiff_status flexdiff_theory(const flexdiff_config* config, const char* dataset_dir,
                                             const char* out_dir, flexdiff_log_fn log, void* user);

/* Datasets */
typedef struct flexdiff_dataset flexdiff_dataset;

FLEXDIFF_API flexdiff_status flexdiff_dataset_read(const char* path, flexdiff_dataset** out);
FLEXDIFF_API flexdiff_status flexdiff_dataset_info(const flexdiff_dataset* dataset, size_t* count, int64_t* ny,
                                                   int64_t* nx, double* norm_std);
/* Copies snapshot index into out (capacity floats). */
FLEXDIFF_API flexdiff_status flexdiff_dataset_snapshot(const flexdiff_dataset* dataset, size_t index, float* out,
                                                       size_t capacity);
FLEXDIFF_API void flexdiff_dataset_free(flexdiff_dataset* dataset);

/* Models */
typedef struct flexdiff_model flexdiff_model;

typedef struct flexdiff_context {
    flexdiff_task task;
    const float* const* snapshots; /* h*w grids in normalized units: up(LR) for SR, (previous, current) for FC */
    size_t n_snapshots;
    double re_tag;
    int step_index;
    int upsample_factor;
} flexdiff_context;

FLEXDIFF_API flexdiff_status flexdiff_model_load(const char* checkpoint, int use_ema, flexdiff_model** out);
FLEXDIFF_API flexdiff_status flexdiff_model_parameter_count(const flexdiff_model* model, int64_t* out);
/* v_theta(t, z, C) for one h*w item. */
FLEXDIFF_API flexdiff_status flexdiff_model_velocity(const flexdiff_model* model, double t, const float* z,
                                                     int64_t h, int64_t w, const flexdiff_context* context,
                                                     float* out);
/* DDIM sample of a normalized residual (uniform time grid). */
FLEXDIFF_API flexdiff_status flexdiff_model_sample(const flexdiff_model* model, const flexdiff_context* context,
                                                   int64_t h, int64_t w, int n_steps, uint64_t seed, float* out);
FLEXDIFF_API void flexdiff_model_free(flexdiff_model* model);

/* Schedule and metrics */
FLEXDIFF_API flexdiff_status flexdiff_alpha_sigma(double t, double* alpha, double* sigma);
FLEXDIFF_API flexdiff_status flexdiff_rfne(const float* pred, const float* truth, size_t n, double* out);
FLEXDIFF_API flexdiff_status flexdiff_pcc(const float* pred, const float* truth, size_t n, double* out);

#ifdef __cplusplus
}
#endif

#endif
