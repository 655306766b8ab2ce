#pragma once

#include "flexdiff/backbone.hpp"
#include "flexdiff/diffusion.hpp"
#include "flexdiff/schedule.hpp"
#include "flexdiff/simulator.hpp"
#include "flexdiff/trainer.hpp"

#include <string>
#include <vector>

namespace flexdiff {

struct ScheduleConfig {
    double t_min = 1e-3;
    double t_max = 1.0 - 1e-3;

    NoiseSchedule make() const { return NoiseSchedule(ScheduleKind::Cosine, t_min, t_max); }
};

struct DataConfig {
    int factor = 4;           // SR upsampling factor
    int horizon = 1;          // FC step s
    int test_snapshots = 20;  // held out from the end of the test trajectory
    int skip_initial = 0;     // snapshots dropped from the start of every trajectory
    bool prefilter = false;
    double norm_std = 0.0;    // 0 derives the std from the training residuals
};

struct ModelConfig {
    std::string preset = "tiny";
    FlexConfig flex = flexdiff::preset("tiny");
};

struct SampleConfig {
    int n_steps = 2;
    int ensemble = 1;
    uint64_t seed = 0;
    TimeGrid grid = TimeGrid::UniformT;
    bool use_ema = true;
    int patch = 0;   // SR inference tile size; 0 samples whole fields
    int stride = 0;  // tile stride; 0 means patch / 2
};

struct EvalConfig {
    int rollout_horizon = 10;
    double std_floor = 1e-8;
};

struct TheoryConfig {
    std::vector<double> t_grid{0.001, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.999};
    int mc_samples = 100000;
    int patch = 8;
    int max_patches = 4000;
    double bandwidth = 0.0;  // 0 selects Silverman's rule
    uint64_t seed = 0;
};

struct RunConfig {
    ScheduleConfig schedule;
    SimConfig sim;
    DataConfig data;
    ModelConfig model;
    TrainConfig train;
    SampleConfig sample;
    EvalConfig eval;
    TheoryConfig theory;
};

const char* to_string(TimeGrid g);
TimeGrid time_grid_from_string(const std::string& s);

// Canonical text: pretty-printed JSON with sorted keys and every field present.
std::string flex_config_to_text(const FlexConfig& c);
FlexConfig flex_config_from_text(const std::string& text);

std::string train_config_to_text(const TrainConfig& c);
TrainConfig train_config_from_text(const std::string& text);

std::string run_config_to_text(const RunConfig& c);
// Missing keys keep their defaults; unknown keys are a config error. A model
// section may name a preset and override individual fields.
RunConfig run_config_from_text(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Sets "section.key" to a JSON value (a bare word is taken as a string) and
// re-validates. Setting model.preset discards earlier model field values.
RunConfig apply_override(const RunConfig& base, const std::string& dotted_key,
                         const std::string& value);

// 16 hex digits of FNV-1a over the canonical text.
std::string config_hash(const std::string& canonical_text);

} // namespace flexdiff
