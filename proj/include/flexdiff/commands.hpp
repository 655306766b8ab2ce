#pragma once

#include "flexdiff/config.hpp"

#include <functional>
#include <string>
#include <vector>

namespace flexdiff {

inline constexpr char kVersion[] = "0.1.0";

using LogFn = std::function<void(const std::string&)>;

// Caps BLAS parallelism at FLEXDIFF_THREADS (default 1).
int apply_thread_limit();

// Writes one trajectory file plus <output>.manifest.json.
void cmd_simulate(const RunConfig& config, const std::string& output, const LogFn& log = {});

// Splits trajectories into train/test files under out_dir and writes
// dataset.json. With several inputs the last one is the test trajectory.
void cmd_make_dataset(const RunConfig& config, const std::vector<std::string>& trajectories,
                      const std::string& out_dir, const LogFn& log = {});

struct TrainRunOptions {
    std::string resume;   // checkpoint to continue from
    int64_t stop_after = 0;  // save and stop at this step (0 runs to train.steps)
};

void cmd_train(const RunConfig& config, const std::string& dataset_dir, const std::string& out_dir,
               const TrainRunOptions& options = {}, const LogFn& log = {});

struct SampleRunOptions {
    Task task = Task::SR;
    bool rollout = false;  // FC only: autoregressive rollout from the first two test frames
};

// Writes pred/truth/baseline datasets (plus std with an ensemble) in physical units.
void cmd_sample(const RunConfig& config, const std::string& checkpoint,
                const std::string& dataset_dir, const std::string& out_dir,
                const SampleRunOptions& options = {}, const LogFn& log = {});

struct EvaluateInputs {
    std::string predictions;
    std::string truth;
    std::string std;       // optional ensemble std
    std::string baseline;  // optional reference predictions
};

void cmd_evaluate(const RunConfig& config, const EvaluateInputs& inputs, const std::string& out_dir,
                  const LogFn& log = {});

void cmd_theory(const RunConfig& config, const std::string& dataset_dir, const std::string& out_dir,
                const LogFn& log = {});

} // namespace flexdiff
