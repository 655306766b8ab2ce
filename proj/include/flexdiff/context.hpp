#pragma once

#include "flexdiff/tensor.hpp"

#include <array>
#include <string>
#include <vector>

namespace flexdiff {

enum class Task { SR, FC };

const char* to_string(Task task);
Task task_from_string(const std::string& name);

// Auxiliary conditioning for one sample. Snapshots are [H,W] grids in the
// model's normalized units: SR carries up(LR), FC carries the two most recent
// frames ordered (previous, current).
struct ConditioningContext {
    Task task = Task::SR;
    std::vector<Tensor> snapshots;
    double re_tag = 0.0;
    int step_index = 1;
    int upsample_factor = 1;

    // Throws ErrorKind::Context when the invariants do not hold.
    void validate() const;
};

inline constexpr int kContextFeatures = 3;
inline constexpr double kMaxForecastStep = 50.0;

// (log Reynolds / 10, step / max_step, log2(factor) / 3); fields that do not
// apply to the task are zero.
std::array<float, kContextFeatures> context_vector(const ConditioningContext& ctx);

} // namespace flexdiff
