#include "flexdiff/context.hpp"

#include "flexdiff/error.hpp"

#include <cmath>

namespace flexdiff {

const char* to_string(Task task) { return task == Task::SR ? "sr" : "fc"; }

Task task_from_string(const std::string& name) {
    if (name == "sr" || name == "SR") return Task::SR;
    if (name == "fc" || name == "FC") return Task::FC;
    fail(ErrorKind::Config, "unknown task '" + name + "' (expected sr or fc)");
}

void ConditioningContext::validate() const {
    const size_t expected = task == Task::SR ? 1 : 2;
    require(snapshots.size() == expected, ErrorKind::Context,
            std::string(to_string(task)) + " context needs " + std::to_string(expected) +
                " snapshot(s), got " + std::to_string(snapshots.size()));
    for (const Tensor& s : snapshots) {
        require(s.rank() == 2, ErrorKind::Context, "context snapshots must be 2D grids");
        require(s.same_shape(snapshots.front()), ErrorKind::Context,
                "context snapshots must share a grid");
    }
    require(std::isfinite(re_tag), ErrorKind::Context, "re_tag must be finite");
    require(upsample_factor >= 1, ErrorKind::Context, "upsample_factor must be >= 1");
    require(step_index >= 1, ErrorKind::Context, "step_index must be >= 1");
}

std::array<float, kContextFeatures> context_vector(const ConditioningContext& ctx) {
    std::array<float, kContextFeatures> v{};
    v[0] = ctx.re_tag > 1.0 ? static_cast<float>(std::log(ctx.re_tag) / 10.0) : 0.0f;
    if (ctx.task == Task::FC) {
        v[1] = static_cast<float>(ctx.step_index / kMaxForecastStep);
    } else {
        v[2] = static_cast<float>(std::log2(static_cast<double>(ctx.upsample_factor)) / 3.0);
    }
    return v;
}

} // namespace flexdiff
