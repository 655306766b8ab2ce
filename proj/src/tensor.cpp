#include "flexdiff/tensor.hpp"

#include "flexdiff/error.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace flexdiff {

const char* to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::Domain: return "domain";
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Config: return "config";
    case ErrorKind::Parameter: return "parameter";
    case ErrorKind::Consistency: return "consistency";
    case ErrorKind::Ordering: return "ordering";
    case ErrorKind::Context: return "context";
    case ErrorKind::BatchLayout: return "batch-layout";
    case ErrorKind::Coverage: return "coverage";
    case ErrorKind::UndefinedMetric: return "undefined-metric";
    case ErrorKind::Estimator: return "estimator";
    case ErrorKind::Iteration: return "iteration";
    case ErrorKind::Io: return "io";
    case ErrorKind::Data: return "data";
    case ErrorKind::Divergence: return "divergence";
    case ErrorKind::Usage: return "usage";
    case ErrorKind::Internal: return "internal";
    }
    return "unknown";
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (auto d : shape) {
        require(d >= 0, ErrorKind::Shape, "negative dimension in " + shape_str(shape));
        n *= d;
    }
    return n;
}

Tensor::Tensor(Shape shape, float fill)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
    require(static_cast<int64_t>(data_.size()) == shape_numel(shape_), ErrorKind::Shape,
            "value count " + std::to_string(data_.size()) + " does not match shape " +
                shape_str(shape_));
}

Tensor Tensor::reshaped(Shape shape) const {
    require(shape_numel(shape) == numel(), ErrorKind::Shape,
            "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) {
        fail(ErrorKind::Shape, std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                                   " vs " + shape_str(b.shape()));
    }
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "max_abs_diff");
    float m = 0.0f;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace flexdiff
