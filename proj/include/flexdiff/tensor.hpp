#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace flexdiff {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& shape);
int64_t shape_numel(const Shape& shape);

// Dense row-major float32 array. Image tensors use NCHW layout, token tensors
// use [batch, tokens, width].
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> values);

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    const Shape& shape() const noexcept { return shape_; }
    int64_t dim(size_t axis) const { return shape_.at(axis); }
    size_t rank() const noexcept { return shape_.size(); }
    int64_t numel() const noexcept { return static_cast<int64_t>(data_.size()); }
    bool empty() const noexcept { return data_.empty(); }

    float* data() noexcept { return data_.data(); }
    const float* data() const noexcept { return data_.data(); }
    std::span<float> values() noexcept { return data_; }
    std::span<const float> values() const noexcept { return data_; }
    std::vector<float>& storage() noexcept { return data_; }
    const std::vector<float>& storage() const noexcept { return data_; }

    float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // Same storage, new shape; numel must match.
    Tensor reshaped(Shape shape) const;
    bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

    void fill(float value);
    bool all_finite() const noexcept;

private:
    Shape shape_;
    std::vector<float> data_;
};

// Throws ErrorKind::Shape with `what` in the message.
void check_same_shape(const Tensor& a, const Tensor& b, const char* what);

float max_abs_diff(const Tensor& a, const Tensor& b);

} // namespace flexdiff
