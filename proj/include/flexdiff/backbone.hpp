#pragma once

#include "flexdiff/autograd.hpp"
#include "flexdiff/context.hpp"
#include "flexdiff/diffusion.hpp"

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace flexdiff {

enum class SkipFusion { Concat, Add };

struct FlexConfig {
    std::vector<int> enc_channels{8, 16};
    std::vector<int> enc_blocks{1, 1};
    std::vector<int> dec_channels{8, 16};
    std::vector<int> dec_blocks{1, 1};
    int vit_depth = 2;
    int vit_heads = 2;
    int weak_levels = 1;  // deepest level l that receives weak conditioning (l <= L_weak)
    bool weak_conditioning = true;
    bool strong_conditioning = true;
    // Without task encoders the snapshots are concatenated to the noisy input
    // instead (the input-concatenation ablation).
    bool task_encoders = true;
    std::vector<Task> tasks{Task::SR};
    int in_channels = 1;
    int image_size = 16;  // training resolution; fixes the positional-embedding grid
    float dropout = 0.1f;
    int fourier_features = 64;
    int mlp_ratio = 4;
    SkipFusion skip_fusion = SkipFusion::Concat;

    int levels() const { return static_cast<int>(enc_channels.size()) - 1; }
    int width() const { return enc_channels.back(); }
    bool has_task(Task task) const;

    // Throws ErrorKind::Config on list-length, divisibility, or range violations.
    void validate() const;
};

FlexConfig preset(const std::string& name);
std::vector<std::string> preset_names();

struct NamedParam {
    std::string name;
    Var var;
};

struct ForwardOptions {
    bool zero_cond_token = false;
    int zero_task_skip_level = -1;  // replace s_task at this level by zeros in the decoder
};

struct TaskEncoding {
    Tensor h_task;              // [d, H/2^L, W/2^L]
    std::vector<Tensor> skips;  // skips[l]: [C_l, H/2^l, W/2^l]
};

// The hybrid convolution/latent-transformer denoiser v_theta(t, z, C).
class FlexModel {
public:
    static FlexModel build(const FlexConfig& config, uint64_t seed);

    FlexModel(FlexModel&&) noexcept;
    FlexModel& operator=(FlexModel&&) noexcept;
    ~FlexModel();

    FlexModel clone() const;

    const FlexConfig& config() const;
    std::vector<NamedParam>& params();
    const std::vector<NamedParam>& params() const;
    int64_t parameter_count() const;
    bool all_finite() const;

    // z [B, in_channels, H, W]; contexts grouped SR before FC. dropout_rng
    // enables dropout (training); pass nullptr for inference.
    Var forward(const std::vector<double>& t, const Var& z,
                const std::vector<ConditioningContext>& contexts,
                const ForwardOptions& options = {}, std::mt19937_64* dropout_rng = nullptr) const;

    // Inference without graph recording. z is [H,W] (single item) or
    // [B,H,W] with every item sharing the context.
    Tensor predict(double t, const Tensor& z, const ConditioningContext& context,
                   const ForwardOptions& options = {}) const;

    VelocityPredictor predictor() const;

    TaskEncoding encode_task(const ConditioningContext& context) const;

    // tokens [B,N,d], pos [N,d], cond [B,d] -> [B,N,d] after the transformer
    // stack, conditioning token removed.
    Var latent_transformer(const Var& tokens, const Var& pos, const Var& cond,
                           std::mt19937_64* dropout_rng = nullptr) const;

    // Sequence length seen by the transformer for an H x W input.
    int64_t token_count(int64_t height, int64_t width) const;

private:
    struct Impl;
    explicit FlexModel(std::unique_ptr<Impl> impl);
    std::unique_ptr<Impl> impl_;
};

// Tensor shape of a single-channel grid as seen by the model.
Tensor as_model_input(const Tensor& grid);

} // namespace flexdiff
