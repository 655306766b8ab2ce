#pragma once

#include "flexdiff/tensor.hpp"

#include <functional>
#include <memory>
#include <random>
#include <vector>

namespace flexdiff {

// Minimal reverse-mode autodiff over Tensor values. Each op records its
// parents and a closure that accumulates parent gradients; nothing is
// recorded while a NoGradGuard is alive.
struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily, same shape as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& grad_buffer();
};

using Var = std::shared_ptr<Node>;

Var constant(Tensor value);
Var parameter(Tensor value);

bool grad_enabled() noexcept;

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Seeds d(root)/d(root) = 1; root must hold a single element.
void backward(const Var& root);

namespace ops {

// x [N,Ci,H,W], weight [Co,Ci,k,k], bias [Co] or null.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);
// x [..., K], weight [N,K], bias [N] or null -> [..., N].
Var linear(const Var& x, const Var& weight, const Var& bias);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& x, float factor);
Var mul(const Var& a, const Var& b);

// x [N,C,H,W], ss [N,2C]: x * (1 + ss[:, :C]) + ss[:, C:].
Var scale_shift(const Var& x, const Var& ss);

Var silu(const Var& x);
Var gelu(const Var& x);

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, float eps = 1e-5f);
// Normalizes over the last axis.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-5f);

// qkv [B,T,3d] with q,k,v packed along the last axis -> [B,T,d].
// Attention-probability dropout is applied when rng is non-null and p > 0.
Var self_attention(const Var& qkv, int heads, float dropout_p, std::mt19937_64* rng);

Var dropout(const Var& x, float p, std::mt19937_64* rng);

// Channel-axis concatenation of NCHW tensors with equal N,H,W.
Var concat_channels(const std::vector<Var>& xs);
// Leading-axis concatenation and slicing (multitask vstack).
Var concat_batch(const std::vector<Var>& xs);
Var slice_batch(const Var& x, int64_t begin, int64_t end);

Var upsample_nearest2x(const Var& x);

// [B,C,h,w] <-> [B,h*w,C] (patch size 1).
Var patchify(const Var& x);
Var unpatchify(const Var& tokens, int64_t h, int64_t w);

// tokens [B,N,C] + pos [N,C] broadcast over B.
Var add_positional(const Var& tokens, const Var& pos);
// tokens [B,N,C], token [B,C] -> [B,N+1,C] with token first.
Var prepend_token(const Var& tokens, const Var& token);
Var drop_first_token(const Var& tokens);

// Bilinear resampling of a [h0*w0, C] grid of embeddings to [h*w, C].
Var resize_grid(const Var& grid, int64_t h0, int64_t w0, int64_t h, int64_t w);

// Mean absolute / mean squared error over all elements; target is constant.
Var l1_loss(const Var& pred, const Tensor& target);
Var l2_loss(const Var& pred, const Tensor& target);
Var sum(const Var& x);

} // namespace ops
} // namespace flexdiff
