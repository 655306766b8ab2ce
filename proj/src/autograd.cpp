#include "flexdiff/autograd.hpp"

#include "flexdiff/error.hpp"

#include <cblas.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <unordered_set>

namespace flexdiff {

namespace {

thread_local bool g_grad_enabled = true;

bool needs(const Var& v) { return v && v->requires_grad; }

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (g_grad_enabled && std::any_of(parents.begin(), parents.end(), needs)) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(fn);
    }
    return node;
}

void gemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m,
                n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

struct ConvGeom {
    int64_t n, ci, h, w, co, k, ho, wo;
    int stride, pad;
    int64_t kdim() const { return ci * k * k; }
    int64_t pixels() const { return ho * wo; }
    bool direct() const { return k == 1 && stride == 1 && pad == 0; }
};

void im2col(const ConvGeom& g, const float* x, float* col) {
    const int64_t P = g.pixels();
    for (int64_t c = 0; c < g.ci; ++c) {
        const float* xc = x + c * g.h * g.w;
        for (int64_t ki = 0; ki < g.k; ++ki) {
            for (int64_t kj = 0; kj < g.k; ++kj) {
                float* row = col + ((c * g.k + ki) * g.k + kj) * P;
                for (int64_t oh = 0; oh < g.ho; ++oh) {
                    const int64_t ih = oh * g.stride - g.pad + ki;
                    float* dst = row + oh * g.wo;
                    if (ih < 0 || ih >= g.h) {
                        std::fill(dst, dst + g.wo, 0.0f);
                        continue;
                    }
                    const float* src = xc + ih * g.w;
                    for (int64_t ow = 0; ow < g.wo; ++ow) {
                        const int64_t iw = ow * g.stride - g.pad + kj;
                        dst[ow] = (iw >= 0 && iw < g.w) ? src[iw] : 0.0f;
                    }
                }
            }
        }
    }
}

void col2im_add(const ConvGeom& g, const float* col, float* dx) {
    const int64_t P = g.pixels();
    for (int64_t c = 0; c < g.ci; ++c) {
        float* xc = dx + c * g.h * g.w;
        for (int64_t ki = 0; ki < g.k; ++ki) {
            for (int64_t kj = 0; kj < g.k; ++kj) {
                const float* row = col + ((c * g.k + ki) * g.k + kj) * P;
                for (int64_t oh = 0; oh < g.ho; ++oh) {
                    const int64_t ih = oh * g.stride - g.pad + ki;
                    if (ih < 0 || ih >= g.h) continue;
                    const float* src = row + oh * g.wo;
                    float* dst = xc + ih * g.w;
                    for (int64_t ow = 0; ow < g.wo; ++ow) {
                        const int64_t iw = ow * g.stride - g.pad + kj;
                        if (iw >= 0 && iw < g.w) dst[iw] += src[ow];
                    }
                }
            }
        }
    }
}

int64_t inner_size(const Shape& s) { return s.empty() ? 1 : s.back(); }

} // namespace

Tensor& Node::grad_buffer() {
    if (grad.empty() || !grad.same_shape(value)) grad = Tensor::zeros_like(value);
    return grad;
}

Var constant(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    return node;
}

Var parameter(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    return node;
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& root) {
    require(root && root->value.numel() == 1, ErrorKind::Shape,
            "backward requires a scalar root");
    if (!root->requires_grad) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent && parent->requires_grad && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->grad_buffer()[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
    // Release the graph; parameters (leaves) keep their gradients.
    for (Node* node : order) {
        if (node->backward_fn) {
            node->backward_fn = nullptr;
            node->parents.clear();
        }
    }
}

namespace ops {

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
    const Tensor& xv = x->value;
    const Tensor& wv = weight->value;
    require(xv.rank() == 4 && wv.rank() == 4, ErrorKind::Shape, "conv2d expects NCHW input");
    require(xv.dim(1) == wv.dim(1), ErrorKind::Shape,
            "conv2d channel mismatch: input " + shape_str(xv.shape()) + " weight " +
                shape_str(wv.shape()));
    ConvGeom g{};
    g.n = xv.dim(0);
    g.ci = xv.dim(1);
    g.h = xv.dim(2);
    g.w = xv.dim(3);
    g.co = wv.dim(0);
    g.k = wv.dim(2);
    g.stride = stride;
    g.pad = pad;
    g.ho = (g.h + 2 * pad - g.k) / stride + 1;
    g.wo = (g.w + 2 * pad - g.k) / stride + 1;
    require(g.ho > 0 && g.wo > 0, ErrorKind::Shape, "conv2d output would be empty");

    const int64_t K = g.kdim();
    const int64_t P = g.pixels();
    Tensor out({g.n, g.co, g.ho, g.wo});
    std::vector<float> col(g.direct() ? 0 : static_cast<size_t>(K * P));
    for (int64_t n = 0; n < g.n; ++n) {
        const float* xn = xv.data() + n * g.ci * g.h * g.w;
        const float* src = xn;
        if (!g.direct()) {
            im2col(g, xn, col.data());
            src = col.data();
        }
        float* yn = out.data() + n * g.co * P;
        gemm(false, false, static_cast<int>(g.co), static_cast<int>(P), static_cast<int>(K), 1.0f,
             wv.data(), static_cast<int>(K), src, static_cast<int>(P), 0.0f, yn,
             static_cast<int>(P));
        if (bias) {
            for (int64_t c = 0; c < g.co; ++c) {
                const float b = bias->value[c];
                float* row = yn + c * P;
                for (int64_t p = 0; p < P; ++p) row[p] += b;
            }
        }
    }

    return make_node(std::move(out), {x, weight, bias}, [g](Node& self) {
        const Var& x = self.parents[0];
        const Var& w = self.parents[1];
        const Var& b = self.parents[2];
        const int64_t K = g.kdim();
        const int64_t P = g.pixels();
        const Tensor& dy = self.grad;
        std::vector<float> col(static_cast<size_t>(K * P));
        std::vector<float> dcol(g.direct() ? 0 : static_cast<size_t>(K * P));
        for (int64_t n = 0; n < g.n; ++n) {
            const float* dyn = dy.data() + n * g.co * P;
            const float* xn = x->value.data() + n * g.ci * g.h * g.w;
            if (needs(w)) {
                const float* src = xn;
                if (!g.direct()) {
                    im2col(g, xn, col.data());
                    src = col.data();
                }
                gemm(false, true, static_cast<int>(g.co), static_cast<int>(K),
                     static_cast<int>(P), 1.0f, dyn, static_cast<int>(P), src,
                     static_cast<int>(P), 1.0f, w->grad_buffer().data(), static_cast<int>(K));
            }
            if (needs(x)) {
                float* dxn = x->grad_buffer().data() + n * g.ci * g.h * g.w;
                if (g.direct()) {
                    gemm(true, false, static_cast<int>(K), static_cast<int>(P),
                         static_cast<int>(g.co), 1.0f, w->value.data(), static_cast<int>(K), dyn,
                         static_cast<int>(P), 1.0f, dxn, static_cast<int>(P));
                } else {
                    gemm(true, false, static_cast<int>(K), static_cast<int>(P),
                         static_cast<int>(g.co), 1.0f, w->value.data(), static_cast<int>(K), dyn,
                         static_cast<int>(P), 0.0f, dcol.data(), static_cast<int>(P));
                    col2im_add(g, dcol.data(), dxn);
                }
            }
            if (needs(b)) {
                float* db = b->grad_buffer().data();
                for (int64_t c = 0; c < g.co; ++c) {
                    double s = 0.0;
                    const float* row = dyn + c * P;
                    for (int64_t p = 0; p < P; ++p) s += row[p];
                    db[c] += static_cast<float>(s);
                }
            }
        }
    });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
    const Tensor& xv = x->value;
    const Tensor& wv = weight->value;
    require(wv.rank() == 2 && inner_size(xv.shape()) == wv.dim(1), ErrorKind::Shape,
            "linear: input " + shape_str(xv.shape()) + " weight " + shape_str(wv.shape()));
    const int64_t K = wv.dim(1);
    const int64_t N = wv.dim(0);
    const int64_t M = xv.numel() / K;
    Shape out_shape = xv.shape();
    out_shape.back() = N;
    Tensor out(out_shape);
    gemm(false, true, static_cast<int>(M), static_cast<int>(N), static_cast<int>(K), 1.0f,
         xv.data(), static_cast<int>(K), wv.data(), static_cast<int>(K), 0.0f, out.data(),
         static_cast<int>(N));
    if (bias) {
        for (int64_t m = 0; m < M; ++m) {
            float* row = out.data() + m * N;
            for (int64_t j = 0; j < N; ++j) row[j] += bias->value[j];
        }
    }
    return make_node(std::move(out), {x, weight, bias}, [M, N, K](Node& self) {
        const Var& x = self.parents[0];
        const Var& w = self.parents[1];
        const Var& b = self.parents[2];
        const float* dy = self.grad.data();
        if (needs(x)) {
            gemm(false, false, static_cast<int>(M), static_cast<int>(K), static_cast<int>(N), 1.0f,
                 dy, static_cast<int>(N), w->value.data(), static_cast<int>(K), 1.0f,
                 x->grad_buffer().data(), static_cast<int>(K));
        }
        if (needs(w)) {
            gemm(true, false, static_cast<int>(N), static_cast<int>(K), static_cast<int>(M), 1.0f,
                 dy, static_cast<int>(N), x->value.data(), static_cast<int>(K), 1.0f,
                 w->grad_buffer().data(), static_cast<int>(K));
        }
        if (needs(b)) {
            float* db = b->grad_buffer().data();
            for (int64_t m = 0; m < M; ++m) {
                for (int64_t j = 0; j < N; ++j) db[j] += dy[m * N + j];
            }
        }
    });
}

Var add(const Var& a, const Var& b) {
    check_same_shape(a->value, b->value, "add");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
    return make_node(std::move(out), {a, b}, [](Node& self) {
        for (const Var& p : self.parents) {
            if (!needs(p)) continue;
            Tensor& g = p->grad_buffer();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
    });
}

Var sub(const Var& a, const Var& b) { return add(a, scale(b, -1.0f)); }

Var scale(const Var& x, float factor) {
    Tensor out = x->value;
    for (auto& v : out.values()) v *= factor;
    return make_node(std::move(out), {x}, [factor](Node& self) {
        Tensor& g = self.parents[0]->grad_buffer();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += factor * self.grad[i];
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a->value, b->value, "mul");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
    return make_node(std::move(out), {a, b}, [](Node& self) {
        const Var& a = self.parents[0];
        const Var& b = self.parents[1];
        if (needs(a)) {
            Tensor& g = a->grad_buffer();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * b->value[i];
        }
        if (needs(b)) {
            Tensor& g = b->grad_buffer();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * a->value[i];
        }
    });
}

Var scale_shift(const Var& x, const Var& ss) {
    const Tensor& xv = x->value;
    require(xv.rank() == 4 && ss->value.rank() == 2 && ss->value.dim(0) == xv.dim(0) &&
                ss->value.dim(1) == 2 * xv.dim(1),
            ErrorKind::Shape,
            "scale_shift: " + shape_str(xv.shape()) + " vs " + shape_str(ss->value.shape()));
    const int64_t N = xv.dim(0), C = xv.dim(1), P = xv.dim(2) * xv.dim(3);
    Tensor out(xv.shape());
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
            const float s = 1.0f + ss->value[n * 2 * C + c];
            const float t = ss->value[n * 2 * C + C + c];
            const float* src = xv.data() + (n * C + c) * P;
            float* dst = out.data() + (n * C + c) * P;
            for (int64_t p = 0; p < P; ++p) dst[p] = src[p] * s + t;
        }
    }
    return make_node(std::move(out), {x, ss}, [N, C, P](Node& self) {
        const Var& x = self.parents[0];
        const Var& ss = self.parents[1];
        for (int64_t n = 0; n < N; ++n) {
            for (int64_t c = 0; c < C; ++c) {
                const float* dy = self.grad.data() + (n * C + c) * P;
                if (needs(x)) {
                    const float s = 1.0f + ss->value[n * 2 * C + c];
                    float* dx = x->grad_buffer().data() + (n * C + c) * P;
                    for (int64_t p = 0; p < P; ++p) dx[p] += dy[p] * s;
                }
                if (needs(ss)) {
                    const float* xs = x->value.data() + (n * C + c) * P;
                    double ds = 0.0, dt = 0.0;
                    for (int64_t p = 0; p < P; ++p) {
                        ds += static_cast<double>(dy[p]) * xs[p];
                        dt += dy[p];
                    }
                    Tensor& g = ss->grad_buffer();
                    g[n * 2 * C + c] += static_cast<float>(ds);
                    g[n * 2 * C + C + c] += static_cast<float>(dt);
                }
            }
        }
    });
}

Var silu(const Var& x) {
    Tensor out = x->value;
    for (auto& v : out.values()) v = v / (1.0f + std::exp(-v));
    return make_node(std::move(out), {x}, [](Node& self) {
        const Var& x = self.parents[0];
        Tensor& g = x->grad_buffer();
        for (int64_t i = 0; i < g.numel(); ++i) {
            const float v = x->value[i];
            const float s = 1.0f / (1.0f + std::exp(-v));
            g[i] += self.grad[i] * s * (1.0f + v * (1.0f - s));
        }
    });
}

Var gelu(const Var& x) {
    constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
    constexpr float kA = 0.044715f;
    Tensor out = x->value;
    for (auto& v : out.values()) v = 0.5f * v * (1.0f + std::tanh(kC * (v + kA * v * v * v)));
    return make_node(std::move(out), {x}, [](Node& self) {
        const Var& x = self.parents[0];
        Tensor& g = x->grad_buffer();
        for (int64_t i = 0; i < g.numel(); ++i) {
            const float v = x->value[i];
            const float th = std::tanh(kC * (v + kA * v * v * v));
            const float d = 0.5f * (1.0f + th) +
                            0.5f * v * (1.0f - th * th) * kC * (1.0f + 3.0f * kA * v * v);
            g[i] += self.grad[i] * d;
        }
    });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, float eps) {
    const Tensor& xv = x->value;
    require(xv.rank() == 4 && xv.dim(1) % groups == 0, ErrorKind::Shape,
            "group_norm: channels not divisible by groups");
    const int64_t N = xv.dim(0), C = xv.dim(1), P = xv.dim(2) * xv.dim(3);
    const int64_t cg = C / groups;
    Tensor xhat(xv.shape());
    std::vector<float> rstd(static_cast<size_t>(N * groups));
    Tensor out(xv.shape());
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t gi = 0; gi < groups; ++gi) {
            const int64_t off = (n * C + gi * cg) * P;
            const int64_t cnt = cg * P;
            double mean = 0.0;
            for (int64_t i = 0; i < cnt; ++i) mean += xv[off + i];
            mean /= static_cast<double>(cnt);
            double var = 0.0;
            for (int64_t i = 0; i < cnt; ++i) {
                const double d = xv[off + i] - mean;
                var += d * d;
            }
            var /= static_cast<double>(cnt);
            const float r = static_cast<float>(1.0 / std::sqrt(var + eps));
            rstd[static_cast<size_t>(n * groups + gi)] = r;
            for (int64_t c = 0; c < cg; ++c) {
                const int64_t ch = gi * cg + c;
                const float ga = gamma->value[ch];
                const float be = beta->value[ch];
                for (int64_t p = 0; p < P; ++p) {
                    const int64_t idx = off + c * P + p;
                    const float h = static_cast<float>((xv[idx] - mean) * r);
                    xhat[idx] = h;
                    out[idx] = h * ga + be;
                }
            }
        }
    }
    return make_node(std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), rstd = std::move(rstd), N, C, P, cg,
                      groups](Node& self) {
                         const Var& x = self.parents[0];
                         const Var& gamma = self.parents[1];
                         const Var& beta = self.parents[2];
                         const Tensor& dy = self.grad;
                         std::vector<float> dxh(static_cast<size_t>(cg * P));
                         for (int64_t n = 0; n < N; ++n) {
                             for (int64_t gi = 0; gi < groups; ++gi) {
                                 const int64_t off = (n * C + gi * cg) * P;
                                 double m1 = 0.0, m2 = 0.0;
                                 for (int64_t c = 0; c < cg; ++c) {
                                     const int64_t ch = gi * cg + c;
                                     const float ga = gamma->value[ch];
                                     double dga = 0.0, dbe = 0.0;
                                     for (int64_t p = 0; p < P; ++p) {
                                         const int64_t idx = off + c * P + p;
                                         const float d = dy[idx];
                                         dga += static_cast<double>(d) * xhat[idx];
                                         dbe += d;
                                         const float h = d * ga;
                                         dxh[static_cast<size_t>(c * P + p)] = h;
                                         m1 += h;
                                         m2 += static_cast<double>(h) * xhat[idx];
                                     }
                                     if (needs(gamma)) gamma->grad_buffer()[ch] += static_cast<float>(dga);
                                     if (needs(beta)) beta->grad_buffer()[ch] += static_cast<float>(dbe);
                                 }
                                 if (!needs(x)) continue;
                                 const double cnt = static_cast<double>(cg * P);
                                 m1 /= cnt;
                                 m2 /= cnt;
                                 const float r = rstd[static_cast<size_t>(n * groups + gi)];
                                 float* dx = x->grad_buffer().data() + off;
                                 for (int64_t i = 0; i < cg * P; ++i) {
                                     dx[i] += static_cast<float>(
                                         r * (dxh[static_cast<size_t>(i)] - m1 - xhat[off + i] * m2));
                                 }
                             }
                         }
                     });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps) {
    const Tensor& xv = x->value;
    const int64_t D = inner_size(xv.shape());
    require(gamma->value.numel() == D, ErrorKind::Shape, "layer_norm width mismatch");
    const int64_t M = xv.numel() / D;
    Tensor xhat(xv.shape());
    std::vector<float> rstd(static_cast<size_t>(M));
    Tensor out(xv.shape());
    for (int64_t m = 0; m < M; ++m) {
        const float* row = xv.data() + m * D;
        double mean = 0.0;
        for (int64_t j = 0; j < D; ++j) mean += row[j];
        mean /= static_cast<double>(D);
        double var = 0.0;
        for (int64_t j = 0; j < D; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(D);
        const float r = static_cast<float>(1.0 / std::sqrt(var + eps));
        rstd[static_cast<size_t>(m)] = r;
        for (int64_t j = 0; j < D; ++j) {
            const float h = static_cast<float>((row[j] - mean) * r);
            xhat[m * D + j] = h;
            out[m * D + j] = h * gamma->value[j] + beta->value[j];
        }
    }
    return make_node(std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), rstd = std::move(rstd), M, D](Node& self) {
                         const Var& x = self.parents[0];
                         const Var& gamma = self.parents[1];
                         const Var& beta = self.parents[2];
                         std::vector<float> dxh(static_cast<size_t>(D));
                         for (int64_t m = 0; m < M; ++m) {
                             const float* dy = self.grad.data() + m * D;
                             const float* xh = xhat.data() + m * D;
                             double m1 = 0.0, m2 = 0.0;
                             for (int64_t j = 0; j < D; ++j) {
                                 if (needs(gamma)) gamma->grad_buffer()[j] += dy[j] * xh[j];
                                 if (needs(beta)) beta->grad_buffer()[j] += dy[j];
                                 const float h = dy[j] * gamma->value[j];
                                 dxh[static_cast<size_t>(j)] = h;
                                 m1 += h;
                                 m2 += static_cast<double>(h) * xh[j];
                             }
                             if (!needs(x)) continue;
                             m1 /= static_cast<double>(D);
                             m2 /= static_cast<double>(D);
                             const float r = rstd[static_cast<size_t>(m)];
                             float* dx = x->grad_buffer().data() + m * D;
                             for (int64_t j = 0; j < D; ++j) {
                                 dx[j] += static_cast<float>(
                                     r * (dxh[static_cast<size_t>(j)] - m1 - xh[j] * m2));
                             }
                         }
                     });
}

namespace {

// Bernoulli(keep) draws, four per 64-bit engine output at 16-bit resolution.
class KeepMask {
public:
    KeepMask(std::mt19937_64& rng, double keep)
        : rng_(rng), threshold_(static_cast<uint32_t>(std::lround(keep * 65536.0))) {}

    bool operator()() {
        if (left_ == 0) {
            bits_ = rng_();
            left_ = 4;
        }
        const bool k = (bits_ & 0xffffu) < threshold_;
        bits_ >>= 16;
        --left_;
        return k;
    }

private:
    std::mt19937_64& rng_;
    uint32_t threshold_;
    uint64_t bits_ = 0;
    int left_ = 0;
};

} // namespace

Var self_attention(const Var& qkv, int heads, float dropout_p, std::mt19937_64* rng) {
    const Tensor& in = qkv->value;
    require(in.rank() == 3 && in.dim(2) % 3 == 0, ErrorKind::Shape,
            "self_attention expects [B,T,3d]");
    const int64_t B = in.dim(0), T = in.dim(1), d = in.dim(2) / 3;
    require(d % heads == 0, ErrorKind::Config, "attention heads must divide the width");
    const int64_t dh = d / heads;
    const float sc = 1.0f / std::sqrt(static_cast<float>(dh));
    const bool use_dropout = rng != nullptr && dropout_p > 0.0f && grad_enabled();
    const float keep_scale = use_dropout ? 1.0f / (1.0f - dropout_p) : 1.0f;
    const int ld = static_cast<int>(3 * d);
    const int ldo = static_cast<int>(d);

    Tensor out({B, T, d});
    // Softmax probabilities, and their dropped-out version when dropout is active.
    auto probs = std::make_shared<std::vector<float>>(static_cast<size_t>(B * heads * T * T));
    std::shared_ptr<std::vector<float>> dropped;
    if (use_dropout) dropped = std::make_shared<std::vector<float>>(probs->size());

    for (int64_t b = 0; b < B; ++b) {
        for (int64_t h = 0; h < heads; ++h) {
            const float* q = in.data() + b * T * 3 * d + h * dh;
            const float* k = q + d;
            const float* v = q + 2 * d;
            float* P = probs->data() + (b * heads + h) * T * T;
            gemm(false, true, static_cast<int>(T), static_cast<int>(T), static_cast<int>(dh), sc, q,
                 ld, k, ld, 0.0f, P, static_cast<int>(T));
            for (int64_t i = 0; i < T; ++i) {
                float* row = P + i * T;
                const float mx = *std::max_element(row, row + T);
                double s = 0.0;
                for (int64_t j = 0; j < T; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    s += row[j];
                }
                const float inv = static_cast<float>(1.0 / s);
                for (int64_t j = 0; j < T; ++j) row[j] *= inv;
            }
            const float* A = P;
            if (use_dropout) {
                float* D = dropped->data() + (b * heads + h) * T * T;
                KeepMask keep(*rng, 1.0 - dropout_p);
                for (int64_t i = 0; i < T * T; ++i) D[i] = keep() ? P[i] * keep_scale : 0.0f;
                A = D;
            }
            gemm(false, false, static_cast<int>(T), static_cast<int>(dh), static_cast<int>(T), 1.0f,
                 A, static_cast<int>(T), v, ld, 0.0f, out.data() + b * T * d + h * dh, ldo);
        }
    }

    return make_node(std::move(out), {qkv}, [=](Node& self) {
        const Var& qkv = self.parents[0];
        const Tensor& in = qkv->value;
        Tensor& gin = qkv->grad_buffer();
        std::vector<float> dA(static_cast<size_t>(T * T));
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t h = 0; h < heads; ++h) {
                const float* q = in.data() + b * T * 3 * d + h * dh;
                const float* k = q + d;
                const float* v = q + 2 * d;
                float* gq = gin.data() + b * T * 3 * d + h * dh;
                float* gk = gq + d;
                float* gv = gq + 2 * d;
                const float* P = probs->data() + (b * heads + h) * T * T;
                const float* A = use_dropout ? dropped->data() + (b * heads + h) * T * T : P;
                const float* dO = self.grad.data() + b * T * d + h * dh;
                // dV += A^T dO
                gemm(true, false, static_cast<int>(T), static_cast<int>(dh), static_cast<int>(T),
                     1.0f, A, static_cast<int>(T), dO, ldo, 1.0f, gv, ld);
                // dA = dO V^T
                gemm(false, true, static_cast<int>(T), static_cast<int>(T), static_cast<int>(dh),
                     1.0f, dO, ldo, v, ld, 0.0f, dA.data(), static_cast<int>(T));
                if (use_dropout) {
                    for (int64_t i = 0; i < T * T; ++i) {
                        dA[static_cast<size_t>(i)] = A[i] != 0.0f ? dA[static_cast<size_t>(i)] * keep_scale : 0.0f;
                    }
                }
                // Softmax backward in place: dS = P * (dP - rowsum(dP * P)).
                for (int64_t i = 0; i < T; ++i) {
                    float* dr = dA.data() + i * T;
                    const float* pr = P + i * T;
                    double dot = 0.0;
                    for (int64_t j = 0; j < T; ++j) dot += static_cast<double>(dr[j]) * pr[j];
                    for (int64_t j = 0; j < T; ++j) dr[j] = pr[j] * (dr[j] - static_cast<float>(dot));
                }
                gemm(false, false, static_cast<int>(T), static_cast<int>(dh), static_cast<int>(T),
                     sc, dA.data(), static_cast<int>(T), k, ld, 1.0f, gq, ld);
                gemm(true, false, static_cast<int>(T), static_cast<int>(dh), static_cast<int>(T),
                     sc, dA.data(), static_cast<int>(T), q, ld, 1.0f, gk, ld);
            }
        }
    });
}

Var dropout(const Var& x, float p, std::mt19937_64* rng) {
    if (rng == nullptr || p <= 0.0f || !grad_enabled()) return x;
    KeepMask keep(*rng, 1.0 - p);
    const float s = 1.0f / (1.0f - p);
    Tensor mask(x->value.shape());
    Tensor out = x->value;
    for (int64_t i = 0; i < out.numel(); ++i) {
        mask[i] = keep() ? s : 0.0f;
        out[i] *= mask[i];
    }
    return make_node(std::move(out), {x}, [mask = std::move(mask)](Node& self) {
        Tensor& g = self.parents[0]->grad_buffer();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * mask[i];
    });
}

Var concat_channels(const std::vector<Var>& xs) {
    require(!xs.empty(), ErrorKind::Shape, "concat_channels of nothing");
    const Shape& s0 = xs.front()->value.shape();
    require(s0.size() == 4, ErrorKind::Shape, "concat_channels expects NCHW");
    const int64_t N = s0[0], P = s0[2] * s0[3];
    int64_t C = 0;
    std::vector<int64_t> widths;
    for (const Var& x : xs) {
        const Shape& s = x->value.shape();
        require(s.size() == 4 && s[0] == N && s[2] == s0[2] && s[3] == s0[3], ErrorKind::Shape,
                "concat_channels: " + shape_str(s) + " vs " + shape_str(s0));
        widths.push_back(s[1]);
        C += s[1];
    }
    Tensor out({N, C, s0[2], s0[3]});
    for (int64_t n = 0; n < N; ++n) {
        int64_t c0 = 0;
        for (size_t i = 0; i < xs.size(); ++i) {
            const float* src = xs[i]->value.data() + n * widths[i] * P;
            std::copy(src, src + widths[i] * P, out.data() + (n * C + c0) * P);
            c0 += widths[i];
        }
    }
    return make_node(std::move(out), xs, [widths, N, C, P](Node& self) {
        for (int64_t n = 0; n < N; ++n) {
            int64_t c0 = 0;
            for (size_t i = 0; i < widths.size(); ++i) {
                const Var& p = self.parents[i];
                if (needs(p)) {
                    const float* src = self.grad.data() + (n * C + c0) * P;
                    float* dst = p->grad_buffer().data() + n * widths[i] * P;
                    for (int64_t j = 0; j < widths[i] * P; ++j) dst[j] += src[j];
                }
                c0 += widths[i];
            }
        }
    });
}

Var concat_batch(const std::vector<Var>& xs) {
    require(!xs.empty(), ErrorKind::Shape, "concat_batch of nothing");
    Shape s = xs.front()->value.shape();
    int64_t total = 0;
    std::vector<int64_t> sizes;
    for (const Var& x : xs) {
        Shape t = x->value.shape();
        require(t.size() == s.size() && std::equal(t.begin() + 1, t.end(), s.begin() + 1),
                ErrorKind::Shape, "concat_batch: trailing shape mismatch");
        sizes.push_back(x->value.numel());
        total += t[0];
    }
    s[0] = total;
    Tensor out(s);
    int64_t off = 0;
    for (const Var& x : xs) {
        std::copy(x->value.data(), x->value.data() + x->value.numel(), out.data() + off);
        off += x->value.numel();
    }
    return make_node(std::move(out), xs, [sizes](Node& self) {
        int64_t off = 0;
        for (size_t i = 0; i < sizes.size(); ++i) {
            const Var& p = self.parents[i];
            if (needs(p)) {
                float* dst = p->grad_buffer().data();
                for (int64_t j = 0; j < sizes[i]; ++j) dst[j] += self.grad[off + j];
            }
            off += sizes[i];
        }
    });
}

Var slice_batch(const Var& x, int64_t begin, int64_t end) {
    Shape s = x->value.shape();
    require(!s.empty() && begin >= 0 && end <= s[0] && begin <= end, ErrorKind::Shape,
            "slice_batch out of range");
    const int64_t item = x->value.numel() / std::max<int64_t>(s[0], 1);
    s[0] = end - begin;
    Tensor out(s);
    std::copy(x->value.data() + begin * item, x->value.data() + end * item, out.data());
    return make_node(std::move(out), {x}, [begin, item](Node& self) {
        float* dst = self.parents[0]->grad_buffer().data() + begin * item;
        for (int64_t j = 0; j < self.grad.numel(); ++j) dst[j] += self.grad[j];
    });
}

Var upsample_nearest2x(const Var& x) {
    const Tensor& xv = x->value;
    require(xv.rank() == 4, ErrorKind::Shape, "upsample expects NCHW");
    const int64_t NC = xv.dim(0) * xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor out({xv.dim(0), xv.dim(1), 2 * H, 2 * W});
    for (int64_t c = 0; c < NC; ++c) {
        const float* src = xv.data() + c * H * W;
        float* dst = out.data() + c * 4 * H * W;
        for (int64_t i = 0; i < 2 * H; ++i) {
            for (int64_t j = 0; j < 2 * W; ++j) dst[i * 2 * W + j] = src[(i / 2) * W + j / 2];
        }
    }
    return make_node(std::move(out), {x}, [NC, H, W](Node& self) {
        float* g = self.parents[0]->grad_buffer().data();
        for (int64_t c = 0; c < NC; ++c) {
            const float* src = self.grad.data() + c * 4 * H * W;
            float* dst = g + c * H * W;
            for (int64_t i = 0; i < 2 * H; ++i) {
                for (int64_t j = 0; j < 2 * W; ++j) dst[(i / 2) * W + j / 2] += src[i * 2 * W + j];
            }
        }
    });
}

Var patchify(const Var& x) {
    const Tensor& xv = x->value;
    require(xv.rank() == 4, ErrorKind::Shape, "patchify expects NCHW");
    const int64_t B = xv.dim(0), C = xv.dim(1), N = xv.dim(2) * xv.dim(3);
    Tensor out({B, N, C});
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t c = 0; c < C; ++c) {
            for (int64_t p = 0; p < N; ++p) out[(b * N + p) * C + c] = xv[(b * C + c) * N + p];
        }
    }
    return make_node(std::move(out), {x}, [B, C, N](Node& self) {
        Tensor& g = self.parents[0]->grad_buffer();
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t c = 0; c < C; ++c) {
                for (int64_t p = 0; p < N; ++p) g[(b * C + c) * N + p] += self.grad[(b * N + p) * C + c];
            }
        }
    });
}

Var unpatchify(const Var& tokens, int64_t h, int64_t w) {
    const Tensor& tv = tokens->value;
    require(tv.rank() == 3 && tv.dim(1) == h * w, ErrorKind::Shape, "unpatchify token count");
    const int64_t B = tv.dim(0), N = tv.dim(1), C = tv.dim(2);
    Tensor out({B, C, h, w});
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t p = 0; p < N; ++p) {
            for (int64_t c = 0; c < C; ++c) out[(b * C + c) * N + p] = tv[(b * N + p) * C + c];
        }
    }
    return make_node(std::move(out), {tokens}, [B, C, N](Node& self) {
        Tensor& g = self.parents[0]->grad_buffer();
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t p = 0; p < N; ++p) {
                for (int64_t c = 0; c < C; ++c) g[(b * N + p) * C + c] += self.grad[(b * C + c) * N + p];
            }
        }
    });
}

Var add_positional(const Var& tokens, const Var& pos) {
    const Tensor& tv = tokens->value;
    require(tv.rank() == 3 && pos->value.numel() == tv.dim(1) * tv.dim(2), ErrorKind::Shape,
            "positional embedding size mismatch: tokens " + shape_str(tv.shape()) + " pos " +
                shape_str(pos->value.shape()));
    const int64_t B = tv.dim(0), NC = tv.dim(1) * tv.dim(2);
    Tensor out = tv;
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t i = 0; i < NC; ++i) out[b * NC + i] += pos->value[i];
    }
    return make_node(std::move(out), {tokens, pos}, [B, NC](Node& self) {
        const Var& t = self.parents[0];
        const Var& p = self.parents[1];
        if (needs(t)) {
            Tensor& g = t->grad_buffer();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
        if (needs(p)) {
            Tensor& g = p->grad_buffer();
            for (int64_t b = 0; b < B; ++b) {
                for (int64_t i = 0; i < NC; ++i) g[i] += self.grad[b * NC + i];
            }
        }
    });
}

Var prepend_token(const Var& tokens, const Var& token) {
    const Tensor& tv = tokens->value;
    const int64_t B = tv.dim(0), N = tv.dim(1), C = tv.dim(2);
    require(token->value.numel() == B * C, ErrorKind::Shape, "prepend_token width mismatch");
    Tensor out({B, N + 1, C});
    for (int64_t b = 0; b < B; ++b) {
        std::copy(token->value.data() + b * C, token->value.data() + (b + 1) * C,
                  out.data() + b * (N + 1) * C);
        std::copy(tv.data() + b * N * C, tv.data() + (b + 1) * N * C,
                  out.data() + (b * (N + 1) + 1) * C);
    }
    return make_node(std::move(out), {tokens, token}, [B, N, C](Node& self) {
        const Var& t = self.parents[0];
        const Var& k = self.parents[1];
        for (int64_t b = 0; b < B; ++b) {
            const float* src = self.grad.data() + b * (N + 1) * C;
            if (needs(k)) {
                float* dst = k->grad_buffer().data() + b * C;
                for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
            }
            if (needs(t)) {
                float* dst = t->grad_buffer().data() + b * N * C;
                for (int64_t i = 0; i < N * C; ++i) dst[i] += src[C + i];
            }
        }
    });
}

Var drop_first_token(const Var& tokens) {
    const Tensor& tv = tokens->value;
    const int64_t B = tv.dim(0), N = tv.dim(1) - 1, C = tv.dim(2);
    Tensor out({B, N, C});
    for (int64_t b = 0; b < B; ++b) {
        std::copy(tv.data() + (b * (N + 1) + 1) * C, tv.data() + (b + 1) * (N + 1) * C,
                  out.data() + b * N * C);
    }
    return make_node(std::move(out), {tokens}, [B, N, C](Node& self) {
        Tensor& g = self.parents[0]->grad_buffer();
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t i = 0; i < N * C; ++i) g[(b * (N + 1) + 1) * C + i] += self.grad[b * N * C + i];
        }
    });
}

Var resize_grid(const Var& grid, int64_t h0, int64_t w0, int64_t h, int64_t w) {
    const Tensor& gv = grid->value;
    require(gv.rank() == 2 && gv.dim(0) == h0 * w0, ErrorKind::Shape, "resize_grid size mismatch");
    if (h == h0 && w == w0) return grid;
    const int64_t C = gv.dim(1);
    struct Tap {
        int64_t src;
        float weight;
    };
    // Four taps per output cell, half-pixel centers, clamped at the border.
    auto axis_taps = [](int64_t n_out, int64_t n_in) {
        std::vector<std::pair<std::array<int64_t, 2>, std::array<float, 2>>> taps;
        for (int64_t i = 0; i < n_out; ++i) {
            double x = (i + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out) - 0.5;
            x = std::clamp(x, 0.0, static_cast<double>(n_in - 1));
            const int64_t i0 = static_cast<int64_t>(std::floor(x));
            const int64_t i1 = std::min(i0 + 1, n_in - 1);
            const float f = static_cast<float>(x - static_cast<double>(i0));
            taps.push_back({{i0, i1}, {1.0f - f, f}});
        }
        return taps;
    };
    const auto ty = axis_taps(h, h0);
    const auto tx = axis_taps(w, w0);
    std::vector<std::array<Tap, 4>> plan(static_cast<size_t>(h * w));
    for (int64_t i = 0; i < h; ++i) {
        for (int64_t j = 0; j < w; ++j) {
            auto& p = plan[static_cast<size_t>(i * w + j)];
            int k = 0;
            for (int a = 0; a < 2; ++a) {
                for (int b = 0; b < 2; ++b) {
                    p[static_cast<size_t>(k++)] = {ty[static_cast<size_t>(i)].first[a] * w0 +
                                                       tx[static_cast<size_t>(j)].first[b],
                                                   ty[static_cast<size_t>(i)].second[a] *
                                                       tx[static_cast<size_t>(j)].second[b]};
                }
            }
        }
    }
    Tensor out({h * w, C});
    for (int64_t o = 0; o < h * w; ++o) {
        for (const Tap& tap : plan[static_cast<size_t>(o)]) {
            for (int64_t c = 0; c < C; ++c) out[o * C + c] += tap.weight * gv[tap.src * C + c];
        }
    }
    return make_node(std::move(out), {grid}, [plan = std::move(plan), C](Node& self) {
        Tensor& g = self.parents[0]->grad_buffer();
        for (size_t o = 0; o < plan.size(); ++o) {
            for (const Tap& tap : plan[o]) {
                for (int64_t c = 0; c < C; ++c) {
                    g[tap.src * C + c] += tap.weight * self.grad[static_cast<int64_t>(o) * C + c];
                }
            }
        }
    });
}

Var l1_loss(const Var& pred, const Tensor& target) {
    check_same_shape(pred->value, target, "l1_loss");
    double s = 0.0;
    for (int64_t i = 0; i < target.numel(); ++i) s += std::abs(pred->value[i] - target[i]);
    const double n = static_cast<double>(target.numel());
    Tensor out({1}, static_cast<float>(s / n));
    return make_node(std::move(out), {pred}, [target, n](Node& self) {
        const Var& p = self.parents[0];
        Tensor& g = p->grad_buffer();
        const float scale = static_cast<float>(self.grad[0] / n);
        for (int64_t i = 0; i < g.numel(); ++i) {
            const float d = p->value[i] - target[i];
            g[i] += d > 0.0f ? scale : (d < 0.0f ? -scale : 0.0f);
        }
    });
}

Var l2_loss(const Var& pred, const Tensor& target) {
    check_same_shape(pred->value, target, "l2_loss");
    double s = 0.0;
    for (int64_t i = 0; i < target.numel(); ++i) {
        const double d = static_cast<double>(pred->value[i]) - target[i];
        s += d * d;
    }
    const double n = static_cast<double>(target.numel());
    Tensor out({1}, static_cast<float>(s / n));
    return make_node(std::move(out), {pred}, [target, n](Node& self) {
        const Var& p = self.parents[0];
        Tensor& g = p->grad_buffer();
        const float scale = static_cast<float>(2.0 * self.grad[0] / n);
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += scale * (p->value[i] - target[i]);
    });
}

Var sum(const Var& x) {
    double s = 0.0;
    for (float v : x->value.values()) s += v;
    Tensor out({1}, static_cast<float>(s));
    return make_node(std::move(out), {x}, [](Node& self) {
        Tensor& g = self.parents[0]->grad_buffer();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[0];
    });
}

} // namespace ops
} // namespace flexdiff
