#include "flexdiff/backbone.hpp"

#include "flexdiff/error.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>

namespace flexdiff {

bool FlexConfig::has_task(Task task) const {
    return std::find(tasks.begin(), tasks.end(), task) != tasks.end();
}

void FlexConfig::validate() const {
    const size_t n = enc_channels.size();
    require(n >= 1, ErrorKind::Config, "enc_channels must not be empty");
    require(enc_blocks.size() == n && dec_channels.size() == n && dec_blocks.size() == n,
            ErrorKind::Config,
            "enc_channels, enc_blocks, dec_channels and dec_blocks must have equal length");
    require(enc_channels == dec_channels, ErrorKind::Config,
            "decoder channels must match the encoder channels");
    for (size_t i = 0; i < n; ++i) {
        require(enc_channels[i] > 0 && enc_blocks[i] >= 1 && dec_blocks[i] >= 1,
                ErrorKind::Config, "channel and block counts must be positive");
    }
    require(vit_depth >= 0 && vit_heads >= 1, ErrorKind::Config, "invalid transformer shape");
    require(width() % vit_heads == 0, ErrorKind::Config,
            "vit_heads (" + std::to_string(vit_heads) + ") must divide the bottleneck width " +
                std::to_string(width()));
    require(weak_levels >= 0 && weak_levels <= levels(), ErrorKind::Config,
            "weak_levels must lie in [0, L]");
    require(!tasks.empty(), ErrorKind::Config, "at least one task must be enabled");
    require(in_channels >= 1, ErrorKind::Config, "in_channels must be >= 1");
    require(image_size >= 1 && image_size % (1 << levels()) == 0, ErrorKind::Config,
            "image_size must be divisible by 2^L");
    require(dropout >= 0.0f && dropout < 1.0f, ErrorKind::Config, "dropout must lie in [0, 1)");
    require(fourier_features >= 2 && fourier_features % 2 == 0, ErrorKind::Config,
            "fourier_features must be even");
    require(mlp_ratio >= 1, ErrorKind::Config, "mlp_ratio must be >= 1");
}

FlexConfig preset(const std::string& name) {
    FlexConfig c;
    if (name == "tiny") {
        c.enc_channels = {8, 16};
        c.enc_blocks = {1, 1};
        c.vit_depth = 2;
        c.vit_heads = 2;
        c.image_size = 16;
    } else if (name == "desk") {
        c.enc_channels = {32, 64};
        c.enc_blocks = {1, 1};
        c.vit_depth = 2;
        c.vit_heads = 4;
        c.image_size = 64;
    } else if (name == "small") {
        c.enc_channels = {64, 128, 128, 256};
        c.enc_blocks = {2, 3, 3, 3};
        c.vit_depth = 13;
        c.vit_heads = 4;
        c.image_size = 256;
    } else if (name == "medium") {
        c.enc_channels = {64, 128, 256, 512};
        c.enc_blocks = {2, 3, 3, 4};
        c.vit_depth = 13;
        c.vit_heads = 8;
        c.image_size = 256;
    } else if (name == "large") {
        c.enc_channels = {128, 256, 512, 1152};
        c.enc_blocks = {2, 3, 3, 3};
        c.vit_depth = 21;
        c.vit_heads = 16;
        c.image_size = 256;
    } else {
        std::string names;
        for (const auto& n : preset_names()) names += (names.empty() ? "" : ", ") + n;
        fail(ErrorKind::Config, "unknown model preset '" + name + "' (available: " + names + ")");
    }
    c.dec_channels = c.enc_channels;
    c.dec_blocks = c.enc_blocks;
    return c;
}

std::vector<std::string> preset_names() { return {"tiny", "desk", "small", "medium", "large"}; }

Tensor as_model_input(const Tensor& grid) {
    require(grid.rank() == 2, ErrorKind::Shape, "expected a 2D grid");
    return grid.reshaped({1, 1, grid.dim(0), grid.dim(1)});
}

namespace {

int norm_groups(int channels) {
    for (int g : {8, 4, 2}) {
        if (channels % g == 0) return g;
    }
    return 1;
}

class ParamFactory {
public:
    ParamFactory(std::vector<NamedParam>& out, uint64_t seed) : out_(out), rng_(seed) {}

    Var uniform(const std::string& name, Shape shape, int64_t fan_in) {
        const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
        std::uniform_real_distribution<float> dist(-bound, bound);
        Tensor t(std::move(shape));
        for (auto& v : t.values()) v = dist(rng_);
        return add(name, std::move(t));
    }

    Var normal(const std::string& name, Shape shape, float stddev) {
        std::normal_distribution<float> dist(0.0f, stddev);
        Tensor t(std::move(shape));
        for (auto& v : t.values()) v = dist(rng_);
        return add(name, std::move(t));
    }

    Var filled(const std::string& name, Shape shape, float value) {
        return add(name, Tensor(std::move(shape), value));
    }

private:
    Var add(const std::string& name, Tensor t) {
        Var v = parameter(std::move(t));
        out_.push_back({name, v});
        return v;
    }

    std::vector<NamedParam>& out_;
    std::mt19937_64 rng_;
};

struct Conv {
    Var w, b;
    int stride = 1, pad = 1;

    Conv() = default;
    Conv(ParamFactory& f, const std::string& name, int cin, int cout, int k, int stride_ = 1)
        : stride(stride_), pad(k / 2) {
        const int64_t fan_in = static_cast<int64_t>(cin) * k * k;
        w = f.uniform(name + ".weight", {cout, cin, k, k}, fan_in);
        b = f.uniform(name + ".bias", {cout}, fan_in);
    }
    Var operator()(const Var& x) const { return ops::conv2d(x, w, b, stride, pad); }
};

struct Dense {
    Var w, b;

    Dense() = default;
    Dense(ParamFactory& f, const std::string& name, int in, int out) {
        w = f.uniform(name + ".weight", {out, in}, in);
        b = f.uniform(name + ".bias", {out}, in);
    }
    Var operator()(const Var& x) const { return ops::linear(x, w, b); }
};

struct GroupNorm {
    Var gamma, beta;
    int groups = 1;

    GroupNorm() = default;
    GroupNorm(ParamFactory& f, const std::string& name, int channels)
        : groups(norm_groups(channels)) {
        gamma = f.filled(name + ".gamma", {channels}, 1.0f);
        beta = f.filled(name + ".beta", {channels}, 0.0f);
    }
    Var operator()(const Var& x) const { return ops::group_norm(x, gamma, beta, groups); }
};

struct LayerNorm {
    Var gamma, beta;

    LayerNorm() = default;
    LayerNorm(ParamFactory& f, const std::string& name, int width) {
        gamma = f.filled(name + ".gamma", {width}, 1.0f);
        beta = f.filled(name + ".beta", {width}, 0.0f);
    }
    Var operator()(const Var& x) const { return ops::layer_norm(x, gamma, beta); }
};

// Pre-activation residual block with (t, C) injected as scale-and-shift.
struct ResBlock {
    GroupNorm norm1, norm2;
    Conv conv1, conv2;
    Dense cond;
    std::optional<Conv> skip;

    ResBlock(ParamFactory& f, const std::string& name, int cin, int cout, int emb) {
        norm1 = GroupNorm(f, name + ".norm1", cin);
        conv1 = Conv(f, name + ".conv1", cin, cout, 3);
        cond = Dense(f, name + ".cond", emb, 2 * cout);
        norm2 = GroupNorm(f, name + ".norm2", cout);
        conv2 = Conv(f, name + ".conv2", cout, cout, 3);
        if (cin != cout) skip = Conv(f, name + ".skip", cin, cout, 1);
    }

    Var operator()(const Var& x, const Var& emb_act) const {
        Var h = conv1(ops::silu(norm1(x)));
        h = ops::scale_shift(h, cond(emb_act));
        h = conv2(ops::silu(norm2(h)));
        return ops::add(skip ? (*skip)(x) : x, h);
    }
};

struct Level {
    std::optional<Conv> entry;  // strided downsampling conv; absent at level 0
    std::vector<ResBlock> blocks;
};

// Convolutional pyramid shared by the task encoders and the common encoder.
struct Encoder {
    Conv input;
    std::vector<Level> levels;

    Encoder() = default;
    Encoder(ParamFactory& f, const std::string& name, int in_ch, const std::vector<int>& channels,
            const std::vector<int>& blocks, int emb) {
        input = Conv(f, name + ".input", in_ch, channels[0], 3);
        for (size_t l = 0; l < channels.size(); ++l) {
            Level level;
            const std::string ln = name + ".level" + std::to_string(l);
            if (l > 0) level.entry = Conv(f, ln + ".down", channels[l - 1], channels[l], 3, 2);
            for (int b = 0; b < blocks[l]; ++b) {
                level.blocks.emplace_back(f, ln + ".block" + std::to_string(b), channels[l],
                                          channels[l], emb);
            }
            levels.push_back(std::move(level));
        }
    }

    // Returns the output of every block, grouped by level; inject[l], when
    // present, is added to the level-l activations before its blocks.
    std::vector<std::vector<Var>> operator()(const Var& x, const Var& emb_act,
                                             const std::vector<Var>* inject) const {
        std::vector<std::vector<Var>> skips;
        Var h = input(x);
        for (size_t l = 0; l < levels.size(); ++l) {
            if (levels[l].entry) h = (*levels[l].entry)(h);
            if (inject && l < inject->size() && (*inject)[l]) h = ops::add(h, (*inject)[l]);
            std::vector<Var> outs;
            for (const ResBlock& block : levels[l].blocks) {
                h = block(h, emb_act);
                outs.push_back(h);
            }
            skips.push_back(std::move(outs));
        }
        return skips;
    }
};

struct VitBlock {
    LayerNorm ln1, ln2;
    Dense qkv, proj, fc1, fc2;
    int heads = 1;
    float dropout = 0.0f;

    VitBlock(ParamFactory& f, const std::string& name, int d, int heads_, int mlp_ratio,
             float dropout_)
        : heads(heads_), dropout(dropout_) {
        ln1 = LayerNorm(f, name + ".ln1", d);
        qkv = Dense(f, name + ".qkv", d, 3 * d);
        proj = Dense(f, name + ".proj", d, d);
        ln2 = LayerNorm(f, name + ".ln2", d);
        fc1 = Dense(f, name + ".fc1", d, mlp_ratio * d);
        fc2 = Dense(f, name + ".fc2", mlp_ratio * d, d);
    }

    Var operator()(const Var& x, std::mt19937_64* rng) const {
        Var a = ops::self_attention(qkv(ln1(x)), heads, dropout, rng);
        Var y = ops::add(x, proj(a));
        Var m = fc2(ops::dropout(ops::gelu(fc1(ln2(y))), dropout, rng));
        return ops::add(y, ops::dropout(m, dropout, rng));
    }
};

struct DecoderLevel {
    std::optional<Conv> up;  // absent at the deepest level
    std::vector<ResBlock> blocks;
};

} // namespace

struct FlexModel::Impl {
    FlexConfig config;
    uint64_t seed = 0;
    std::vector<NamedParam> params;

    Dense embed1, embed2;  // (t, C) embedding; also the conditioning token
    Dense ctx1, ctx2;      // C-only embedding for the task encoders
    std::map<Task, Encoder> task_encoders;
    Encoder common;
    Var pos;
    int64_t pos_h = 0, pos_w = 0;
    Dense cond_proj;  // embedding -> conditioning token
    std::vector<VitBlock> vit;
    LayerNorm vit_norm;
    std::vector<DecoderLevel> decoder;
    GroupNorm out_norm;
    Conv out_conv;

    int embed_width() const { return 4 * config.width(); }
    int snapshot_channels(Task task) const { return task == Task::SR ? 1 : 2; }

    void build(uint64_t build_seed) {
        const FlexConfig& c = config;
        c.validate();
        seed = build_seed;
        ParamFactory f(params, build_seed);
        const int d = c.width();
        const int L = c.levels();
        const int emb = embed_width();

        embed1 = Dense(f, "embed.fc1", c.fourier_features + kContextFeatures, emb);
        embed2 = Dense(f, "embed.fc2", emb, emb);

        int common_in = c.in_channels;
        if (c.task_encoders) {
            ctx1 = Dense(f, "context.fc1", kContextFeatures, emb);
            ctx2 = Dense(f, "context.fc2", emb, emb);
            for (Task task : c.tasks) {
                task_encoders.emplace(task, Encoder(f, std::string("encoder_") + to_string(task),
                                                    snapshot_channels(task), c.enc_channels,
                                                    c.enc_blocks, emb));
            }
        } else {
            int extra = 0;
            for (Task task : c.tasks) extra = std::max(extra, snapshot_channels(task));
            common_in += extra;
        }
        common = Encoder(f, "encoder_common", common_in, c.enc_channels, c.enc_blocks, emb);

        pos_h = pos_w = c.image_size >> L;
        pos = f.normal("vit.pos", {pos_h * pos_w, d}, 0.02f);
        cond_proj = Dense(f, "vit.cond", emb, d);
        for (int i = 0; i < c.vit_depth; ++i) {
            vit.emplace_back(f, "vit.block" + std::to_string(i), d, c.vit_heads, c.mlp_ratio,
                             c.dropout);
        }
        vit_norm = LayerNorm(f, "vit.norm", d);

        const bool strong = c.task_encoders && c.strong_conditioning;
        decoder.resize(static_cast<size_t>(L) + 1);
        for (int l = L; l >= 0; --l) {
            DecoderLevel& level = decoder[static_cast<size_t>(l)];
            const std::string ln = "decoder.level" + std::to_string(l);
            const int ch = c.dec_channels[static_cast<size_t>(l)];
            if (l < L) {
                level.up = Conv(f, ln + ".up", c.dec_channels[static_cast<size_t>(l) + 1], ch, 3);
            }
            const int cin = (strong && c.skip_fusion == SkipFusion::Concat) ? 3 * ch : 2 * ch;
            for (int b = 0; b < c.dec_blocks[static_cast<size_t>(l)]; ++b) {
                level.blocks.emplace_back(f, ln + ".block" + std::to_string(b), cin, ch, emb);
            }
        }
        out_norm = GroupNorm(f, "output.norm", c.dec_channels[0]);
        out_conv = Conv(f, "output.conv", c.dec_channels[0], c.in_channels, 3);
    }

    Var embedding(const std::vector<double>& t,
                  const std::vector<ConditioningContext>& contexts) const {
        const int64_t B = static_cast<int64_t>(t.size());
        const int F = config.fourier_features;
        const int half = F / 2;
        Tensor in({B, F + kContextFeatures});
        for (int64_t b = 0; b < B; ++b) {
            float* row = in.data() + b * (F + kContextFeatures);
            for (int i = 0; i < half; ++i) {
                // Log-spaced frequencies in [1, 1000].
                const double freq = std::pow(1000.0, half > 1 ? static_cast<double>(i) / (half - 1) : 0.0);
                row[i] = static_cast<float>(std::sin(freq * t[static_cast<size_t>(b)]));
                row[half + i] = static_cast<float>(std::cos(freq * t[static_cast<size_t>(b)]));
            }
            const auto cv = context_vector(contexts[static_cast<size_t>(b)]);
            std::copy(cv.begin(), cv.end(), row + F);
        }
        return embed2(ops::silu(embed1(constant(std::move(in)))));
    }

    Var context_embedding(const std::vector<ConditioningContext>& contexts, size_t begin,
                          size_t end) const {
        Tensor in({static_cast<int64_t>(end - begin), kContextFeatures});
        for (size_t i = begin; i < end; ++i) {
            const auto cv = context_vector(contexts[i]);
            std::copy(cv.begin(), cv.end(), in.data() + (i - begin) * kContextFeatures);
        }
        return ctx2(ops::silu(ctx1(constant(std::move(in)))));
    }

    std::vector<std::vector<Var>> encode(Task task, const std::vector<ConditioningContext>& contexts,
                            size_t begin, size_t end, int64_t H, int64_t W) const {
        Var snaps = constant(snapshot_batch(contexts, begin, end, snapshot_channels(task), H, W));
        Var e = ops::silu(context_embedding(contexts, begin, end));
        return task_encoders.at(task)(snaps, e, nullptr);
    }

    Tensor snapshot_batch(const std::vector<ConditioningContext>& contexts, size_t begin,
                          size_t end, int channels, int64_t H, int64_t W) const {
        Tensor out({static_cast<int64_t>(end - begin), channels, H, W});
        for (size_t i = begin; i < end; ++i) {
            const ConditioningContext& ctx = contexts[i];
            for (int c = 0; c < channels && c < static_cast<int>(ctx.snapshots.size()); ++c) {
                const Tensor& s = ctx.snapshots[static_cast<size_t>(c)];
                require(s.dim(0) == H && s.dim(1) == W, ErrorKind::Context,
                        "context snapshot grid " + shape_str(s.shape()) +
                            " does not match the input grid");
                std::copy(s.data(), s.data() + H * W,
                          out.data() + ((static_cast<int64_t>(i - begin) * channels + c) * H * W));
            }
        }
        return out;
    }

    Var positional(int64_t h, int64_t w) const { return ops::resize_grid(pos, pos_h, pos_w, h, w); }

    Var transformer(const Var& tokens, const Var& pos_grid, const Var& cond,
                    std::mt19937_64* rng) const {
        Var seq = ops::prepend_token(ops::add_positional(tokens, pos_grid), cond);
        for (const VitBlock& block : vit) seq = block(seq, rng);
        return ops::drop_first_token(vit_norm(seq));
    }
};

FlexModel::FlexModel(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
FlexModel::FlexModel(FlexModel&&) noexcept = default;
FlexModel& FlexModel::operator=(FlexModel&&) noexcept = default;
FlexModel::~FlexModel() = default;

FlexModel FlexModel::build(const FlexConfig& config, uint64_t seed) {
    auto impl = std::make_unique<Impl>();
    impl->config = config;
    impl->build(seed);
    return FlexModel(std::move(impl));
}

FlexModel FlexModel::clone() const {
    FlexModel copy = build(impl_->config, impl_->seed);
    for (size_t i = 0; i < impl_->params.size(); ++i) {
        copy.impl_->params[i].var->value = impl_->params[i].var->value;
    }
    return copy;
}

const FlexConfig& FlexModel::config() const { return impl_->config; }
std::vector<NamedParam>& FlexModel::params() { return impl_->params; }
const std::vector<NamedParam>& FlexModel::params() const { return impl_->params; }

int64_t FlexModel::parameter_count() const {
    int64_t n = 0;
    for (const auto& p : impl_->params) n += p.var->value.numel();
    return n;
}

bool FlexModel::all_finite() const {
    return std::all_of(impl_->params.begin(), impl_->params.end(),
                       [](const NamedParam& p) { return p.var->value.all_finite(); });
}

int64_t FlexModel::token_count(int64_t height, int64_t width) const {
    const int L = impl_->config.levels();
    return (height >> L) * (width >> L) + 1;
}

Var FlexModel::forward(const std::vector<double>& t, const Var& z,
                       const std::vector<ConditioningContext>& contexts,
                       const ForwardOptions& options, std::mt19937_64* dropout_rng) const {
    const Impl& m = *impl_;
    const FlexConfig& c = m.config;
    const Tensor& zv = z->value;
    require(zv.rank() == 4 && zv.dim(1) == c.in_channels, ErrorKind::Shape,
            "forward expects z of shape [B," + std::to_string(c.in_channels) + ",H,W], got " +
                shape_str(zv.shape()));
    const int64_t B = zv.dim(0), H = zv.dim(2), W = zv.dim(3);
    const int L = c.levels();
    require(H % (int64_t{1} << L) == 0 && W % (int64_t{1} << L) == 0, ErrorKind::Shape,
            "input size " + std::to_string(H) + "x" + std::to_string(W) +
                " is not divisible by 2^L = " + std::to_string(1 << L));
    require(static_cast<int64_t>(t.size()) == B && static_cast<int64_t>(contexts.size()) == B,
            ErrorKind::Shape, "forward needs one t and one context per batch item");
    for (double ti : t) {
        require(ti >= 0.0 && ti <= 1.0, ErrorKind::Domain, "diffusion time outside [0, 1]");
    }

    size_t n_sr = 0;
    bool seen_fc = false;
    for (const ConditioningContext& ctx : contexts) {
        ctx.validate();
        require(c.has_task(ctx.task), ErrorKind::Config,
                std::string("task ") + to_string(ctx.task) + " is not enabled in this model");
        if (ctx.task == Task::FC) {
            seen_fc = true;
        } else {
            require(!seen_fc, ErrorKind::BatchLayout,
                    "multitask batches must list SR items before FC items");
            ++n_sr;
        }
    }

    Var emb = m.embedding(t, contexts);
    Var emb_act = ops::silu(emb);

    // Task-specific skips, stacked along the batch axis (SR rows first).
    std::vector<std::vector<Var>> task_skips;
    Var z_in = z;
    if (c.task_encoders) {
        std::vector<std::vector<std::vector<Var>>> parts;
        const std::pair<Task, std::pair<size_t, size_t>> groups[] = {
            {Task::SR, {0, n_sr}}, {Task::FC, {n_sr, static_cast<size_t>(B)}}};
        for (const auto& [task, range] : groups) {
            if (range.first == range.second) continue;
            parts.push_back(m.encode(task, contexts, range.first, range.second, H, W));
        }
        task_skips = parts[0];
        if (parts.size() == 2) {
            for (size_t l = 0; l < task_skips.size(); ++l) {
                for (size_t j = 0; j < task_skips[l].size(); ++j) {
                    task_skips[l][j] = ops::concat_batch({parts[0][l][j], parts[1][l][j]});
                }
            }
        }
    } else {
        int extra = 0;
        for (Task task : c.tasks) extra = std::max(extra, m.snapshot_channels(task));
        z_in = ops::concat_channels(
            {z, constant(m.snapshot_batch(contexts, 0, static_cast<size_t>(B), extra, H, W))});
    }

    std::vector<Var> weak;
    if (c.task_encoders && c.weak_conditioning) {
        for (int l = 0; l <= c.weak_levels; ++l) {
            weak.push_back(task_skips[static_cast<size_t>(l)].back());
        }
    }
    const std::vector<std::vector<Var>> common_skips =
        m.common(z_in, emb_act, weak.empty() ? nullptr : &weak);

    const int64_t hb = H >> L, wb = W >> L;
    Var cond = m.cond_proj(emb_act);
    if (options.zero_cond_token) cond = constant(Tensor(cond->value.shape()));
    Var tokens = m.transformer(ops::patchify(common_skips.back().back()), m.positional(hb, wb),
                               cond, dropout_rng);
    Var h = ops::unpatchify(tokens, hb, wb);

    // Decoder block b at level l pairs with encoder block n-1-b of that level.
    const bool strong = c.task_encoders && c.strong_conditioning;
    for (int l = L; l >= 0; --l) {
        const DecoderLevel& level = m.decoder[static_cast<size_t>(l)];
        if (level.up) h = (*level.up)(ops::upsample_nearest2x(h));
        const auto& sc_level = common_skips[static_cast<size_t>(l)];
        const int n_enc = static_cast<int>(sc_level.size());
        for (size_t b = 0; b < level.blocks.size(); ++b) {
            const auto j = static_cast<size_t>(std::max(0, n_enc - 1 - static_cast<int>(b)));
            const Var& sc = sc_level[j];
            std::vector<Var> inputs{h};
            if (strong) {
                Var st = task_skips[static_cast<size_t>(l)][j];
                if (options.zero_task_skip_level == l) st = constant(Tensor(st->value.shape()));
                if (c.skip_fusion == SkipFusion::Concat) {
                    inputs.push_back(sc);
                    inputs.push_back(st);
                } else {
                    inputs.push_back(ops::add(sc, st));
                }
            } else {
                inputs.push_back(sc);
            }
            h = level.blocks[b](ops::concat_channels(inputs), emb_act);
        }
    }
    return m.out_conv(ops::silu(m.out_norm(h)));
}

Tensor FlexModel::predict(double t, const Tensor& z, const ConditioningContext& context,
                          const ForwardOptions& options) const {
    NoGradGuard no_grad;
    const FlexConfig& c = impl_->config;
    Tensor input;
    if (z.rank() == 2) {
        input = z.reshaped({1, c.in_channels, z.dim(0), z.dim(1)});
    } else if (z.rank() == 3) {
        input = z.reshaped({z.dim(0), c.in_channels, z.dim(1), z.dim(2)});
    } else if (z.rank() == 4) {
        input = z;
    } else {
        fail(ErrorKind::Shape, "predict expects a [H,W], [B,H,W] or [B,C,H,W] tensor");
    }
    const int64_t B = input.dim(0);
    std::vector<double> ts(static_cast<size_t>(B), t);
    std::vector<ConditioningContext> contexts(static_cast<size_t>(B), context);
    Var out = forward(ts, constant(std::move(input)), contexts, options, nullptr);
    return out->value.reshaped(z.shape());
}

VelocityPredictor FlexModel::predictor() const {
    return [this](double t, const Tensor& z, const ConditioningContext& ctx) {
        return predict(t, z, ctx);
    };
}

TaskEncoding FlexModel::encode_task(const ConditioningContext& context) const {
    NoGradGuard no_grad;
    const Impl& m = *impl_;
    context.validate();
    require(m.config.task_encoders && m.config.has_task(context.task), ErrorKind::Config,
            std::string("task ") + to_string(context.task) + " is not enabled in this model");
    const Tensor& s0 = context.snapshots.front();
    std::vector<ConditioningContext> ctxs{context};
    const auto skips = m.encode(context.task, ctxs, 0, 1, s0.dim(0), s0.dim(1));
    TaskEncoding enc;
    for (const auto& level : skips) {
        const Shape& sh = level.back()->value.shape();
        enc.skips.push_back(level.back()->value.reshaped({sh[1], sh[2], sh[3]}));
    }
    enc.h_task = enc.skips.back();
    return enc;
}

Var FlexModel::latent_transformer(const Var& tokens, const Var& pos, const Var& cond,
                                  std::mt19937_64* dropout_rng) const {
    return impl_->transformer(tokens, pos, cond, dropout_rng);
}

} // namespace flexdiff
