#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "neuromoco/common.hpp"
#include "neuromoco/params.hpp"
#include "neuromoco/rng.hpp"
#include "neuromoco/tensor.hpp"

namespace neuromoco::snn {

enum class ResetMode { Hard, Soft };

struct LIFConfig {
    double tau_mem = 2.0;
    double v_threshold = 1.0;
    double v_reset = 0.0;
    ResetMode reset_mode = ResetMode::Hard;
};

inline void validate_lif(const LIFConfig& cfg) {
    if (cfg.tau_mem < 1.0) throw ValidationError("lif: tau_mem must be >= 1");
    if (!(cfg.v_threshold > cfg.v_reset)) throw ValidationError("lif: v_threshold must exceed v_reset");
}

template <class S>
struct LIFState {
    Tensor<S> v;
};

template <class S>
LIFState<S> lif_initial_state(const Shape& shape, const LIFConfig& cfg) {
    return {Tensor<S>::full(shape, static_cast<S>(cfg.v_reset))};
}

// One membrane update composed from primitive tensor ops:
//   charge      H  = V + (X - (V - v_reset)) / tau
//   fire        S  = spike(H, v_threshold)
//   hard reset  V' = S*v_reset + (1-S)*H     (soft: V' = H - S*v_threshold)
// The arithmetic order matches lif_seq exactly, so chaining lif_step over a
// sequence reproduces the fused path bit for bit.
template <class S>
std::pair<Tensor<S>, LIFState<S>> lif_step(const LIFState<S>& state, const Tensor<S>& x,
                                           const LIFConfig& cfg) {
    validate_lif(cfg);
    if (state.v.shape() != x.shape())
        throw ShapeError("lif_step: state " + shape_str(state.v.shape()) + " vs input " +
                         shape_str(x.shape()));
    const S vr = static_cast<S>(cfg.v_reset);
    const S th = static_cast<S>(cfg.v_threshold);
    const S inv_tau = static_cast<S>(1.0 / cfg.tau_mem);

    Tensor<S> drive = sub(x, add_scalar(state.v, -vr));
    Tensor<S> h = add(state.v, scale(drive, inv_tau));
    Tensor<S> s = spike(h, th);
    Tensor<S> v_next;
    if (cfg.reset_mode == ResetMode::Hard)
        v_next = add(scale(s, vr), mul_elementwise(add_scalar(scale(s, S(-1)), S(1)), h));
    else
        v_next = sub(h, scale(s, th));
    return {s, LIFState<S>{v_next}};
}

// Fused LIF over a whole sequence. Input is time-major (T*N, ...): row block
// t*N..(t+1)*N-1 is time step t. Membrane state starts at v_reset and the
// whole trajectory lives inside this op, so callers get stateless semantics
// (fresh state every invocation). Backward is explicit BPTT over the saved
// charge trace.
template <class S>
Tensor<S> lif_seq(const Tensor<S>& x, int64_t T, const LIFConfig& cfg) {
    validate_lif(cfg);
    if (T < 1) throw ShapeError("lif_seq: T must be >= 1");
    if (x.rank() < 1 || x.dim(0) % T != 0)
        throw ShapeError("lif_seq: leading dim " + std::to_string(x.rank() ? x.dim(0) : 0) +
                         " not divisible by T=" + std::to_string(T));
    const int64_t step = x.numel() / T;
    const S vr = static_cast<S>(cfg.v_reset);
    const S th = static_cast<S>(cfg.v_threshold);
    const S inv_tau = static_cast<S>(1.0 / cfg.tau_mem);
    const bool hard = cfg.reset_mode == ResetMode::Hard;

    Tensor<S> out = Tensor<S>::zeros(x.shape());
    auto charge = std::make_shared<std::vector<S>>(x.d->v.size());
    {
        std::vector<S> v(static_cast<size_t>(step), vr);
        const S* xv = x.d->v.data();
        S* ov = out.d->v.data();
        S* hv = charge->data();
        for (int64_t t = 0; t < T; ++t) {
            const int64_t base = t * step;
            for (int64_t i = 0; i < step; ++i) {
                const S h = v[static_cast<size_t>(i)] +
                            (xv[base + i] - (v[static_cast<size_t>(i)] - vr)) * inv_tau;
                hv[base + i] = h;
                const S s = h - th >= S(0) ? S(1) : S(0);
                ov[base + i] = s;
                v[static_cast<size_t>(i)] = hard ? s * vr + (S(1) - s) * h : h - s * th;
            }
        }
    }

    if (detail::recording<S>({&x})) {
        out.set_requires_grad(true);
        auto xd = x.d, od = out.d;
        Tape<S>::current()->record([xd, od, charge, T, step, vr, th, inv_tau, hard] {
            if (!xd->requires_grad) return;
            std::vector<S> gv(static_cast<size_t>(step), S(0));
            for (int64_t t = T - 1; t >= 0; --t) {
                const int64_t base = t * step;
                for (int64_t i = 0; i < step; ++i) {
                    const S h = (*charge)[static_cast<size_t>(base + i)];
                    const S s = od->v[base + i];
                    const S gs = od->g[base + i];
                    const S gV = gv[static_cast<size_t>(i)];
                    const S sg = arctan_surrogate_derivative(h - th);
                    S dH;
                    if (hard)
                        dH = (gs + gV * (vr - h)) * sg + gV * (S(1) - s);
                    else
                        dH = gs * sg + gV * (S(1) - th * sg);
                    xd->g[base + i] += dH * inv_tau;
                    gv[static_cast<size_t>(i)] = dH * (S(1) - inv_tau);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// parameterized layers (channels-last activations)
// ---------------------------------------------------------------------------

namespace init {

// He-normal initialization drawn from a stream derived from (seed, name), so
// identically-seeded modules produce identical parameters regardless of
// construction order.
template <class S>
Tensor<S> he_normal(Shape shape, int64_t fan_in, uint64_t seed, const std::string& name) {
    Tensor<S> t = Tensor<S>::zeros(std::move(shape));
    RngStream rng = RngStream::child(seed, name, 0, 0);
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.values()) v = static_cast<S>(rng.normal() * stddev);
    t.set_requires_grad(true);
    return t;
}

} // namespace init

template <class S>
struct Conv2dLayer {
    Tensor<S> w; // (KH, KW, Cin, Cout)
    int64_t stride = 1;
    int64_t pad = 1;

    Conv2dLayer() = default;
    Conv2dLayer(int64_t kernel, int64_t cin, int64_t cout, int64_t stride_, int64_t pad_, uint64_t seed,
                const std::string& name)
        : w(init::he_normal<S>({kernel, kernel, cin, cout}, kernel * kernel * cin, seed, name)),
          stride(stride_),
          pad(pad_) {}

    Tensor<S> forward(const Tensor<S>& x) const { return conv2d_nhwc(x, w, stride, pad); }

    void collect(ParamSet<S>& ps, const std::string& prefix) { ps.add(prefix + "w", w); }
};

template <class S>
struct BatchNormLayer {
    Tensor<S> gamma, beta, running_mean, running_var;
    S momentum = S(0.1);
    S eps = S(1e-5);

    BatchNormLayer() = default;
    explicit BatchNormLayer(int64_t channels)
        : gamma(Tensor<S>::full({channels}, S(1))),
          beta(Tensor<S>::zeros({channels})),
          running_mean(Tensor<S>::zeros({channels})),
          running_var(Tensor<S>::full({channels}, S(1))) {
        gamma.set_requires_grad(true);
        beta.set_requires_grad(true);
    }

    Tensor<S> forward(const Tensor<S>& x, bool training, bool update_running) {
        return batch_norm_nhwc(x, gamma, beta, running_mean, running_var, training, update_running,
                               momentum, eps);
    }

    void collect(ParamSet<S>& ps, const std::string& prefix) {
        ps.add(prefix + "gamma", gamma);
        ps.add(prefix + "beta", beta);
        ps.add(prefix + "running_mean", running_mean);
        ps.add(prefix + "running_var", running_var);
    }
};

template <class S>
struct LinearLayer {
    Tensor<S> w; // (Cout, Cin)
    Tensor<S> b; // (Cout)

    LinearLayer() = default;
    LinearLayer(int64_t cin, int64_t cout, uint64_t seed, const std::string& name)
        : w(init::he_normal<S>({cout, cin}, cin, seed, name)), b(Tensor<S>::zeros({cout})) {
        b.set_requires_grad(true);
    }

    Tensor<S> forward(const Tensor<S>& x) const { return linear(x, w, b); }

    void collect(ParamSet<S>& ps, const std::string& prefix) {
        ps.add(prefix + "w", w);
        ps.add(prefix + "b", b);
    }
};

// Spike-Element-Wise residual block with ADD as the element-wise function:
//   out = SN(BN(Conv(SN(BN(Conv(x)))))) + x
// Input must be spike-valued {0,1}; the sum of two spike maps lands in
// {0,1,2}.
template <class S>
struct SewBlock {
    Conv2dLayer<S> conv1, conv2;
    BatchNormLayer<S> bn1, bn2;
    LIFConfig lif;

    SewBlock() = default;
    SewBlock(int64_t channels, const LIFConfig& lif_cfg, uint64_t seed, const std::string& name)
        : conv1(3, channels, channels, 1, 1, seed, name + ".conv1.w"),
          conv2(3, channels, channels, 1, 1, seed, name + ".conv2.w"),
          bn1(channels),
          bn2(channels),
          lif(lif_cfg) {}

    Tensor<S> forward(const Tensor<S>& x, int64_t T, bool training, bool update_running) {
        Tensor<S> y = lif_seq(bn1.forward(conv1.forward(x), training, update_running), T, lif);
        y = lif_seq(bn2.forward(conv2.forward(y), training, update_running), T, lif);
        return add(y, x);
    }

    void collect(ParamSet<S>& ps, const std::string& prefix) {
        conv1.collect(ps, prefix + "conv1.");
        bn1.collect(ps, prefix + "bn1.");
        conv2.collect(ps, prefix + "conv2.");
        bn2.collect(ps, prefix + "bn2.");
    }
};

struct BackboneConfig {
    int64_t input_height = 32;
    int64_t input_width = 32;
    std::vector<int64_t> stage_widths = {32, 64, 128};
    std::vector<int64_t> stage_blocks = {1, 1, 1};
    int64_t embedding_dim = 128;
    LIFConfig lif;
};

// Spiking convolutional encoder: stem conv (stride 2) + max pool, SEW stages
// joined by strided transition convs, global average pooling, and a linear
// map to the embedding dimension. Activations stay channels-last throughout;
// batch norm statistics are collapsed over (T*N) rows.
template <class S>
class Backbone {
public:
    Backbone() = default;

    Backbone(const BackboneConfig& cfg, uint64_t seed) : cfg_(cfg) {
        validate_lif(cfg.lif);
        if (cfg.stage_widths.empty() || cfg.stage_widths.size() != cfg.stage_blocks.size())
            throw ValidationError("backbone: stage widths/blocks must be non-empty and aligned");
        if (cfg.embedding_dim < 1) throw ValidationError("backbone: embedding_dim must be positive");
        for (int64_t b : cfg.stage_blocks)
            if (b < 1) throw ValidationError("backbone: every stage needs at least one block");

        stem_conv_ = Conv2dLayer<S>(3, 2, cfg.stage_widths[0], 2, 1, seed, "stem.conv.w");
        stem_bn_ = BatchNormLayer<S>(cfg.stage_widths[0]);

        int64_t h = conv_out(cfg.input_height), w = conv_out(cfg.input_width);
        h /= 2; // stem max pool
        w /= 2;
        if (h < 1 || w < 1) throw ValidationError("backbone: input resolution too small for the stem");

        for (size_t i = 0; i < cfg.stage_widths.size(); ++i) {
            if (i > 0) {
                const std::string name = "trans" + std::to_string(i) + ".conv.w";
                trans_conv_.push_back(
                    Conv2dLayer<S>(3, cfg.stage_widths[i - 1], cfg.stage_widths[i], 2, 1, seed, name));
                trans_bn_.push_back(BatchNormLayer<S>(cfg.stage_widths[i]));
                h = conv_out(h);
                w = conv_out(w);
                if (h < 1 || w < 1)
                    throw ValidationError("backbone: resolution collapses before stage " +
                                          std::to_string(i + 1));
            }
            for (int64_t b = 0; b < cfg.stage_blocks[i]; ++b) {
                const std::string name =
                    "stage" + std::to_string(i + 1) + ".block" + std::to_string(b + 1);
                blocks_.emplace_back(cfg.stage_widths[i], cfg.lif, seed, name);
            }
        }
        fc_ = LinearLayer<S>(cfg.stage_widths.back(), cfg.embedding_dim, seed, "fc.w");
    }

    // x: (T, N, 2, H, W) frame batch; returns embeddings (T, N, C).
    Tensor<S> forward(const Tensor<S>& x, bool training, bool update_running = true) {
        if (x.rank() != 5 || x.dim(2) != 2)
            throw ShapeError("backbone: expected (T,N,2,H,W), got " + shape_str(x.shape()));
        if (x.dim(3) != cfg_.input_height || x.dim(4) != cfg_.input_width)
            throw ShapeError("backbone: configured for " + std::to_string(cfg_.input_height) + "x" +
                             std::to_string(cfg_.input_width) + ", got " + shape_str(x.shape()));
        const int64_t T = x.dim(0), N = x.dim(1);

        Tensor<S> y = reshape(x, {T * N, 2, x.dim(3), x.dim(4)});
        y = permute(y, {0, 2, 3, 1}); // channels-last
        y = lif_seq(stem_bn_.forward(stem_conv_.forward(y), training, update_running), T, cfg_.lif);
        y = max_pool2d_nhwc(y, 2, 2);

        size_t block_idx = 0;
        for (size_t i = 0; i < cfg_.stage_widths.size(); ++i) {
            if (i > 0) {
                y = trans_conv_[i - 1].forward(y);
                y = trans_bn_[i - 1].forward(y, training, update_running);
                y = lif_seq(y, T, cfg_.lif);
            }
            for (int64_t b = 0; b < cfg_.stage_blocks[i]; ++b)
                y = blocks_[block_idx++].forward(y, T, training, update_running);
        }

        // global average pool over the spatial grid, then project to C
        y = reshape(y, {T * N, y.dim(1) * y.dim(2), y.dim(3)});
        y = mean_over(y, 1);
        y = fc_.forward(y);
        return reshape(y, {T, N, cfg_.embedding_dim});
    }

    void collect(ParamSet<S>& ps, const std::string& prefix) {
        stem_conv_.collect(ps, prefix + "stem.conv.");
        stem_bn_.collect(ps, prefix + "stem.bn.");
        size_t block_idx = 0;
        for (size_t i = 0; i < cfg_.stage_widths.size(); ++i) {
            if (i > 0) {
                trans_conv_[i - 1].collect(ps, prefix + "trans" + std::to_string(i) + ".conv.");
                trans_bn_[i - 1].collect(ps, prefix + "trans" + std::to_string(i) + ".bn.");
            }
            for (int64_t b = 0; b < cfg_.stage_blocks[i]; ++b) {
                const std::string name = prefix + "stage" + std::to_string(i + 1) + ".block" +
                                         std::to_string(b + 1) + ".";
                blocks_[block_idx++].collect(ps, name);
            }
        }
        fc_.collect(ps, prefix + "fc.");
    }

    const BackboneConfig& config() const { return cfg_; }

private:
    static int64_t conv_out(int64_t side) { return (side + 2 - 3) / 2 + 1; }

    BackboneConfig cfg_;
    Conv2dLayer<S> stem_conv_;
    BatchNormLayer<S> stem_bn_;
    std::vector<SewBlock<S>> blocks_;
    std::vector<Conv2dLayer<S>> trans_conv_;
    std::vector<BatchNormLayer<S>> trans_bn_;
    LinearLayer<S> fc_;
};

// Pretraining head: per-time-step 2-layer MLP C -> C -> C, discarded at
// fine-tune time.
template <class S>
class ProjectionHead {
public:
    ProjectionHead() = default;
    ProjectionHead(int64_t dim, uint64_t seed)
        : fc1_(dim, dim, seed, "proj.fc1.w"), fc2_(dim, dim, seed, "proj.fc2.w") {}

    Tensor<S> forward(const Tensor<S>& x) const {
        if (x.rank() != 3) throw ShapeError("projection head: expected (T,N,C)");
        const int64_t T = x.dim(0), N = x.dim(1), C = x.dim(2);
        Tensor<S> y = reshape(x, {T * N, C});
        y = fc2_.forward(relu(fc1_.forward(y)));
        return reshape(y, {T, N, C});
    }

    void collect(ParamSet<S>& ps, const std::string& prefix) {
        fc1_.collect(ps, prefix + "fc1.");
        fc2_.collect(ps, prefix + "fc2.");
    }

private:
    LinearLayer<S> fc1_, fc2_;
};

// Per-time-step linear classifier; no temporal pooling here (the training
// criterion consumes the T axis).
template <class S>
class ClassificationHead {
public:
    ClassificationHead() = default;
    ClassificationHead(int64_t dim, int64_t num_classes, uint64_t seed)
        : fc_(dim, num_classes, seed, "head.fc.w") {}

    Tensor<S> forward(const Tensor<S>& x) const {
        if (x.rank() != 3) throw ShapeError("classification head: expected (T,N,C)");
        const int64_t T = x.dim(0), N = x.dim(1), C = x.dim(2);
        Tensor<S> y = fc_.forward(reshape(x, {T * N, C}));
        return reshape(y, {T, N, y.dim(1)});
    }

    void collect(ParamSet<S>& ps, const std::string& prefix) { fc_.collect(ps, prefix + "fc."); }

    Tensor<S>& weight() { return fc_.w; }
    Tensor<S>& bias() { return fc_.b; }

private:
    LinearLayer<S> fc_;
};

} // namespace neuromoco::snn
