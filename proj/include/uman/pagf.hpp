#pragma once

#include <cstddef>
#include <string>

#include "uman/man.hpp"
#include "uman/ops.hpp"
#include "uman/params.hpp"

namespace uman {

// Fusion variants; the non-Full modes are the ablation arms.
enum class PagfMode {
    Full,
    NoChannel,   // attention map from the spatial path only
    NoSpatial,   // attention map from the channel path only
    NoGate,      // gating fixed at 0.5
    AddOnly,     // refinement(x_d + x_e), no attention or gating
    SimpleSkip,  // concat reduced by a 1x1 conv, the plain-skip baseline
};

inline const char* pagf_mode_name(PagfMode m) {
    switch (m) {
        case PagfMode::Full: return "full";
        case PagfMode::NoChannel: return "no_channel";
        case PagfMode::NoSpatial: return "no_spatial";
        case PagfMode::NoGate: return "no_gate";
        case PagfMode::AddOnly: return "add_only";
        case PagfMode::SimpleSkip: return "simple_skip";
    }
    return "?";
}

inline PagfMode pagf_mode_from(const std::string& s) {
    if (s == "full") return PagfMode::Full;
    if (s == "no_channel") return PagfMode::NoChannel;
    if (s == "no_spatial") return PagfMode::NoSpatial;
    if (s == "no_gate") return PagfMode::NoGate;
    if (s == "add_only") return PagfMode::AddOnly;
    if (s == "simple_skip") return PagfMode::SimpleSkip;
    throw UsageError("unknown pagf mode '" + s + "'");
}

// Attention-guided skip fusion. Computes a channel/spatial attention map A
// and a gating map G from the concatenated streams, then blends
//   fused = G * (x_d * A) + (1 - G) * (x_e * A)
// and refines with conv-BN-ReLU. The mode is fixed at construction so each
// ablation arm only carries the parameters it actually uses.
class Pagf {
public:
    Pagf(ParameterStore& store, const std::string& prefix, Rng& rng, std::size_t channels,
         PagfMode mode = PagfMode::Full, std::size_t reduction = 8)
        : c_(channels), mode_(mode) {
        bool want_ca = mode == PagfMode::Full || mode == PagfMode::NoSpatial ||
                       mode == PagfMode::NoGate;
        bool want_sa = mode == PagfMode::Full || mode == PagfMode::NoChannel ||
                       mode == PagfMode::NoGate;
        bool want_gate = mode == PagfMode::Full || mode == PagfMode::NoChannel ||
                         mode == PagfMode::NoSpatial;
        bool want_combine = mode != PagfMode::AddOnly;
        bool want_refine = mode != PagfMode::SimpleSkip;

        if (want_ca) {
            // Clamp the squeeze ratio when it does not divide the channel count.
            std::size_t r = (channels % reduction == 0) ? reduction : channels;
            std::size_t hidden = channels / r;
            if (hidden == 0) hidden = 1;
            double s1 = std::sqrt(2.0 / static_cast<double>(channels));
            ca_w1_ = store.add_param(prefix + ".ca.w1", "pagf",
                                     Tensor::randn(rng, {hidden, channels}, s1));
            ca_b1_ = store.add_param(prefix + ".ca.b1", "pagf", Tensor::zeros({hidden}));
            ca_w2_ = store.add_param(prefix + ".ca.w2", "pagf",
                                     Tensor::randn(rng, {channels, hidden},
                                                   std::sqrt(2.0 / static_cast<double>(hidden))));
            ca_b2_ = store.add_param(prefix + ".ca.b2", "pagf", Tensor::zeros({channels}));
        }
        if (want_sa) {
            sa_w_ = store.add_param(prefix + ".sa.w", "pagf",
                                    Tensor::randn(rng, {1, 2, 7, 7}, std::sqrt(2.0 / 98.0)));
            sa_b_ = store.add_param(prefix + ".sa.b", "pagf", Tensor::zeros({1}));
        }
        double s2c = std::sqrt(2.0 / static_cast<double>(2 * channels));
        if (want_gate) {
            gate_w_ = store.add_param(prefix + ".gate.w", "pagf",
                                      Tensor::randn(rng, {channels, 2 * channels, 1, 1}, s2c));
            gate_b_ = store.add_param(prefix + ".gate.b", "pagf", Tensor::zeros({channels}));
        }
        if (want_combine) {
            combine_w_ = store.add_param(prefix + ".combine.w", "pagf",
                                         Tensor::randn(rng, {channels, 2 * channels, 1, 1}, s2c));
            combine_b_ = store.add_param(prefix + ".combine.b", "pagf", Tensor::zeros({channels}));
        }
        if (want_refine)
            refine_ = detail::ConvBn(store, prefix + ".refine", "pagf", rng, channels, channels, 3);
    }

    // SE-style channel weights in (0,1): sigmoid(W2 relu(W1 avgpool(x))).
    Tensor channel_attention(const Tensor& x) const {
        std::size_t n = x.dim(0), c = x.dim(1);
        Tensor pooled = reshape(avg_pool_global(x), {n, c});
        Tensor h = relu(add(linear(pooled, ca_w1_), reshape(ca_b1_, {1, ca_b1_.numel()})));
        Tensor out = add(linear(h, ca_w2_), reshape(ca_b2_, {1, c}));
        return reshape(sigmoid(out), {n, c, 1, 1});
    }

    // CBAM-style spatial map in (0,1): sigmoid(conv7x7([mean_c; max_c])).
    Tensor spatial_attention(const Tensor& x) const {
        Tensor stats = concat_channels(mean_channelwise(x), max_pool_channelwise(x));
        return sigmoid(conv2d(stats, sa_w_, sa_b_, 1, 3));
    }

    // Gated blend of the attention-weighted streams; exposed so tests can
    // drive it with stubbed A and G.
    static Tensor fuse_pre_refine(const Tensor& x_d, const Tensor& x_e, const Tensor& attention,
                                  const Tensor& gate) {
        Tensor xd_a = mul(x_d, attention);
        Tensor xe_a = mul(x_e, attention);
        return add(mul(gate, xd_a), mul(one_minus(gate), xe_a));
    }

    Tensor forward(const Tensor& x_d, const Tensor& x_e, bool training) {
        if (x_d.shape() != x_e.shape())
            throw ShapeError("pagf: stream shapes differ " + shape_str(x_d.shape()) + " vs " +
                             shape_str(x_e.shape()));
        if (x_d.rank() != 4 || x_d.dim(1) != c_) throw ShapeError("pagf: channel mismatch");
        std::size_t n = x_d.dim(0), h = x_d.dim(2), w = x_d.dim(3);

        if (mode_ == PagfMode::AddOnly)
            return relu(refine_.forward(add(x_d, x_e), 1, 1, training));

        Tensor cat = concat_channels(x_d, x_e);
        if (mode_ == PagfMode::SimpleSkip) return conv2d(cat, combine_w_, combine_b_, 1, 0);

        Tensor reduced = conv2d(cat, combine_w_, combine_b_, 1, 0);
        Tensor attention;
        if (mode_ == PagfMode::NoChannel) {
            attention = spatial_attention(reduced);  // [N,1,H,W]
        } else if (mode_ == PagfMode::NoSpatial) {
            attention = channel_attention(reduced);  // [N,C,1,1]
        } else {
            attention = mul(channel_attention(reduced), spatial_attention(reduced));
        }

        Tensor gate;
        if (mode_ == PagfMode::NoGate) {
            gate = Tensor::full({n, c_, h, w}, 0.5);
        } else {
            gate = sigmoid(conv2d(cat, gate_w_, gate_b_, 1, 0));
        }

        Tensor fused = fuse_pre_refine(x_d, x_e, attention, gate);
        return relu(refine_.forward(fused, 1, 1, training));
    }

    PagfMode mode() const { return mode_; }

private:
    std::size_t c_;
    PagfMode mode_;
    Tensor ca_w1_, ca_b1_, ca_w2_, ca_b2_;
    Tensor sa_w_, sa_b_;
    Tensor gate_w_, gate_b_;
    Tensor combine_w_, combine_b_;
    detail::ConvBn refine_;
};

}  // namespace uman
