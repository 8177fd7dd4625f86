#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "uman/kan.hpp"
#include "uman/ops.hpp"
#include "uman/params.hpp"

namespace uman {

// Token-grid geometry produced by patch embedding.
struct PatchGrid {
    std::size_t h_embed = 0;
    std::size_t w_embed = 0;
    std::size_t dim = 0;
};

struct MsabConfig {
    std::vector<std::size_t> kernel_sizes = {1, 3, 5};
    std::size_t channels = 0;
};

namespace detail {

struct ConvBn {
    Tensor w, b, gamma, beta;
    Tensor running_mean, running_var;

    ConvBn() = default;
    ConvBn(ParameterStore& store, const std::string& prefix, const std::string& group, Rng& rng,
           std::size_t cin, std::size_t cout, std::size_t k) {
        double std = std::sqrt(2.0 / static_cast<double>(cin * k * k));
        w = store.add_param(prefix + ".w", group, Tensor::randn(rng, {cout, cin, k, k}, std));
        b = store.add_param(prefix + ".b", group, Tensor::zeros({cout}));
        gamma = store.add_param(prefix + ".bn.gamma", group, Tensor::full({cout}, 1.0));
        beta = store.add_param(prefix + ".bn.beta", group, Tensor::zeros({cout}));
        running_mean = store.add_buffer(prefix + ".bn.running_mean", Tensor::zeros({cout}));
        running_var = store.add_buffer(prefix + ".bn.running_var", Tensor::full({cout}, 1.0));
    }

    Tensor forward(const Tensor& x, std::size_t stride, std::size_t pad, bool training) {
        Tensor y = conv2d(x, w, b, stride, pad);
        return batch_norm2d(y, gamma, beta, running_mean, running_var, training);
    }
};

struct DepthwiseBn {
    Tensor w, gamma, beta;
    Tensor running_mean, running_var;
    std::size_t k = 0;

    DepthwiseBn() = default;
    DepthwiseBn(ParameterStore& store, const std::string& prefix, const std::string& group,
                Rng& rng, std::size_t c, std::size_t k_)
        : k(k_) {
        double std = std::sqrt(2.0 / static_cast<double>(k * k));
        w = store.add_param(prefix + ".w", group, Tensor::randn(rng, {c, 1, k, k}, std));
        gamma = store.add_param(prefix + ".bn.gamma", group, Tensor::full({c}, 1.0));
        beta = store.add_param(prefix + ".bn.beta", group, Tensor::zeros({c}));
        running_mean = store.add_buffer(prefix + ".bn.running_mean", Tensor::zeros({c}));
        running_var = store.add_buffer(prefix + ".bn.running_var", Tensor::full({c}, 1.0));
    }

    Tensor forward(const Tensor& x, bool training) {
        Tensor y = depthwise_conv2d(x, w, 1, (k - 1) / 2);
        return batch_norm2d(y, gamma, beta, running_mean, running_var, training);
    }
};

}  // namespace detail

// Overlapping 3x3 strided patch embedding followed by token layer norm.
class PatchEmbed {
public:
    PatchEmbed(ParameterStore& store, const std::string& prefix, Rng& rng, std::size_t cin,
               std::size_t dim, std::size_t stride)
        : dim_(dim), stride_(stride) {
        double std = std::sqrt(2.0 / static_cast<double>(cin * 9));
        w_ = store.add_param(prefix + ".w", "conv", Tensor::randn(rng, {dim, cin, 3, 3}, std));
        b_ = store.add_param(prefix + ".b", "conv", Tensor::zeros({dim}));
        ln_gamma_ = store.add_param(prefix + ".ln.gamma", "conv", Tensor::full({dim}, 1.0));
        ln_beta_ = store.add_param(prefix + ".ln.beta", "conv", Tensor::zeros({dim}));
    }

    // Returns [N,L,D] tokens plus the token-grid geometry.
    std::pair<Tensor, PatchGrid> forward(const Tensor& x) const {
        if (x.rank() != 4) throw ShapeError("patch_embed: expected [N,C,H,W]");
        if (x.dim(2) < 2 || x.dim(3) < 2) throw ShapeError("patch_embed: spatial dims must be >= 2");
        Tensor fmap = conv2d(x, w_, b_, stride_, 1);
        PatchGrid grid{fmap.dim(2), fmap.dim(3), dim_};
        Tensor tokens = map_to_tokens(fmap);
        return {layer_norm(tokens, ln_gamma_, ln_beta_), grid};
    }

    std::size_t dim() const { return dim_; }

private:
    std::size_t dim_, stride_;
    Tensor w_, b_, ln_gamma_, ln_beta_;
};

// Multi-Scale Attention Block: 1x1 conv-BN-ReLU, multi-scale depthwise unit
// (per-kernel depthwise-BN-ReLU branches, averaged), 1x1 conv-BN, residual,
// ReLU. Operates on the embedded map [N,D,He,We].
class Msab {
public:
    Msab(ParameterStore& store, const std::string& prefix, Rng& rng, const MsabConfig& cfg)
        : cfg_(cfg) {
        if (cfg.kernel_sizes.empty()) throw ShapeError("Msab: empty kernel set");
        for (std::size_t k : cfg.kernel_sizes)
            if (k % 2 == 0) throw ShapeError("Msab: kernel sizes must be odd");
        pre_ = detail::ConvBn(store, prefix + ".pre", "conv", rng, cfg.channels, cfg.channels, 1);
        for (std::size_t i = 0; i < cfg.kernel_sizes.size(); ++i)
            msdc_.emplace_back(store, prefix + ".msdc" + std::to_string(cfg.kernel_sizes[i]),
                               "conv", rng, cfg.channels, cfg.kernel_sizes[i]);
        post_ = detail::ConvBn(store, prefix + ".post", "conv", rng, cfg.channels, cfg.channels, 1);
    }

    Tensor forward(const Tensor& x, bool training) {
        if (x.rank() != 4 || x.dim(1) != cfg_.channels)
            throw ShapeError("Msab: channel mismatch");
        Tensor h = relu(pre_.forward(x, 1, 0, training));
        Tensor acc;
        for (std::size_t i = 0; i < msdc_.size(); ++i) {
            Tensor branch = relu(msdc_[i].forward(h, training));
            acc = i == 0 ? branch : add(acc, branch);
        }
        Tensor msdc_out = scale(acc, 1.0 / static_cast<double>(msdc_.size()));
        Tensor out = post_.forward(msdc_out, 1, 0, training);
        return relu(add(out, x));
    }

private:
    MsabConfig cfg_;
    detail::ConvBn pre_, post_;
    std::vector<detail::DepthwiseBn> msdc_;
};

// Learned fusion: w1 * msab + w2 * kan, element-wise, exactly.
inline Tensor man_fuse(const Tensor& w1, const Tensor& f_msab, const Tensor& w2,
                       const Tensor& f_kan) {
    return add(scale_by(f_msab, w1), scale_by(f_kan, w2));
}

// One MAN stage: patch embedding into tokens, a KANBlock stack (primary
// branch) and the MSAB (secondary branch) over the embedded map, combined by
// learnable scalar fusion weights and channel layer norm.
class ManStage {
public:
    ManStage(ParameterStore& store, const std::string& prefix, Rng& rng, std::size_t cin,
             std::size_t dim, std::size_t depth, std::size_t embed_stride,
             const std::vector<std::size_t>& msab_kernels, const SplineGrid& grid,
             double drop_path_p, bool use_msab)
        : dim_(dim), use_msab_(use_msab),
          embed_(store, prefix + ".embed", rng, cin, dim, embed_stride) {
        if (depth < 1) throw ShapeError("ManStage: depth must be >= 1");
        for (std::size_t i = 0; i < depth; ++i)
            blocks_.emplace_back(store, prefix + ".block" + std::to_string(i), rng, dim, grid,
                                 drop_path_p);
        if (use_msab_) {
            MsabConfig mc;
            mc.kernel_sizes = msab_kernels;
            mc.channels = dim;
            msab_ = std::make_unique<Msab>(store, prefix + ".msab", rng, mc);
            w1_ = store.add_param(prefix + ".w1", "man_fusion", Tensor::full({1}, 1.0));
        }
        w2_ = store.add_param(prefix + ".w2", "man_fusion", Tensor::full({1}, 1.0));
        ln_gamma_ = store.add_param(prefix + ".ln.gamma", "conv", Tensor::full({dim}, 1.0));
        ln_beta_ = store.add_param(prefix + ".ln.beta", "conv", Tensor::zeros({dim}));
    }

    Tensor forward(const Tensor& x, bool training, Rng* droppath_rng = nullptr) {
        auto [tokens, grid] = embed_.forward(x);
        Tensor embedded_map = tokens_to_map(tokens, grid.h_embed, grid.w_embed);

        Tensor fused;
        Tensor f_kan = kan_branch(tokens, grid, training, droppath_rng);
        if (use_msab_) {
            Tensor f_msab = msab_->forward(embedded_map, training);
            fused = man_fuse(w1_, f_msab, w2_, f_kan);
        } else {
            fused = scale_by(f_kan, w2_);
        }
        return channel_norm(fused, grid);
    }

    // Branch entry points used by the branch-isolation tests.
    std::pair<Tensor, PatchGrid> embed(const Tensor& x) const { return embed_.forward(x); }

    Tensor kan_branch(const Tensor& tokens, const PatchGrid& grid, bool training,
                      Rng* droppath_rng = nullptr) const {
        Tensor t = tokens;
        for (const auto& b : blocks_) t = b.forward(t, training, droppath_rng);
        return tokens_to_map(t, grid.h_embed, grid.w_embed);
    }

    Tensor msab_branch(const Tensor& embedded_map, bool training) {
        if (!use_msab_) throw UsageError("ManStage: MSAB branch disabled");
        return msab_->forward(embedded_map, training);
    }

    Tensor channel_norm(const Tensor& fmap, const PatchGrid& grid) const {
        Tensor toks = map_to_tokens(fmap);
        return tokens_to_map(layer_norm(toks, ln_gamma_, ln_beta_), grid.h_embed, grid.w_embed);
    }

    const Tensor& w1() const {
        if (!use_msab_) throw UsageError("ManStage: no w1 without MSAB");
        return w1_;
    }
    const Tensor& w2() const { return w2_; }
    std::size_t dim() const { return dim_; }

private:
    std::size_t dim_;
    bool use_msab_;
    PatchEmbed embed_;
    std::vector<KanBlock> blocks_;
    std::unique_ptr<Msab> msab_;
    Tensor w1_, w2_, ln_gamma_, ln_beta_;
};

}  // namespace uman
