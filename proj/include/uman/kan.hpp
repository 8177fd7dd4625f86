#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "uman/ops.hpp"
#include "uman/params.hpp"

namespace uman {

// Uniform B-spline grid extended by `order` knots on each side, so that all
// grid_size + order basis functions are well defined on [lo, hi].
struct SplineGrid {
    std::size_t grid_size = 5;
    std::size_t order = 3;
    double lo = -1.0;
    double hi = 1.0;
    std::vector<double> knots;  // grid_size + 2*order + 1, strictly increasing

    SplineGrid(std::size_t grid_size_ = 5, std::size_t order_ = 3, double lo_ = -1.0,
               double hi_ = 1.0)
        : grid_size(grid_size_), order(order_), lo(lo_), hi(hi_) {
        if (grid_size < 1) throw ShapeError("SplineGrid: grid_size must be >= 1");
        if (hi <= lo) throw ShapeError("SplineGrid: empty range");
        double h = (hi - lo) / static_cast<double>(grid_size);
        knots.resize(grid_size + 2 * order + 1);
        for (std::size_t i = 0; i < knots.size(); ++i)
            knots[i] = lo + (static_cast<double>(i) - static_cast<double>(order)) * h;
    }

    // Number of basis functions per scalar input.
    std::size_t basis_count() const { return grid_size + order; }

    // Degree-0 indicator with half-open intervals; the top of the nominal
    // range is folded into the last nominal interval so the basis keeps its
    // partition of unity at x == hi.
    bool indicator(std::size_t interval, double x) const {
        if (x == hi) return interval == grid_size + order - 1;
        return knots[interval] <= x && x < knots[interval + 1];
    }
};

namespace detail {

// Evaluates all basis_count() degree-`order` functions at x via the
// iterative Cox-de Boor triangle over the full knot vector.
inline void bspline_eval_all(const SplineGrid& g, double x, double* out,
                             double* lower_order = nullptr) {
    std::size_t m = g.knots.size() - 1;  // number of degree-0 intervals
    std::vector<double> cur(m), nxt;
    for (std::size_t i = 0; i < m; ++i) cur[i] = g.indicator(i, x) ? 1.0 : 0.0;
    for (std::size_t p = 1; p <= g.order; ++p) {
        std::size_t cnt = m - p;
        nxt.assign(cnt, 0.0);
        for (std::size_t i = 0; i < cnt; ++i) {
            double left = (x - g.knots[i]) / (g.knots[i + p] - g.knots[i]);
            double right = (g.knots[i + p + 1] - x) / (g.knots[i + p + 1] - g.knots[i + 1]);
            nxt[i] = left * cur[i] + right * cur[i + 1];
        }
        if (p == g.order && lower_order) {
            // cur still holds the degree-(order-1) values needed for the
            // derivative formula.
            for (std::size_t i = 0; i < m - (g.order - 1); ++i) lower_order[i] = cur[i];
        }
        cur.swap(nxt);
    }
    for (std::size_t i = 0; i < g.basis_count(); ++i) out[i] = cur[i];
}

}  // namespace detail

// B-spline basis values for every element of x: shape [..., G+s]. Gradients
// flow back through x via the analytic derivative
//   B'_{i,s}(x) = s * ( B_{i,s-1}/(t_{i+s}-t_i) - B_{i+1,s-1}/(t_{i+s+1}-t_{i+1}) ).
inline Tensor bspline_basis(const Tensor& x, const SplineGrid& grid) {
    std::size_t nb = grid.basis_count();
    std::size_t n = x.numel();
    Shape out_shape = x.shape();
    out_shape.push_back(nb);
    Tensor y(out_shape);

    bool rec = detail::recording({&x});
    std::size_t nlow = grid.knots.size() - grid.order;  // degree-(s-1) count
    auto lower = rec && grid.order > 0 ? std::make_shared<std::vector<double>>(n * nlow)
                                       : nullptr;
    std::vector<double> scratch_low(nlow);
    for (std::size_t e = 0; e < n; ++e) {
        double* low = lower ? lower->data() + e * nlow : (grid.order > 0 ? scratch_low.data() : nullptr);
        detail::bspline_eval_all(grid, x.data()[e], y.data().data() + e * nb, low);
    }
    detail::check_finite("bspline_basis", y);

    if (rec) {
        y.set_requires_grad(true);
        auto xi = x.impl(), yi = y.impl();
        SplineGrid g = grid;
        Tape::current()->record("bspline_basis", [=]() {
            if (yi->grad.empty()) return;
            if (g.order == 0) return;  // piecewise constant: zero gradient a.e.
            xi->ensure_grad();
            double s = static_cast<double>(g.order);
            for (std::size_t e = 0; e < n; ++e) {
                const double* low = lower->data() + e * nlow;
                double acc = 0.0;
                for (std::size_t i = 0; i < nb; ++i) {
                    double d = s * (low[i] / (g.knots[i + g.order] - g.knots[i]) -
                                    low[i + 1] / (g.knots[i + g.order + 1] - g.knots[i + 1]));
                    acc += yi->grad[e * nb + i] * d;
                }
                xi->grad[e] += acc;
            }
        });
    }
    return y;
}

// Learnable content of one KAN layer (Eq. 2's trainable pieces): a base path
// through silu and a spline path with per-edge coefficients and scalers.
struct KanLayerParams {
    Tensor base_weight;    // [out, in]
    Tensor spline_weight;  // [out, in, G+s]
    Tensor spline_scaler;  // [out, in]
};

// out_j = sum_i base_w[j,i]*silu(x_i) + scaler[j,i]*sum_k spline_w[j,i,k]*B_k(x_i)
class KanLayer {
public:
    KanLayer(ParameterStore& store, const std::string& prefix, Rng& rng, std::size_t in,
             std::size_t out, const SplineGrid& grid)
        : in_(in), out_(out), grid_(grid) {
        double base_std = std::sqrt(2.0 / static_cast<double>(in));
        p_.base_weight =
            store.add_param(prefix + ".base_weight", "kan", Tensor::randn(rng, {out, in}, base_std));
        p_.spline_weight = store.add_param(
            prefix + ".spline_weight", "kan",
            Tensor::randn(rng, {out, in, grid.basis_count()}, 0.1 * base_std));
        p_.spline_scaler =
            store.add_param(prefix + ".spline_scaler", "kan", Tensor::full({out, in}, 1.0));
    }

    // Test entry point: run with explicitly provided parameters.
    static Tensor forward_with(const Tensor& x, const KanLayerParams& p, const SplineGrid& grid) {
        if (x.rank() != 2) throw ShapeError("kan_layer: expected [N,in]");
        std::size_t in = x.dim(1);
        if (p.base_weight.dim(1) != in) throw ShapeError("kan_layer: input dim mismatch");
        std::size_t nb = grid.basis_count();
        std::size_t out = p.base_weight.dim(0);

        Tensor base_out = linear(silu(x), p.base_weight);  // [N,out]
        Tensor basis = bspline_basis(x, grid);             // [N,in,nb]
        Tensor scaler3 = reshape(p.spline_scaler, {out, in, 1});
        Tensor eff_w = mul(p.spline_weight, scaler3);      // [out,in,nb]
        Tensor spline_out =
            linear(reshape(basis, {x.dim(0), in * nb}), reshape(eff_w, {out, in * nb}));
        return add(base_out, spline_out);
    }

    Tensor forward(const Tensor& x) const { return forward_with(x, p_, grid_); }

    const KanLayerParams& params() const { return p_; }
    const SplineGrid& grid() const { return grid_; }
    std::size_t in_features() const { return in_; }
    std::size_t out_features() const { return out_; }

private:
    std::size_t in_, out_;
    SplineGrid grid_;
    KanLayerParams p_;
};

// Residual token block: y = x + DropPath(KanLayer(LayerNorm(x))), applied
// token-wise on [N,L,D]. DropPath zeroes the branch per sample with
// probability p during training and rescales survivors by 1/(1-p).
class KanBlock {
public:
    KanBlock(ParameterStore& store, const std::string& prefix, Rng& rng, std::size_t dim,
             const SplineGrid& grid, double drop_path_p = 0.0)
        : dim_(dim), drop_path_p_(drop_path_p), layer_(store, prefix + ".kan", rng, dim, dim, grid) {
        if (drop_path_p < 0.0 || drop_path_p >= 1.0)
            throw ShapeError("KanBlock: drop_path_p must be in [0,1)");
        ln_gamma_ = store.add_param(prefix + ".ln.gamma", "kan", Tensor::full({dim}, 1.0));
        ln_beta_ = store.add_param(prefix + ".ln.beta", "kan", Tensor::zeros({dim}));
    }

    Tensor forward(const Tensor& x, bool training, Rng* droppath_rng = nullptr) const {
        if (x.rank() != 3 || x.dim(2) != dim_) throw ShapeError("KanBlock: expected [N,L,dim]");
        std::size_t n = x.dim(0), l = x.dim(1);
        Tensor normed = layer_norm(x, ln_gamma_, ln_beta_);
        Tensor flat = reshape(normed, {n * l, dim_});
        Tensor branch = reshape(layer_.forward(flat), {n, l, dim_});
        if (training && drop_path_p_ > 0.0) {
            if (!droppath_rng) throw UsageError("KanBlock: training with drop_path needs an RNG");
            Tensor mask({n, 1, 1});
            double keep = 1.0 - drop_path_p_;
            for (std::size_t i = 0; i < n; ++i)
                mask.data()[i] = droppath_rng->uniform() < drop_path_p_ ? 0.0 : 1.0 / keep;
            branch = mul(branch, mask);
        }
        return add(x, branch);
    }

    const KanLayer& layer() const { return layer_; }

private:
    std::size_t dim_;
    double drop_path_p_;
    Tensor ln_gamma_, ln_beta_;
    KanLayer layer_;
};

}  // namespace uman
