#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "uman/tensor.hpp"

// Forward ops with recorded backward rules. All loops are single-threaded
// with a fixed traversal order, so identical inputs give bit-identical
// outputs and gradients.

namespace uman {

inline double stable_sigmoid(double x) {
    double y;
    if (x >= 0.0) {
        y = 1.0 / (1.0 + std::exp(-x));
    } else {
        double e = std::exp(x);
        y = e / (1.0 + e);
    }
    // Keep outputs strictly inside (0,1) even for saturating inputs.
    const double hi = 1.0 - std::numeric_limits<double>::epsilon();
    const double lo = std::numeric_limits<double>::min();
    return std::min(std::max(y, lo), hi);
}

namespace detail {

// Same-rank broadcasting: each dim must match or be 1.
struct Broadcast {
    Shape out;
    std::vector<std::size_t> stride_a, stride_b;

    Broadcast(const Shape& a, const Shape& b) {
        if (a.size() != b.size())
            throw ShapeError("broadcast: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
        std::size_t r = a.size();
        out.resize(r);
        for (std::size_t i = 0; i < r; ++i) {
            if (a[i] != b[i] && a[i] != 1 && b[i] != 1)
                throw ShapeError("broadcast: incompatible shapes " + shape_str(a) + " vs " +
                                 shape_str(b));
            out[i] = std::max(a[i], b[i]);
        }
        stride_a = strides_for(a);
        stride_b = strides_for(b);
    }

    std::vector<std::size_t> strides_for(const Shape& s) const {
        std::size_t r = s.size();
        std::vector<std::size_t> st(r, 0);
        std::size_t acc = 1;
        for (std::size_t i = r; i-- > 0;) {
            st[i] = (s[i] == 1) ? 0 : acc;
            acc *= s[i];
        }
        return st;
    }
};

// Visits every output index of a broadcast, yielding (out_lin, a_lin, b_lin).
template <typename F>
inline void broadcast_for_each(const Broadcast& bc, F&& f) {
    std::size_t r = bc.out.size();
    std::vector<std::size_t> idx(r, 0);
    std::size_t n = shape_numel(bc.out);
    std::size_t oa = 0, ob = 0;
    for (std::size_t o = 0; o < n; ++o) {
        f(o, oa, ob);
        for (std::size_t i = r; i-- > 0;) {
            ++idx[i];
            oa += bc.stride_a[i];
            ob += bc.stride_b[i];
            if (idx[i] < bc.out[i]) break;
            idx[i] = 0;
            oa -= bc.stride_a[i] * bc.out[i];
            ob -= bc.stride_b[i] * bc.out[i];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (with same-rank broadcasting)
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::Broadcast bc(a.shape(), b.shape());
    Tensor y(bc.out);
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& yv = y.data();
    detail::broadcast_for_each(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        yv[o] = av[ia] + bv[ib];
    });
    detail::check_finite("add", y);
    if (detail::recording({&a, &b})) {
        y.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), yi = y.impl();
        bool na = a.requires_grad(), nb = b.requires_grad();
        Tape::current()->record("add", [=]() {
            if (yi->grad.empty()) return;
            if (na) ai->ensure_grad();
            if (nb) bi->ensure_grad();
            detail::broadcast_for_each(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
                if (na) ai->grad[ia] += yi->grad[o];
                if (nb) bi->grad[ib] += yi->grad[o];
            });
        });
    }
    return y;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::Broadcast bc(a.shape(), b.shape());
    Tensor y(bc.out);
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& yv = y.data();
    detail::broadcast_for_each(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        yv[o] = av[ia] - bv[ib];
    });
    detail::check_finite("sub", y);
    if (detail::recording({&a, &b})) {
        y.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), yi = y.impl();
        bool na = a.requires_grad(), nb = b.requires_grad();
        Tape::current()->record("sub", [=]() {
            if (yi->grad.empty()) return;
            if (na) ai->ensure_grad();
            if (nb) bi->ensure_grad();
            detail::broadcast_for_each(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
                if (na) ai->grad[ia] += yi->grad[o];
                if (nb) bi->grad[ib] -= yi->grad[o];
            });
        });
    }
    return y;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::Broadcast bc(a.shape(), b.shape());
    Tensor y(bc.out);
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& yv = y.data();
    detail::broadcast_for_each(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        yv[o] = av[ia] * bv[ib];
    });
    detail::check_finite("mul", y);
    if (detail::recording({&a, &b})) {
        y.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), yi = y.impl();
        bool na = a.requires_grad(), nb = b.requires_grad();
        Tape::current()->record("mul", [=]() {
            if (yi->grad.empty()) return;
            if (na) ai->ensure_grad();
            if (nb) bi->ensure_grad();
            detail::broadcast_for_each(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
                double g = yi->grad[o];
                if (na) ai->grad[ia] += g * bi->value[ib];
                if (nb) bi->grad[ib] += g * ai->value[ia];
            });
        });
    }
    return y;
}

inline Tensor one_minus(const Tensor& x) {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) y.data()[i] = 1.0 - x.data()[i];
    if (detail::recording({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl(), yi = y.impl();
        Tape::current()->record("one_minus", [=]() {
            if (yi->grad.empty()) return;
            xi->ensure_grad();
            for (std::size_t i = 0; i < yi->grad.size(); ++i) xi->grad[i] -= yi->grad[i];
        });
    }
    return y;
}

// y = c * x for a plain double constant.
inline Tensor scale(const Tensor& x, double c) {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) y.data()[i] = c * x.data()[i];
    detail::check_finite("scale", y);
    if (detail::recording({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl(), yi = y.impl();
        Tape::current()->record("scale", [=]() {
            if (yi->grad.empty()) return;
            xi->ensure_grad();
            for (std::size_t i = 0; i < yi->grad.size(); ++i) xi->grad[i] += c * yi->grad[i];
        });
    }
    return y;
}

// y = s * x where s is a learnable 1-element tensor (fusion weights).
inline Tensor scale_by(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) throw ShapeError("scale_by: scale must be a 1-element tensor");
    Tensor y(x.shape());
    double sv = s.data()[0];
    for (std::size_t i = 0; i < x.numel(); ++i) y.data()[i] = sv * x.data()[i];
    detail::check_finite("scale_by", y);
    if (detail::recording({&x, &s})) {
        y.set_requires_grad(true);
        auto xi = x.impl(), si = s.impl(), yi = y.impl();
        bool nx = x.requires_grad(), ns = s.requires_grad();
        Tape::current()->record("scale_by", [=]() {
            if (yi->grad.empty()) return;
            if (nx) xi->ensure_grad();
            if (ns) si->ensure_grad();
            double acc = 0.0;
            for (std::size_t i = 0; i < yi->grad.size(); ++i) {
                if (nx) xi->grad[i] += si->value[0] * yi->grad[i];
                acc += yi->grad[i] * xi->value[i];
            }
            if (ns) si->grad[0] += acc;
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    Tensor y = Tensor::scalar(acc);
    detail::check_finite("sum", y);
    if (detail::recording({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl(), yi = y.impl();
        Tape::current()->record("sum", [=]() {
            if (yi->grad.empty()) return;
            xi->ensure_grad();
            double g = yi->grad[0];
            for (double& gv : xi->grad) gv += g;
        });
    }
    return y;
}

inline Tensor mean(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    double inv = 1.0 / static_cast<double>(x.numel());
    Tensor y = Tensor::scalar(acc * inv);
    if (detail::recording({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl(), yi = y.impl();
        Tape::current()->record("mean", [=]() {
            if (yi->grad.empty()) return;
            xi->ensure_grad();
            double g = yi->grad[0] * inv;
            for (double& gv : xi->grad) gv += g;
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& x) {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) y.data()[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    detail::check_finite("relu", y);
    if (detail::recording({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl(), yi = y.impl();
        Tape::current()->record("relu", [=]() {
            if (yi->grad.empty()) return;
            xi->ensure_grad();
            for (std::size_t i = 0; i < yi->grad.size(); ++i)
                if (xi->value[i] > 0.0) xi->grad[i] += yi->grad[i];
        });
    }
    return y;
}

inline Tensor sigmoid(const Tensor& x) {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) y.data()[i] = stable_sigmoid(x.data()[i]);
    detail::check_finite("sigmoid", y);
    if (detail::recording({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl(), yi = y.impl();
        Tape::current()->record("sigmoid", [=]() {
            if (yi->grad.empty()) return;
            xi->ensure_grad();
            for (std::size_t i = 0; i < yi->grad.size(); ++i) {
                double s = yi->value[i];
                xi->grad[i] += yi->grad[i] * s * (1.0 - s);
            }
        });
    }
    return y;
}

inline Tensor silu(const Tensor& x) {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        double s = stable_sigmoid(x.data()[i]);
        y.data()[i] = x.data()[i] * s;
    }
    detail::check_finite("silu", y);
    if (detail::recording({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl(), yi = y.impl();
        Tape::current()->record("silu", [=]() {
            if (yi->grad.empty()) return;
            xi->ensure_grad();
            for (std::size_t i = 0; i < yi->grad.size(); ++i) {
                double s = stable_sigmoid(xi->value[i]);
                xi->grad[i] += yi->grad[i] * s * (1.0 + xi->value[i] * (1.0 - s));
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
                         shape_str(shape));
    Tensor y = Tensor::from(std::move(shape), x.data());
    if (detail::recording({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl(), yi = y.impl();
        Tape::current()->record("reshape", [=]() {
            if (yi->grad.empty()) return;
            xi->ensure_grad();
            for (std::size_t i = 0; i < yi->grad.size(); ++i) xi->grad[i] += yi->grad[i];
        });
    }
    return y;
}

// tokens [N,L,D] -> map [N,D,H,W], row-major token order (L = H*W).
inline Tensor tokens_to_map(const Tensor& x, std::size_t h, std::size_t w) {
    if (x.rank() != 3) throw ShapeError("tokens_to_map: expected [N,L,D]");
    std::size_t n = x.dim(0), l = x.dim(1), d = x.dim(2);
    if (l != h * w) throw ShapeError("tokens_to_map: L != H*W");
    Tensor y({n, d, h, w});
    for (std::size_t in = 0; in < n; ++in)
        for (std::size_t it = 0; it < l; ++it)
            for (std::size_t id = 0; id < d; ++id)
                y.data()[((in * d + id) * h + it / w) * w + it % w] =
                    x.data()[(in * l + it) * d + id];
    if (detail::recording({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl(), yi = y.impl();
        Tape::current()->record("tokens_to_map", [=]() {
            if (yi->grad.empty()) return;
            xi->ensure_grad();
            for (std::size_t in = 0; in < n; ++in)
                for (std::size_t it = 0; it < l; ++it)
                    for (std::size_t id = 0; id < d; ++id)
                        xi->grad[(in * l + it) * d + id] +=
                            yi->grad[((in * d + id) * h + it / w) * w + it % w];
        });
    }
    return y;
}

// map [N,D,H,W] -> tokens [N,L,D].
inline Tensor map_to_tokens(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("map_to_tokens: expected [N,D,H,W]");
    std::size_t n = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
    std::size_t l = h * w;
    Tensor y({n, l, d});
    for (std::size_t in = 0; in < n; ++in)
        for (std::size_t it = 0; it < l; ++it)
            for (std::size_t id = 0; id < d; ++id)
                y.data()[(in * l + it) * d + id] =
                    x.data()[((in * d + id) * h + it / w) * w + it % w];
    if (detail::recording({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl(), yi = y.impl();
        Tape::current()->record("map_to_tokens", [=]() {
            if (yi->grad.empty()) return;
            xi->ensure_grad();
            for (std::size_t in = 0; in < n; ++in)
                for (std::size_t it = 0; it < l; ++it)
                    for (std::size_t id = 0; id < d; ++id)
                        xi->grad[((in * d + id) * h + it / w) * w + it % w] +=
                            yi->grad[(in * l + it) * d + id];
        });
    }
    return y;
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.rank() != 4 || b.rank() != 4)
        throw ShapeError("concat_channels: expected [N,C,H,W] inputs");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw ShapeError("concat_channels: batch/spatial mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
    std::size_t plane = h * w;
    Tensor y({n, ca + cb, h, w});
    for (std::size_t in = 0; in < n; ++in) {
        std::copy_n(a.data().begin() + in * ca * plane, ca * plane,
                    y.data().begin() + in * (ca + cb) * plane);
        std::copy_n(b.data().begin() + in * cb * plane, cb * plane,
                    y.data().begin() + (in * (ca + cb) + ca) * plane);
    }
    if (detail::recording({&a, &b})) {
        y.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), yi = y.impl();
        bool na = a.requires_grad(), nb = b.requires_grad();
        Tape::current()->record("concat_channels", [=]() {
            if (yi->grad.empty()) return;
            if (na) ai->ensure_grad();
            if (nb) bi->ensure_grad();
            for (std::size_t in = 0; in < n; ++in) {
                if (na)
                    for (std::size_t i = 0; i < ca * plane; ++i)
                        ai->grad[in * ca * plane + i] += yi->grad[in * (ca + cb) * plane + i];
                if (nb)
                    for (std::size_t i = 0; i < cb * plane; ++i)
                        bi->grad[in * cb * plane + i] +=
                            yi->grad[(in * (ca + cb) + ca) * plane + i];
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Dense / convolution
// ---------------------------------------------------------------------------

// y[n,o] = sum_f x[n,f] * w[o,f]
inline Tensor linear(const Tensor& x, const Tensor& w) {
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1))
        throw ShapeError("linear: expected x[N,F], w[O,F] with matching F");
    std::size_t n = x.dim(0), f = x.dim(1), o = w.dim(0);
    Tensor y({n, o});
    for (std::size_t in = 0; in < n; ++in) {
        const double* xr = x.data().data() + in * f;
        for (std::size_t io = 0; io < o; ++io) {
            const double* wr = w.data().data() + io * f;
            double acc = 0.0;
            for (std::size_t k = 0; k < f; ++k) acc += xr[k] * wr[k];
            y.data()[in * o + io] = acc;
        }
    }
    detail::check_finite("linear", y);
    if (detail::recording({&x, &w})) {
        y.set_requires_grad(true);
        auto xi = x.impl(), wi = w.impl(), yi = y.impl();
        bool nx = x.requires_grad(), nw = w.requires_grad();
        Tape::current()->record("linear", [=]() {
            if (yi->grad.empty()) return;
            if (nx) xi->ensure_grad();
            if (nw) wi->ensure_grad();
            for (std::size_t in = 0; in < n; ++in)
                for (std::size_t io = 0; io < o; ++io) {
                    double g = yi->grad[in * o + io];
                    if (g == 0.0) continue;
                    for (std::size_t k = 0; k < f; ++k) {
                        if (nx) xi->grad[in * f + k] += g * wi->value[io * f + k];
                        if (nw) wi->grad[io * f + k] += g * xi->value[in * f + k];
                    }
                }
        });
    }
    return y;
}

namespace detail {

inline void conv_check(std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
                       std::size_t pad) {
    if (k % 2 == 0) throw ShapeError("conv: kernel size must be odd");
    if (stride < 1) throw ShapeError("conv: stride must be >= 1");
    if (h + 2 * pad < k || w + 2 * pad < k)
        throw ShapeError("conv: padded input smaller than kernel");
}

struct ConvDims {
    std::size_t ho, wo;
};

inline ConvDims conv_out(std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
                         std::size_t pad) {
    return {(h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1};
}

// Valid output range [lo, hi) along one axis for a given kernel offset.
inline void conv_range(std::size_t in_dim, std::size_t out_dim, std::size_t stride,
                       std::size_t pad, std::size_t kk, std::size_t& lo, std::size_t& hi) {
    long p = static_cast<long>(pad), k = static_cast<long>(kk), s = static_cast<long>(stride);
    long l = p - k;  // in-index = o*s - p + k >= 0  =>  o >= (p-k)/s
    long lo_l = l > 0 ? (l + s - 1) / s : 0;
    long hi_l = (static_cast<long>(in_dim) - 1 + p - k) / s;  // in-index <= in_dim-1
    if (hi_l >= static_cast<long>(out_dim)) hi_l = static_cast<long>(out_dim) - 1;
    if (hi_l < lo_l) {
        lo = hi = 0;
        return;
    }
    lo = static_cast<std::size_t>(lo_l);
    hi = static_cast<std::size_t>(hi_l) + 1;
}

}  // namespace detail

// Cross-correlation with zero padding: x[N,Cin,H,W] * w[Cout,Cin,k,k] + b[Cout].
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride = 1,
                     std::size_t pad = 0) {
    if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d: expected 4-D x and w");
    std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    std::size_t cout = w.dim(0), k = w.dim(2);
    if (w.dim(1) != cin)
        throw ShapeError("conv2d: input channels " + std::to_string(cin) +
                         " != kernel channels " + std::to_string(w.dim(1)));
    if (w.dim(3) != k) throw ShapeError("conv2d: kernel must be square");
    if (b.numel() != cout) throw ShapeError("conv2d: bias size mismatch");
    detail::conv_check(h, wd, k, stride, pad);
    auto [ho, wo] = detail::conv_out(h, wd, k, stride, pad);

    Tensor y({n, cout, ho, wo});
    const double* xp = x.data().data();
    const double* wp = w.data().data();
    double* yp = y.data().data();
    for (std::size_t in = 0; in < n; ++in)
        for (std::size_t co = 0; co < cout; ++co) {
            double* yplane = yp + (in * cout + co) * ho * wo;
            double bias = b.data()[co];
            for (std::size_t i = 0; i < ho * wo; ++i) yplane[i] = bias;
            for (std::size_t ci = 0; ci < cin; ++ci) {
                const double* xplane = xp + (in * cin + ci) * h * wd;
                for (std::size_t ky = 0; ky < k; ++ky) {
                    std::size_t oy_lo, oy_hi;
                    detail::conv_range(h, ho, stride, pad, ky, oy_lo, oy_hi);
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        double wv = wp[((co * cin + ci) * k + ky) * k + kx];
                        if (wv == 0.0) continue;
                        std::size_t ox_lo, ox_hi;
                        detail::conv_range(wd, wo, stride, pad, kx, ox_lo, ox_hi);
                        for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
                            std::size_t iy = oy * stride - pad + ky;
                            const double* xrow = xplane + iy * wd;
                            double* yrow = yplane + oy * wo;
                            for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                                yrow[ox] += wv * xrow[ox * stride - pad + kx];
                        }
                    }
                }
            }
        }
    detail::check_finite("conv2d", y);

    if (detail::recording({&x, &w, &b})) {
        y.set_requires_grad(true);
        auto xi = x.impl(), wi = w.impl(), bi = b.impl(), yi = y.impl();
        bool nx = x.requires_grad(), nw = w.requires_grad(), nb = b.requires_grad();
        Tape::current()->record("conv2d", [=]() {
            if (yi->grad.empty()) return;
            if (nx) xi->ensure_grad();
            if (nw) wi->ensure_grad();
            if (nb) bi->ensure_grad();
            for (std::size_t in = 0; in < n; ++in)
                for (std::size_t co = 0; co < cout; ++co) {
                    const double* gplane = yi->grad.data() + (in * cout + co) * ho * wo;
                    if (nb) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < ho * wo; ++i) acc += gplane[i];
                        bi->grad[co] += acc;
                    }
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const double* xplane = xi->value.data() + (in * cin + ci) * h * wd;
                        double* dxplane = nx ? xi->grad.data() + (in * cin + ci) * h * wd : nullptr;
                        for (std::size_t ky = 0; ky < k; ++ky) {
                            std::size_t oy_lo, oy_hi;
                            detail::conv_range(h, ho, stride, pad, ky, oy_lo, oy_hi);
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                std::size_t widx = ((co * cin + ci) * k + ky) * k + kx;
                                double wv = wi->value[widx];
                                double dw_acc = 0.0;
                                std::size_t ox_lo, ox_hi;
                                detail::conv_range(wd, wo, stride, pad, kx, ox_lo, ox_hi);
                                for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
                                    std::size_t iy = oy * stride - pad + ky;
                                    const double* grow = gplane + oy * wo;
                                    const double* xrow = xplane + iy * wd;
                                    double* dxrow = nx ? dxplane + iy * wd : nullptr;
                                    for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) {
                                        double g = grow[ox];
                                        std::size_t ix = ox * stride - pad + kx;
                                        if (nw) dw_acc += g * xrow[ix];
                                        if (nx) dxrow[ix] += g * wv;
                                    }
                                }
                                if (nw) wi->grad[widx] += dw_acc;
                            }
                        }
                    }
                }
        });
    }
    return y;
}

// One filter per channel: x[N,C,H,W] * w[C,1,k,k]; channel c depends only on
// channel c of the input.
inline Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, std::size_t stride = 1,
                               std::size_t pad = 0) {
    if (x.rank() != 4 || w.rank() != 4) throw ShapeError("depthwise_conv2d: expected 4-D x and w");
    std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    std::size_t k = w.dim(2);
    if (w.dim(0) != c)
        throw ShapeError("depthwise_conv2d: channel count mismatch " + std::to_string(c) +
                         " vs " + std::to_string(w.dim(0)));
    if (w.dim(1) != 1) throw ShapeError("depthwise_conv2d: expected one filter per channel");
    if (w.dim(3) != k) throw ShapeError("depthwise_conv2d: kernel must be square");
    detail::conv_check(h, wd, k, stride, pad);
    auto [ho, wo] = detail::conv_out(h, wd, k, stride, pad);

    Tensor y({n, c, ho, wo});
    for (std::size_t in = 0; in < n; ++in)
        for (std::size_t ic = 0; ic < c; ++ic) {
            const double* xplane = x.data().data() + (in * c + ic) * h * wd;
            double* yplane = y.data().data() + (in * c + ic) * ho * wo;
            for (std::size_t ky = 0; ky < k; ++ky) {
                std::size_t oy_lo, oy_hi;
                detail::conv_range(h, ho, stride, pad, ky, oy_lo, oy_hi);
                for (std::size_t kx = 0; kx < k; ++kx) {
                    double wv = w.data()[(ic * k + ky) * k + kx];
                    if (wv == 0.0) continue;
                    std::size_t ox_lo, ox_hi;
                    detail::conv_range(wd, wo, stride, pad, kx, ox_lo, ox_hi);
                    for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
                        std::size_t iy = oy * stride - pad + ky;
                        const double* xrow = xplane + iy * wd;
                        double* yrow = yplane + oy * wo;
                        for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                            yrow[ox] += wv * xrow[ox * stride - pad + kx];
                    }
                }
            }
        }
    detail::check_finite("depthwise_conv2d", y);

    if (detail::recording({&x, &w})) {
        y.set_requires_grad(true);
        auto xi = x.impl(), wi = w.impl(), yi = y.impl();
        bool nx = x.requires_grad(), nw = w.requires_grad();
        Tape::current()->record("depthwise_conv2d", [=]() {
            if (yi->grad.empty()) return;
            if (nx) xi->ensure_grad();
            if (nw) wi->ensure_grad();
            for (std::size_t in = 0; in < n; ++in)
                for (std::size_t ic = 0; ic < c; ++ic) {
                    const double* gplane = yi->grad.data() + (in * c + ic) * ho * wo;
                    const double* xplane = xi->value.data() + (in * c + ic) * h * wd;
                    double* dxplane = nx ? xi->grad.data() + (in * c + ic) * h * wd : nullptr;
                    for (std::size_t ky = 0; ky < k; ++ky) {
                        std::size_t oy_lo, oy_hi;
                        detail::conv_range(h, ho, stride, pad, ky, oy_lo, oy_hi);
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            std::size_t widx = (ic * k + ky) * k + kx;
                            double wv = wi->value[widx];
                            double dw_acc = 0.0;
                            std::size_t ox_lo, ox_hi;
                            detail::conv_range(wd, wo, stride, pad, kx, ox_lo, ox_hi);
                            for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
                                std::size_t iy = oy * stride - pad + ky;
                                const double* grow = gplane + oy * wo;
                                const double* xrow = xplane + iy * wd;
                                double* dxrow = nx ? dxplane + iy * wd : nullptr;
                                for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) {
                                    double g = grow[ox];
                                    std::size_t ix = ox * stride - pad + kx;
                                    if (nw) dw_acc += g * xrow[ix];
                                    if (nx) dxrow[ix] += g * wv;
                                }
                            }
                            if (nw) wi->grad[widx] += dw_acc;
                        }
                    }
                }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Resampling and pooling
// ---------------------------------------------------------------------------

// x2 bilinear upsampling, align-corners=false.
inline Tensor bilinear_upsample2x(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("bilinear_upsample2x: expected [N,C,H,W]");
    std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    std::size_t h2 = 2 * h, w2 = 2 * w;
    Tensor y({n, c, h2, w2});

    // Per-axis taps are the same for every plane; precompute them.
    struct Tap {
        std::size_t i0, i1;
        double w0, w1;
    };
    auto make_taps = [](std::size_t in_dim, std::size_t out_dim) {
        std::vector<Tap> taps(out_dim);
        for (std::size_t o = 0; o < out_dim; ++o) {
            double src = (static_cast<double>(o) + 0.5) * 0.5 - 0.5;
            double f = std::floor(src);
            double frac = src - f;
            long i0 = static_cast<long>(f);
            long i1 = i0 + 1;
            long last = static_cast<long>(in_dim) - 1;
            taps[o].i0 = static_cast<std::size_t>(std::clamp(i0, 0l, last));
            taps[o].i1 = static_cast<std::size_t>(std::clamp(i1, 0l, last));
            taps[o].w0 = 1.0 - frac;
            taps[o].w1 = frac;
        }
        return taps;
    };
    auto ty = make_taps(h, h2);
    auto tx = make_taps(w, w2);

    for (std::size_t p = 0; p < n * c; ++p) {
        const double* xp = x.data().data() + p * h * w;
        double* yp = y.data().data() + p * h2 * w2;
        for (std::size_t oy = 0; oy < h2; ++oy) {
            const double* r0 = xp + ty[oy].i0 * w;
            const double* r1 = xp + ty[oy].i1 * w;
            double wy0 = ty[oy].w0, wy1 = ty[oy].w1;
            double* yrow = yp + oy * w2;
            for (std::size_t ox = 0; ox < w2; ++ox)
                yrow[ox] = wy0 * (tx[ox].w0 * r0[tx[ox].i0] + tx[ox].w1 * r0[tx[ox].i1]) +
                           wy1 * (tx[ox].w0 * r1[tx[ox].i0] + tx[ox].w1 * r1[tx[ox].i1]);
        }
    }
    detail::check_finite("bilinear_upsample2x", y);

    if (detail::recording({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl(), yi = y.impl();
        Tape::current()->record("bilinear_upsample2x", [=]() {
            if (yi->grad.empty()) return;
            xi->ensure_grad();
            for (std::size_t p = 0; p < n * c; ++p) {
                double* dx = xi->grad.data() + p * h * w;
                const double* gy = yi->grad.data() + p * h2 * w2;
                for (std::size_t oy = 0; oy < h2; ++oy)
                    for (std::size_t ox = 0; ox < w2; ++ox) {
                        double g = gy[oy * w2 + ox];
                        dx[ty[oy].i0 * w + tx[ox].i0] += g * ty[oy].w0 * tx[ox].w0;
                        dx[ty[oy].i0 * w + tx[ox].i1] += g * ty[oy].w0 * tx[ox].w1;
                        dx[ty[oy].i1 * w + tx[ox].i0] += g * ty[oy].w1 * tx[ox].w0;
                        dx[ty[oy].i1 * w + tx[ox].i1] += g * ty[oy].w1 * tx[ox].w1;
                    }
            }
        });
    }
    return y;
}

// 2x2 max pooling with stride 2; spatial dims must be even.
inline Tensor max_pool2x(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("max_pool2x: expected [N,C,H,W]");
    std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0) throw ShapeError("max_pool2x: spatial dims must be even");
    std::size_t ho = h / 2, wo = w / 2;
    Tensor y({n, c, ho, wo});
    auto argmax = std::make_shared<std::vector<std::size_t>>(n * c * ho * wo);
    for (std::size_t p = 0; p < n * c; ++p) {
        const double* xp = x.data().data() + p * h * w;
        double* yp = y.data().data() + p * ho * wo;
        std::size_t* ap = argmax->data() + p * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                std::size_t base = (2 * oy) * w + 2 * ox;
                std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
                std::size_t best = cand[0];
                for (int i = 1; i < 4; ++i)
                    if (xp[cand[i]] > xp[best]) best = cand[i];
                yp[oy * wo + ox] = xp[best];
                ap[oy * wo + ox] = best;
            }
    }
    detail::check_finite("max_pool2x", y);
    if (detail::recording({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl(), yi = y.impl();
        Tape::current()->record("max_pool2x", [=]() {
            if (yi->grad.empty()) return;
            xi->ensure_grad();
            for (std::size_t p = 0; p < n * c; ++p)
                for (std::size_t i = 0; i < ho * wo; ++i)
                    xi->grad[p * h * w + (*argmax)[p * ho * wo + i]] +=
                        yi->grad[p * ho * wo + i];
        });
    }
    return y;
}

// Global average pool: [N,C,H,W] -> [N,C,1,1].
inline Tensor avg_pool_global(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("avg_pool_global: expected [N,C,H,W]");
    std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    double inv = 1.0 / static_cast<double>(h * w);
    Tensor y({n, c, 1, 1});
    for (std::size_t p = 0; p < n * c; ++p) {
        const double* xp = x.data().data() + p * h * w;
        double acc = 0.0;
        for (std::size_t i = 0; i < h * w; ++i) acc += xp[i];
        y.data()[p] = acc * inv;
    }
    detail::check_finite("avg_pool_global", y);
    if (detail::recording({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl(), yi = y.impl();
        Tape::current()->record("avg_pool_global", [=]() {
            if (yi->grad.empty()) return;
            xi->ensure_grad();
            for (std::size_t p = 0; p < n * c; ++p) {
                double g = yi->grad[p] * inv;
                for (std::size_t i = 0; i < h * w; ++i) xi->grad[p * h * w + i] += g;
            }
        });
    }
    return y;
}

// Per-pixel max over channels: [N,C,H,W] -> [N,1,H,W].
inline Tensor max_pool_channelwise(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("max_pool_channelwise: expected [N,C,H,W]");
    std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    std::size_t plane = h * w;
    Tensor y({n, 1, h, w});
    auto argmax = std::make_shared<std::vector<std::size_t>>(n * plane);
    for (std::size_t in = 0; in < n; ++in)
        for (std::size_t i = 0; i < plane; ++i) {
            std::size_t best = 0;
            double bv = x.data()[in * c * plane + i];
            for (std::size_t ic = 1; ic < c; ++ic) {
                double v = x.data()[(in * c + ic) * plane + i];
                if (v > bv) {
                    bv = v;
                    best = ic;
                }
            }
            y.data()[in * plane + i] = bv;
            (*argmax)[in * plane + i] = best;
        }
    detail::check_finite("max_pool_channelwise", y);
    if (detail::recording({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl(), yi = y.impl();
        Tape::current()->record("max_pool_channelwise", [=]() {
            if (yi->grad.empty()) return;
            xi->ensure_grad();
            for (std::size_t in = 0; in < n; ++in)
                for (std::size_t i = 0; i < plane; ++i)
                    xi->grad[(in * c + (*argmax)[in * plane + i]) * plane + i] +=
                        yi->grad[in * plane + i];
        });
    }
    return y;
}

// Per-pixel mean over channels: [N,C,H,W] -> [N,1,H,W].
inline Tensor mean_channelwise(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("mean_channelwise: expected [N,C,H,W]");
    std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    std::size_t plane = h * w;
    double inv = 1.0 / static_cast<double>(c);
    Tensor y({n, 1, h, w});
    for (std::size_t in = 0; in < n; ++in)
        for (std::size_t i = 0; i < plane; ++i) {
            double acc = 0.0;
            for (std::size_t ic = 0; ic < c; ++ic) acc += x.data()[(in * c + ic) * plane + i];
            y.data()[in * plane + i] = acc * inv;
        }
    detail::check_finite("mean_channelwise", y);
    if (detail::recording({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl(), yi = y.impl();
        Tape::current()->record("mean_channelwise", [=]() {
            if (yi->grad.empty()) return;
            xi->ensure_grad();
            for (std::size_t in = 0; in < n; ++in)
                for (std::size_t i = 0; i < plane; ++i) {
                    double g = yi->grad[in * plane + i] * inv;
                    for (std::size_t ic = 0; ic < c; ++ic)
                        xi->grad[(in * c + ic) * plane + i] += g;
                }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Normalizes over the last dimension; gamma/beta have that dimension.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
    if (x.rank() < 1) throw ShapeError("layer_norm: rank must be >= 1");
    std::size_t d = x.dim(x.rank() - 1);
    if (gamma.numel() != d || beta.numel() != d)
        throw ShapeError("layer_norm: gamma/beta size " + std::to_string(gamma.numel()) +
                         " != last dim " + std::to_string(d));
    if (eps <= 0.0) throw ShapeError("layer_norm: eps must be positive");
    std::size_t rows = x.numel() / d;
    Tensor y(x.shape());
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * d;
        double mu = 0.0;
        for (std::size_t i = 0; i < d; ++i) mu += xr[i];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            double c = xr[i] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = inv;
        for (std::size_t i = 0; i < d; ++i) {
            double xh = (xr[i] - mu) * inv;
            (*xhat)[r * d + i] = xh;
            y.data()[r * d + i] = gamma.data()[i] * xh + beta.data()[i];
        }
    }
    detail::check_finite("layer_norm", y);

    if (detail::recording({&x, &gamma, &beta})) {
        y.set_requires_grad(true);
        auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), yi = y.impl();
        bool nx = x.requires_grad(), ng = gamma.requires_grad(), nb = beta.requires_grad();
        Tape::current()->record("layer_norm", [=]() {
            if (yi->grad.empty()) return;
            if (nx) xi->ensure_grad();
            if (ng) gi->ensure_grad();
            if (nb) bi->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* gy = yi->grad.data() + r * d;
                const double* xh = xhat->data() + r * d;
                if (ng || nb)
                    for (std::size_t i = 0; i < d; ++i) {
                        if (ng) gi->grad[i] += gy[i] * xh[i];
                        if (nb) bi->grad[i] += gy[i];
                    }
                if (nx) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t i = 0; i < d; ++i) {
                        double dxh = gy[i] * gi->value[i];
                        s1 += dxh;
                        s2 += dxh * xh[i];
                    }
                    double invd = 1.0 / static_cast<double>(d);
                    double inv = (*inv_std)[r];
                    for (std::size_t i = 0; i < d; ++i) {
                        double dxh = gy[i] * gi->value[i];
                        xi->grad[r * d + i] += inv * (dxh - s1 * invd - xh[i] * s2 * invd);
                    }
                }
            }
        });
    }
    return y;
}

// Per-channel batch norm over (N,H,W). Training mode normalizes with batch
// statistics and updates the running buffers in place; eval mode reads the
// running buffers and never mutates state.
inline Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                           Tensor& running_mean, Tensor& running_var, bool training,
                           double momentum = 0.1, double eps = 1e-5) {
    if (x.rank() != 4) throw ShapeError("batch_norm2d: expected [N,C,H,W]");
    std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c ||
        running_var.numel() != c)
        throw ShapeError("batch_norm2d: channel mismatch");
    if (momentum <= 0.0 || momentum > 1.0) throw ShapeError("batch_norm2d: momentum in (0,1]");
    std::size_t plane = h * w;
    std::size_t m = n * plane;
    Tensor y(x.shape());

    auto mean_c = std::make_shared<std::vector<double>>(c);
    auto inv_c = std::make_shared<std::vector<double>>(c);
    for (std::size_t ic = 0; ic < c; ++ic) {
        double mu, var;
        if (training) {
            double acc = 0.0;
            for (std::size_t in = 0; in < n; ++in) {
                const double* xp = x.data().data() + (in * c + ic) * plane;
                for (std::size_t i = 0; i < plane; ++i) acc += xp[i];
            }
            mu = acc / static_cast<double>(m);
            double vacc = 0.0;
            for (std::size_t in = 0; in < n; ++in) {
                const double* xp = x.data().data() + (in * c + ic) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    double d = xp[i] - mu;
                    vacc += d * d;
                }
            }
            var = vacc / static_cast<double>(m);
            running_mean.data()[ic] = (1.0 - momentum) * running_mean.data()[ic] + momentum * mu;
            running_var.data()[ic] = (1.0 - momentum) * running_var.data()[ic] + momentum * var;
        } else {
            mu = running_mean.data()[ic];
            var = running_var.data()[ic];
        }
        double inv = 1.0 / std::sqrt(var + eps);
        (*mean_c)[ic] = mu;
        (*inv_c)[ic] = inv;
        double g = gamma.data()[ic], bb = beta.data()[ic];
        for (std::size_t in = 0; in < n; ++in) {
            const double* xp = x.data().data() + (in * c + ic) * plane;
            double* yp = y.data().data() + (in * c + ic) * plane;
            for (std::size_t i = 0; i < plane; ++i) yp[i] = g * (xp[i] - mu) * inv + bb;
        }
    }
    detail::check_finite("batch_norm2d", y);

    if (detail::recording({&x, &gamma, &beta})) {
        y.set_requires_grad(true);
        auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), yi = y.impl();
        bool nx = x.requires_grad(), ng = gamma.requires_grad(), nb = beta.requires_grad();
        Tape::current()->record("batch_norm2d", [=]() {
            if (yi->grad.empty()) return;
            if (nx) xi->ensure_grad();
            if (ng) gi->ensure_grad();
            if (nb) bi->ensure_grad();
            for (std::size_t ic = 0; ic < c; ++ic) {
                double mu = (*mean_c)[ic], inv = (*inv_c)[ic];
                double sum_dy = 0.0, sum_dy_xh = 0.0;
                for (std::size_t in = 0; in < n; ++in) {
                    const double* gy = yi->grad.data() + (in * c + ic) * plane;
                    const double* xp = xi->value.data() + (in * c + ic) * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        sum_dy += gy[i];
                        sum_dy_xh += gy[i] * (xp[i] - mu) * inv;
                    }
                }
                if (ng) gi->grad[ic] += sum_dy_xh;
                if (nb) bi->grad[ic] += sum_dy;
                if (nx) {
                    double g = gi->value[ic];
                    double invm = 1.0 / static_cast<double>(m);
                    for (std::size_t in = 0; in < n; ++in) {
                        const double* gy = yi->grad.data() + (in * c + ic) * plane;
                        const double* xp = xi->value.data() + (in * c + ic) * plane;
                        double* dx = xi->grad.data() + (in * c + ic) * plane;
                        for (std::size_t i = 0; i < plane; ++i) {
                            if (training) {
                                double xh = (xp[i] - mu) * inv;
                                dx[i] += g * inv * (gy[i] - sum_dy * invm - xh * sum_dy_xh * invm);
                            } else {
                                dx[i] += g * inv * gy[i];
                            }
                        }
                    }
                }
            }
        });
    }
    return y;
}

}  // namespace uman
