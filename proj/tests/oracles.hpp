// Test-only reference implementations, deliberately written as naive direct
// translations of the definitions so they stay independent of the library's
// computation paths.
#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "uman/tensor.hpp"

namespace oracle {

// Direct window summation with explicit zero padding (cross-correlation).
inline uman::Tensor conv2d_naive(const uman::Tensor& x, const uman::Tensor& w,
                                 const uman::Tensor& b, std::size_t stride, std::size_t pad) {
    std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    std::size_t cout = w.dim(0), k = w.dim(2);
    std::size_t ho = (h + 2 * pad - k) / stride + 1;
    std::size_t wo = (wd + 2 * pad - k) / stride + 1;
    uman::Tensor y({n, cout, ho, wo});
    for (std::size_t in = 0; in < n; ++in)
        for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    double acc = b.numel() ? b.at(co) : 0.0;
                    for (std::size_t ci = 0; ci < cin; ++ci)
                        for (std::size_t ky = 0; ky < k; ++ky)
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                long iy = static_cast<long>(oy * stride + ky) -
                                          static_cast<long>(pad);
                                long ix = static_cast<long>(ox * stride + kx) -
                                          static_cast<long>(pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) ||
                                    ix >= static_cast<long>(wd))
                                    continue;
                                acc += w(co, ci, ky, kx) *
                                       x(in, ci, static_cast<std::size_t>(iy),
                                         static_cast<std::size_t>(ix));
                            }
                    y(in, co, oy, ox) = acc;
                }
    return y;
}

// Scalar align-corners=false bilinear interpolation at one output coordinate.
inline double bilinear_at(const std::vector<double>& row, std::size_t w, std::size_t out_x) {
    double src = (static_cast<double>(out_x) + 0.5) * 0.5 - 0.5;
    double f = std::floor(src);
    double frac = src - f;
    long i0 = static_cast<long>(f);
    long i1 = i0 + 1;
    auto clamp = [&](long i) {
        if (i < 0) return std::size_t{0};
        if (i >= static_cast<long>(w)) return w - 1;
        return static_cast<std::size_t>(i);
    };
    return (1.0 - frac) * row[clamp(i0)] + frac * row[clamp(i1)];
}

// Plain recursive Cox-de Boor evaluation of one basis function. Shares the
// endpoint convention of the library grid (x == hi belongs to the last
// nominal interval) but nothing else.
inline double cox_de_boor(const std::vector<double>& knots, std::size_t i, std::size_t p, double x,
                          double range_hi, std::size_t last_nominal_interval) {
    if (p == 0) {
        if (x == range_hi) return i == last_nominal_interval ? 1.0 : 0.0;
        return knots[i] <= x && x < knots[i + 1] ? 1.0 : 0.0;
    }
    double left = (x - knots[i]) / (knots[i + p] - knots[i]) *
                  cox_de_boor(knots, i, p - 1, x, range_hi, last_nominal_interval);
    double right = (knots[i + p + 1] - x) / (knots[i + p + 1] - knots[i + 1]) *
                   cox_de_boor(knots, i + 1, p - 1, x, range_hi, last_nominal_interval);
    return left + right;
}

// Reference Adam recurrence on a single scalar.
struct ScalarAdam {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double m = 0.0, v = 0.0;
    std::size_t t = 0;

    double step(double theta, double grad, double lr) {
        ++t;
        m = beta1 * m + (1.0 - beta1) * grad;
        v = beta2 * v + (1.0 - beta2) * grad * grad;
        double mhat = m / (1.0 - std::pow(beta1, static_cast<double>(t)));
        double vhat = v / (1.0 - std::pow(beta2, static_cast<double>(t)));
        return theta - lr * mhat / (std::sqrt(vhat) + eps);
    }
};

}  // namespace oracle
