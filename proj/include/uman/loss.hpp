#pragma once

#include <cmath>
#include <cstddef>

#include "uman/ops.hpp"

namespace uman {

struct LossConfig {
    double lambda_dice = 1.0;
    double lambda_bce = 1.0;
    double smooth_eps = 1.0;   // Dice smoothing
    double threshold = 0.5;    // mask binarization

    void validate() const {
        if (lambda_dice < 0.0 || lambda_bce < 0.0) throw UsageError("loss: lambda must be >= 0");
        if (smooth_eps <= 0.0) throw UsageError("loss: smooth eps must be > 0");
        if (threshold <= 0.0 || threshold >= 1.0) throw UsageError("loss: threshold in (0,1)");
    }
};

// Smoothed Dice loss on sigmoid probabilities, averaged over the batch:
//   1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps)   per sample.
inline Tensor dice_loss(const Tensor& logits, const Tensor& target, double eps = 1.0) {
    if (logits.shape() != target.shape())
        throw ShapeError("dice_loss: shape mismatch " + shape_str(logits.shape()) + " vs " +
                         shape_str(target.shape()));
    if (logits.rank() < 1) throw ShapeError("dice_loss: empty tensor");
    std::size_t n = logits.dim(0);
    std::size_t per = logits.numel() / n;

    auto probs = std::make_shared<std::vector<double>>(logits.numel());
    auto inter = std::make_shared<std::vector<double>>(n);
    auto denom = std::make_shared<std::vector<double>>(n);
    double loss = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
        double sum_py = 0.0, sum_p = 0.0, sum_y = 0.0;
        for (std::size_t i = 0; i < per; ++i) {
            std::size_t idx = s * per + i;
            double p = stable_sigmoid(logits.data()[idx]);
            (*probs)[idx] = p;
            sum_py += p * target.data()[idx];
            sum_p += p;
            sum_y += target.data()[idx];
        }
        (*inter)[s] = 2.0 * sum_py + eps;
        (*denom)[s] = sum_p + sum_y + eps;
        loss += 1.0 - (*inter)[s] / (*denom)[s];
    }
    Tensor y = Tensor::scalar(loss / static_cast<double>(n));
    detail::check_finite("dice_loss", y);

    if (detail::recording({&logits})) {
        y.set_requires_grad(true);
        auto li = logits.impl(), ti = target.impl(), yi = y.impl();
        Tape::current()->record("dice_loss", [=]() {
            if (yi->grad.empty()) return;
            li->ensure_grad();
            double g = yi->grad[0] / static_cast<double>(n);
            for (std::size_t s = 0; s < n; ++s) {
                double inv_d = 1.0 / (*denom)[s];
                for (std::size_t i = 0; i < per; ++i) {
                    std::size_t idx = s * per + i;
                    double p = (*probs)[idx];
                    // d(dice_s)/dp = (2*y*denom - inter) / denom^2
                    double ddice = (2.0 * ti->value[idx] * (*denom)[s] - (*inter)[s]) * inv_d *
                                   inv_d;
                    li->grad[idx] += g * (-ddice) * p * (1.0 - p);
                }
            }
        });
    }
    return y;
}

// Mean binary cross-entropy from logits in the stable form
//   max(z,0) - z*y + log(1 + exp(-|z|)).
inline Tensor bce_loss(const Tensor& logits, const Tensor& target) {
    if (logits.shape() != target.shape())
        throw ShapeError("bce_loss: shape mismatch " + shape_str(logits.shape()) + " vs " +
                         shape_str(target.shape()));
    std::size_t m = logits.numel();
    double acc = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        double z = logits.data()[i];
        double yv = target.data()[i];
        acc += std::max(z, 0.0) - z * yv + std::log1p(std::exp(-std::abs(z)));
    }
    Tensor y = Tensor::scalar(acc / static_cast<double>(m));
    detail::check_finite("bce_loss", y);

    if (detail::recording({&logits})) {
        y.set_requires_grad(true);
        auto li = logits.impl(), ti = target.impl(), yi = y.impl();
        Tape::current()->record("bce_loss", [=]() {
            if (yi->grad.empty()) return;
            li->ensure_grad();
            double g = yi->grad[0] / static_cast<double>(m);
            for (std::size_t i = 0; i < m; ++i)
                li->grad[i] += g * (stable_sigmoid(li->value[i]) - ti->value[i]);
        });
    }
    return y;
}

inline Tensor total_loss(const Tensor& logits, const Tensor& target, const LossConfig& cfg) {
    cfg.validate();
    Tensor d = scale(dice_loss(logits, target, cfg.smooth_eps), cfg.lambda_dice);
    Tensor b = scale(bce_loss(logits, target), cfg.lambda_bce);
    return add(d, b);
}

// ---------------------------------------------------------------------------
// Evaluation metrics (plain doubles, no autodiff)
// ---------------------------------------------------------------------------

inline Tensor binarize(const Tensor& logits, double threshold = 0.5) {
    Tensor mask(logits.shape());
    for (std::size_t i = 0; i < logits.numel(); ++i)
        mask.data()[i] = stable_sigmoid(logits.data()[i]) >= threshold ? 1.0 : 0.0;
    return mask;
}

namespace detail {
struct MaskCounts {
    std::size_t inter = 0, p = 0, y = 0;
};

inline MaskCounts mask_counts(const Tensor& pred, const Tensor& truth) {
    if (pred.shape() != truth.shape()) throw ShapeError("metrics: mask shape mismatch");
    MaskCounts c;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        bool pv = pred.data()[i] != 0.0;
        bool yv = truth.data()[i] != 0.0;
        c.inter += pv && yv;
        c.p += pv;
        c.y += yv;
    }
    return c;
}
}  // namespace detail

// |P n Y| / |P u Y|; both-empty counts as a perfect 1.
inline double iou(const Tensor& pred, const Tensor& truth) {
    auto c = detail::mask_counts(pred, truth);
    std::size_t uni = c.p + c.y - c.inter;
    if (uni == 0) return 1.0;
    return static_cast<double>(c.inter) / static_cast<double>(uni);
}

// 2|P n Y| / (|P| + |Y|); both-empty counts as a perfect 1.
inline double f1(const Tensor& pred, const Tensor& truth) {
    auto c = detail::mask_counts(pred, truth);
    if (c.p + c.y == 0) return 1.0;
    return 2.0 * static_cast<double>(c.inter) / static_cast<double>(c.p + c.y);
}

}  // namespace uman
