#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "uman/kan.hpp"
#include "uman/loss.hpp"
#include "uman/network.hpp"
#include "uman/pagf.hpp"

namespace uman {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;

    bool all_pass() const {
        for (const auto& e : entries)
            if (!e.pass) return false;
        return !entries.empty();
    }

    std::string to_text() const {
        std::string out = "layer                          max rel err   tolerance   result\n";
        char buf[160];
        for (const auto& e : entries) {
            std::snprintf(buf, sizeof(buf), "%-30s  %10.3e  %10.1e   %s\n", e.name.c_str(),
                          e.max_rel_err, e.tolerance, e.pass ? "PASS" : "FAIL");
            out += buf;
        }
        return out;
    }
};

// Central finite differences vs reverse-mode gradients over every element of
// each tensor in `wrt`. rel err uses denominator max(1e-8, |fd|).
inline double fd_max_rel_error(const std::function<Tensor()>& loss_fn, std::vector<Tensor> wrt,
                               double step = 1e-5) {
    for (auto& t : wrt) {
        t.set_requires_grad(true);
        t.grad();
        t.zero_grad();
    }
    std::vector<std::vector<double>> autodiff;
    {
        Tape tape;
        Tensor loss = loss_fn();
        tape.backward(loss);
    }
    for (auto& t : wrt) autodiff.push_back(t.grad());

    double worst = 0.0;
    for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
        Tensor& t = wrt[ti];
        for (std::size_t i = 0; i < t.numel(); ++i) {
            double orig = t.data()[i];
            t.data()[i] = orig + step;
            double fp = loss_fn().data()[0];
            t.data()[i] = orig - step;
            double fm = loss_fn().data()[0];
            t.data()[i] = orig;
            double fd = (fp - fm) / (2.0 * step);
            double rel = std::abs(autodiff[ti][i] - fd) / std::max(1e-8, std::abs(fd));
            if (rel > worst) worst = rel;
        }
    }
    return worst;
}

inline GradCheckEntry gradcheck_case(const std::string& name, double tolerance,
                                     const std::function<Tensor()>& loss_fn,
                                     std::vector<Tensor> wrt, double step = 1e-5) {
    GradCheckEntry e;
    e.name = name;
    e.tolerance = tolerance;
    e.max_rel_err = fd_max_rel_error(loss_fn, std::move(wrt), step);
    e.pass = e.max_rel_err < tolerance;
    return e;
}

namespace detail {

inline std::function<Tensor()> weighted_sum(const std::function<Tensor()>& fwd, Rng& rng) {
    Tensor probe = fwd();
    Tensor c = Tensor::rand_uniform(rng, probe.shape(), -1.0, 1.0);
    return [fwd, c]() { return sum(mul(fwd(), c)); };
}

// Uniform samples kept clear of the spline knots so finite differences do
// not straddle a derivative kink.
inline Tensor away_from_knots(Rng& rng, const SplineGrid& grid, Shape shape, double margin) {
    Tensor t(shape);
    for (double& v : t.data()) {
        for (;;) {
            double x = rng.uniform(grid.lo * 0.95, grid.hi * 0.95);
            bool ok = true;
            for (double k : grid.knots)
                if (std::abs(x - k) < margin) ok = false;
            if (ok) {
                v = x;
                break;
            }
        }
    }
    return t;
}

inline std::vector<Tensor> store_tensors(ParameterStore& store) {
    std::vector<Tensor> out;
    for (auto& e : store.params()) out.push_back(e.tensor);
    return out;
}

}  // namespace detail

// Sampled end-to-end check: a handful of parameters per group against finite
// differences, plus the requirement that every group receives gradient.
inline GradCheckEntry gradcheck_network(double tolerance = 1e-3) {
    GradCheckEntry entry;
    entry.name = "network (end-to-end)";
    entry.tolerance = tolerance;

    NetworkConfig cfg = NetworkConfig::desk();
    UmanNetwork net(cfg, 99);
    Rng rng(1234);
    Tensor x = Tensor::rand_uniform(rng, {1, 3, 32, 32}, -1.0, 1.0);
    Tensor y(Shape{1, 1, 32, 32});
    for (double& v : y.data()) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
    auto loss_fn = [&]() { return total_loss(net.forward(x, true), y, cfg.loss); };

    net.store().zero_grad();
    {
        Tape tape;
        Tensor loss = loss_fn();
        tape.backward(loss);
    }

    // Every group must receive nonzero gradient mass.
    std::map<std::string, double> group_mass;
    for (auto& e : net.store().params()) {
        double acc = 0.0;
        if (e.tensor.has_grad())
            for (double g : e.tensor.grad()) acc += std::abs(g);
        group_mass[e.group] += acc;
    }
    for (const auto& [group, mass] : group_mass) {
        if (mass <= 0.0) {
            entry.max_rel_err = std::numeric_limits<double>::infinity();
            entry.pass = false;
            entry.name += " [group '" + group + "' got zero gradient]";
            return entry;
        }
    }

    // Sample a few parameters per group and compare against central FD.
    std::map<std::string, std::vector<std::pair<std::size_t, std::size_t>>> picks;
    for (std::size_t p = 0; p < net.store().params().size(); ++p) {
        auto& e = net.store().params()[p];
        auto& v = picks[e.group];
        if (v.size() < 3) v.emplace_back(p, rng.uniform_int(e.tensor.numel()));
    }
    double worst = 0.0;
    const double step = 1e-5;
    for (const auto& [group, list] : picks) {
        for (auto [p, i] : list) {
            Tensor t = net.store().params()[p].tensor;
            double ad = t.grad()[i];
            double orig = t.data()[i];
            t.data()[i] = orig + step;
            double fp = loss_fn().data()[0];
            t.data()[i] = orig - step;
            double fm = loss_fn().data()[0];
            t.data()[i] = orig;
            double fd = (fp - fm) / (2.0 * step);
            double rel = std::abs(ad - fd) / std::max(1e-8, std::abs(fd));
            if (rel > worst) worst = rel;
        }
    }
    entry.max_rel_err = worst;
    entry.pass = worst < tolerance;
    return entry;
}

// Finite-difference verification for every parameterized layer and loss.
// scope is a case name or "all".
inline GradCheckReport gradcheck(const std::string& scope = "all") {
    GradCheckReport report;
    std::vector<std::string> known;
    auto want = [&](const std::string& name) {
        known.push_back(name);
        return scope == "all" || scope == name;
    };

    Rng rng(20240817);

    if (want("linear")) {
        Tensor x = Tensor::rand_uniform(rng, {3, 4}, -1.0, 1.0);
        Tensor w = Tensor::rand_uniform(rng, {5, 4}, -1.0, 1.0);
        auto fwd = detail::weighted_sum([=]() { return linear(x, w); }, rng);
        report.entries.push_back(gradcheck_case("linear", 1e-8, fwd, {x, w}));
    }
    if (want("conv2d")) {
        Tensor x = Tensor::rand_uniform(rng, {2, 2, 5, 6}, -1.0, 1.0);
        Tensor w = Tensor::rand_uniform(rng, {3, 2, 3, 3}, -1.0, 1.0);
        Tensor b = Tensor::rand_uniform(rng, {3}, -0.5, 0.5);
        auto fwd = detail::weighted_sum([=]() { return conv2d(x, w, b, 1, 1); }, rng);
        report.entries.push_back(gradcheck_case("conv2d", 1e-4, fwd, {x, w, b}));
    }
    if (want("conv2d_stride2")) {
        Tensor x = Tensor::rand_uniform(rng, {1, 2, 6, 7}, -1.0, 1.0);
        Tensor w = Tensor::rand_uniform(rng, {2, 2, 3, 3}, -1.0, 1.0);
        Tensor b = Tensor::rand_uniform(rng, {2}, -0.5, 0.5);
        auto fwd = detail::weighted_sum([=]() { return conv2d(x, w, b, 2, 1); }, rng);
        report.entries.push_back(gradcheck_case("conv2d_stride2", 1e-4, fwd, {x, w, b}));
    }
    if (want("depthwise_conv2d")) {
        Tensor x = Tensor::rand_uniform(rng, {1, 3, 5, 5}, -1.0, 1.0);
        Tensor w = Tensor::rand_uniform(rng, {3, 1, 3, 3}, -1.0, 1.0);
        auto fwd = detail::weighted_sum([=]() { return depthwise_conv2d(x, w, 1, 1); }, rng);
        report.entries.push_back(gradcheck_case("depthwise_conv2d", 1e-4, fwd, {x, w}));
    }
    if (want("bilinear_upsample2x")) {
        Tensor x = Tensor::rand_uniform(rng, {1, 2, 3, 4}, -1.0, 1.0);
        auto fwd = detail::weighted_sum([=]() { return bilinear_upsample2x(x); }, rng);
        report.entries.push_back(gradcheck_case("bilinear_upsample2x", 1e-4, fwd, {x}));
    }
    if (want("max_pool2x")) {
        Tensor x = Tensor::rand_uniform(rng, {1, 2, 4, 6}, -1.0, 1.0);
        auto fwd = detail::weighted_sum([=]() { return max_pool2x(x); }, rng);
        report.entries.push_back(gradcheck_case("max_pool2x", 1e-4, fwd, {x}));
    }
    if (want("avg_pool_global")) {
        Tensor x = Tensor::rand_uniform(rng, {2, 3, 3, 3}, -1.0, 1.0);
        auto fwd = detail::weighted_sum([=]() { return avg_pool_global(x); }, rng);
        report.entries.push_back(gradcheck_case("avg_pool_global", 1e-4, fwd, {x}));
    }
    if (want("channel_pools")) {
        Tensor x = Tensor::rand_uniform(rng, {2, 3, 3, 4}, -1.0, 1.0);
        auto fwd = detail::weighted_sum(
            [=]() { return add(mean_channelwise(x), max_pool_channelwise(x)); }, rng);
        report.entries.push_back(gradcheck_case("channel_pools", 1e-4, fwd, {x}));
    }
    if (want("relu")) {
        Tensor x = Tensor::rand_uniform(rng, {4, 5}, 0.1, 1.5);
        for (std::size_t i = 0; i < x.numel(); i += 2) x.data()[i] = -x.data()[i];
        auto fwd = detail::weighted_sum([=]() { return relu(x); }, rng);
        report.entries.push_back(gradcheck_case("relu", 1e-4, fwd, {x}));
    }
    if (want("silu")) {
        Tensor x = Tensor::rand_uniform(rng, {4, 5}, -2.0, 2.0);
        auto fwd = detail::weighted_sum([=]() { return silu(x); }, rng);
        report.entries.push_back(gradcheck_case("silu", 1e-4, fwd, {x}));
    }
    if (want("sigmoid")) {
        Tensor x = Tensor::rand_uniform(rng, {4, 5}, -2.0, 2.0);
        auto fwd = detail::weighted_sum([=]() { return sigmoid(x); }, rng);
        report.entries.push_back(gradcheck_case("sigmoid", 1e-4, fwd, {x}));
    }
    if (want("concat_channels")) {
        Tensor a = Tensor::rand_uniform(rng, {1, 2, 3, 3}, -1.0, 1.0);
        Tensor b = Tensor::rand_uniform(rng, {1, 3, 3, 3}, -1.0, 1.0);
        auto fwd = detail::weighted_sum([=]() { return concat_channels(a, b); }, rng);
        report.entries.push_back(gradcheck_case("concat_channels", 1e-4, fwd, {a, b}));
    }
    if (want("layer_norm")) {
        Tensor x = Tensor::rand_uniform(rng, {4, 7}, -1.0, 1.0);
        Tensor gamma = Tensor::rand_uniform(rng, {7}, 0.5, 1.5);
        Tensor beta = Tensor::rand_uniform(rng, {7}, -0.5, 0.5);
        auto fwd = detail::weighted_sum([=]() { return layer_norm(x, gamma, beta); }, rng);
        report.entries.push_back(gradcheck_case("layer_norm", 1e-4, fwd, {x, gamma, beta}));
    }
    if (want("batch_norm_train") | want("batch_norm_eval")) {
        Tensor x = Tensor::rand_uniform(rng, {2, 3, 4, 4}, -1.0, 1.0);
        Tensor gamma = Tensor::rand_uniform(rng, {3}, 0.5, 1.5);
        Tensor beta = Tensor::rand_uniform(rng, {3}, -0.5, 0.5);
        Tensor rm = Tensor::rand_uniform(rng, {3}, -0.2, 0.2);
        Tensor rv = Tensor::rand_uniform(rng, {3}, 0.5, 1.5);
        if (scope == "all" || scope == "batch_norm_train") {
            Tensor rm2 = rm.clone(), rv2 = rv.clone();
            auto fwd = detail::weighted_sum(
                [=]() mutable { return batch_norm2d(x, gamma, beta, rm2, rv2, true); }, rng);
            report.entries.push_back(
                gradcheck_case("batch_norm_train", 1e-4, fwd, {x, gamma, beta}));
        }
        if (scope == "all" || scope == "batch_norm_eval") {
            auto fwd = detail::weighted_sum(
                [=]() mutable { return batch_norm2d(x, gamma, beta, rm, rv, false); }, rng);
            report.entries.push_back(
                gradcheck_case("batch_norm_eval", 1e-4, fwd, {x, gamma, beta}));
        }
    }
    if (want("bspline_basis")) {
        SplineGrid grid(5, 3);
        Tensor x = detail::away_from_knots(rng, grid, {6}, 1e-3);
        auto fwd = detail::weighted_sum([=]() { return bspline_basis(x, grid); }, rng);
        report.entries.push_back(gradcheck_case("bspline_basis", 1e-4, fwd, {x}));
    }
    if (want("kan_layer")) {
        SplineGrid grid(5, 3);
        Tensor x = detail::away_from_knots(rng, grid, {4, 3}, 1e-3);
        KanLayerParams p;
        p.base_weight = Tensor::rand_uniform(rng, {2, 3}, -1.0, 1.0);
        p.spline_weight = Tensor::rand_uniform(rng, {2, 3, grid.basis_count()}, -0.5, 0.5);
        p.spline_scaler = Tensor::rand_uniform(rng, {2, 3}, 0.5, 1.5);
        auto fwd = detail::weighted_sum([=]() { return KanLayer::forward_with(x, p, grid); }, rng);
        report.entries.push_back(gradcheck_case(
            "kan_layer", 1e-4, fwd, {x, p.base_weight, p.spline_weight, p.spline_scaler}));
    }
    if (want("kan_block")) {
        ParameterStore store;
        SplineGrid grid(5, 3);
        KanBlock block(store, "blk", rng, 4, grid, 0.0);
        Tensor x = Tensor::rand_uniform(rng, {2, 3, 4}, -0.8, 0.8);
        auto fwd = detail::weighted_sum([&block, x]() { return block.forward(x, false); }, rng);
        auto wrt = detail::store_tensors(store);
        wrt.push_back(x);
        report.entries.push_back(gradcheck_case("kan_block", 1e-4, fwd, wrt));
    }
    if (want("msab")) {
        ParameterStore store;
        MsabConfig mc;
        mc.kernel_sizes = {1, 3};
        mc.channels = 4;
        auto msab = std::make_shared<Msab>(store, "msab", rng, mc);
        Tensor x = Tensor::rand_uniform(rng, {1, 4, 6, 6}, -1.0, 1.0);
        auto fwd = detail::weighted_sum([msab, x]() { return msab->forward(x, true); }, rng);
        auto wrt = detail::store_tensors(store);
        wrt.push_back(x);
        report.entries.push_back(gradcheck_case("msab", 1e-4, fwd, wrt));
    }
    if (want("man_fusion")) {
        Tensor w1 = Tensor::scalar(0.7);
        Tensor w2 = Tensor::scalar(1.3);
        Tensor a = Tensor::rand_uniform(rng, {1, 2, 3, 3}, -1.0, 1.0);
        Tensor b = Tensor::rand_uniform(rng, {1, 2, 3, 3}, -1.0, 1.0);
        auto fwd = detail::weighted_sum([=]() { return man_fuse(w1, a, w2, b); }, rng);
        report.entries.push_back(gradcheck_case("man_fusion", 1e-4, fwd, {w1, w2, a, b}));
    }
    if (want("man_stage")) {
        ParameterStore store;
        SplineGrid grid(5, 3);
        auto stage = std::make_shared<ManStage>(store, "man", rng, 3, 4, 1, 2,
                                                std::vector<std::size_t>{1, 3}, grid, 0.0, true);
        Tensor x = Tensor::rand_uniform(rng, {1, 3, 8, 8}, -0.8, 0.8);
        auto fwd = detail::weighted_sum([stage, x]() { return stage->forward(x, true); }, rng);
        auto wrt = detail::store_tensors(store);
        wrt.push_back(x);
        report.entries.push_back(gradcheck_case("man_stage", 1e-4, fwd, wrt));
    }
    if (want("channel_attention")) {
        ParameterStore store;
        auto pagf = std::make_shared<Pagf>(store, "pagf", rng, 8);
        Tensor x = Tensor::rand_uniform(rng, {2, 8, 3, 3}, -1.0, 1.0);
        auto fwd =
            detail::weighted_sum([pagf, x]() { return pagf->channel_attention(x); }, rng);
        std::vector<Tensor> wrt;
        for (auto& e : store.params())
            if (e.name.find(".ca.") != std::string::npos) wrt.push_back(e.tensor);
        wrt.push_back(x);
        report.entries.push_back(gradcheck_case("channel_attention", 1e-4, fwd, wrt));
    }
    if (want("spatial_attention")) {
        ParameterStore store;
        auto pagf = std::make_shared<Pagf>(store, "pagf", rng, 4);
        Tensor x = Tensor::rand_uniform(rng, {1, 4, 5, 5}, -1.0, 1.0);
        auto fwd =
            detail::weighted_sum([pagf, x]() { return pagf->spatial_attention(x); }, rng);
        std::vector<Tensor> wrt;
        for (auto& e : store.params())
            if (e.name.find(".sa.") != std::string::npos) wrt.push_back(e.tensor);
        wrt.push_back(x);
        report.entries.push_back(gradcheck_case("spatial_attention", 1e-4, fwd, wrt));
    }
    if (want("pagf")) {
        ParameterStore store;
        auto pagf = std::make_shared<Pagf>(store, "pagf", rng, 4);
        Tensor xd = Tensor::rand_uniform(rng, {1, 4, 4, 4}, -1.0, 1.0);
        Tensor xe = Tensor::rand_uniform(rng, {1, 4, 4, 4}, -1.0, 1.0);
        auto fwd = detail::weighted_sum(
            [pagf, xd, xe]() { return pagf->forward(xd, xe, true); }, rng);
        auto wrt = detail::store_tensors(store);
        wrt.push_back(xd);
        wrt.push_back(xe);
        report.entries.push_back(gradcheck_case("pagf", 1e-4, fwd, wrt));
    }
    if (want("dice_loss") | want("bce_loss") | want("total_loss")) {
        Tensor logits = Tensor::rand_uniform(rng, {2, 1, 4, 4}, -2.0, 2.0);
        Tensor y(Shape{2, 1, 4, 4});
        for (double& v : y.data()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
        if (scope == "all" || scope == "dice_loss")
            report.entries.push_back(gradcheck_case(
                "dice_loss", 1e-4, [=]() { return dice_loss(logits, y); }, {logits}));
        if (scope == "all" || scope == "bce_loss")
            report.entries.push_back(gradcheck_case(
                "bce_loss", 1e-4, [=]() { return bce_loss(logits, y); }, {logits}));
        if (scope == "all" || scope == "total_loss") {
            LossConfig lc;
            report.entries.push_back(gradcheck_case(
                "total_loss", 1e-4, [=]() { return total_loss(logits, y, lc); }, {logits}));
        }
    }
    if (want("network")) report.entries.push_back(gradcheck_network());

    if (report.entries.empty()) {
        std::string msg = "gradcheck: unknown scope '" + scope + "'; valid scopes: all";
        for (const auto& n : known) msg += ", " + n;
        throw UsageError(msg);
    }
    return report;
}

}  // namespace uman
