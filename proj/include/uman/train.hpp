#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "uman/config.hpp"
#include "uman/data.hpp"
#include "uman/loss.hpp"
#include "uman/network.hpp"

namespace uman {

// Adaptive-moment optimizer with per-group learning-rate multipliers.
class Adam {
public:
    explicit Adam(const OptimConfig& cfg) : cfg_(cfg) { cfg_.validate(); }

    void step(ParameterStore& store) {
        if (state_.size() != store.params().size()) {
            state_.clear();
            for (const auto& e : store.params())
                state_.push_back(Moments{std::vector<double>(e.tensor.numel(), 0.0),
                                         std::vector<double>(e.tensor.numel(), 0.0)});
        }
        ++t_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t p = 0; p < store.params().size(); ++p) {
            auto& e = store.params()[p];
            if (!e.tensor.has_grad())
                throw UsageError("adam: missing grad on parameter '" + e.name + "'");
            double lr = cfg_.base_lr * cfg_.multiplier(e.group);
            auto& m = state_[p].m;
            auto& v = state_[p].v;
            auto& theta = e.tensor.data();
            const auto& grad = e.tensor.grad();
            for (std::size_t i = 0; i < theta.size(); ++i) {
                double g = grad[i] + cfg_.weight_decay * theta[i];
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
                double mhat = m[i] / bc1;
                double vhat = v[i] / bc2;
                theta[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
            }
        }
    }

    std::size_t step_count() const { return t_; }

private:
    struct Moments {
        std::vector<double> m, v;
    };
    OptimConfig cfg_;
    std::vector<Moments> state_;
    std::size_t t_ = 0;
};

struct EvalMetrics {
    double loss = 0.0;
    double iou = 0.0;
    double f1 = 0.0;
};

struct TrainReport {
    std::vector<double> train_loss, val_loss, val_iou, val_f1;
    std::size_t epochs_run = 0;
    std::size_t best_epoch = 0;  // index into the series
    EvalMetrics final_metrics;   // from the saved best checkpoint
    std::vector<std::pair<std::string, std::string>> config_echo;

    // '#' comment lines carry the config echo and summary; then a header row
    // and one tab-separated row per epoch.
    std::string to_tsv() const {
        std::string out;
        for (const auto& [k, v] : config_echo) out += "# " + k + " = " + v + "\n";
        out += "# best_epoch = " + std::to_string(best_epoch) + "\n";
        out += "# final_loss = " + detail::fmt_double(final_metrics.loss) + "\n";
        out += "# final_iou = " + detail::fmt_double(final_metrics.iou) + "\n";
        out += "# final_f1 = " + detail::fmt_double(final_metrics.f1) + "\n";
        out += "epoch\ttrain_loss\tval_loss\tval_iou\tval_f1\n";
        for (std::size_t i = 0; i < epochs_run; ++i) {
            out += std::to_string(i) + "\t" + detail::fmt_double(train_loss[i]) + "\t" +
                   detail::fmt_double(val_loss[i]) + "\t" + detail::fmt_double(val_iou[i]) + "\t" +
                   detail::fmt_double(val_f1[i]) + "\n";
        }
        return out;
    }
};

struct TrainResult {
    TrainReport report;
    std::string checkpoint;  // serialized best-val-IoU checkpoint
};

namespace detail {

inline void stack_batch(const std::vector<SegmentationSample>& samples,
                        const std::vector<std::size_t>& order, std::size_t begin, std::size_t end,
                        bool augment_geometric, std::uint64_t aug_seed_base, Tensor& x, Tensor& y) {
    std::size_t b = end - begin;
    const auto& first = samples[order[begin]];
    std::size_t c = first.image.dim(0), h = first.image.dim(1), w = first.image.dim(2);
    x = Tensor({b, c, h, w});
    y = Tensor({b, 1, h, w});
    for (std::size_t i = 0; i < b; ++i) {
        std::size_t si = order[begin + i];
        const auto& s = samples[si];
        if (s.image.dim(1) != h || s.image.dim(2) != w)
            throw ShapeError("train: samples in a batch must share dimensions");
        SegmentationSample prepared =
            augment_geometric ? augment(s, aug_seed_base + si) : normalize(s);
        std::copy(prepared.image.data().begin(), prepared.image.data().end(),
                  x.data().begin() + i * c * h * w);
        std::copy(prepared.mask.data().begin(), prepared.mask.data().end(),
                  y.data().begin() + i * h * w);
    }
}

}  // namespace detail

// Mean loss/IoU/F1 over samples in eval mode (normalization only, no
// augmentation, no state mutation).
inline EvalMetrics evaluate_samples(UmanNetwork& net, const std::vector<SegmentationSample>& data) {
    if (net.config().num_classes != 1)
        throw UsageError("evaluate: binary metrics require num_classes == 1");
    if (data.empty()) throw UsageError("evaluate: empty sample set");
    EvalMetrics m;
    double tau = net.config().loss.threshold;
    for (const auto& s : data) {
        SegmentationSample prepared = normalize(s);
        std::size_t c = prepared.image.dim(0), h = prepared.image.dim(1), w = prepared.image.dim(2);
        Tensor x = reshape(prepared.image, {1, c, h, w});
        Tensor y = reshape(prepared.mask, {1, 1, h, w});
        Tensor logits = net.forward(x, false);
        m.loss += total_loss(logits, y, net.config().loss).data()[0];
        Tensor pred = binarize(logits, tau);
        m.iou += iou(pred, y);
        m.f1 += f1(pred, y);
    }
    double inv = 1.0 / static_cast<double>(data.size());
    m.loss *= inv;
    m.iou *= inv;
    m.f1 *= inv;
    return m;
}

inline EvalMetrics evaluate_checkpoint(const NetworkConfig& cfg, const std::string& path,
                                       const std::vector<SegmentationSample>& data) {
    UmanNetwork net(cfg, 0);
    load_checkpoint(net.store(), path);
    return evaluate_samples(net, data);
}

// Seeded training loop: per epoch shuffle, batch, forward, combined loss,
// backward, optimizer step, then a validation pass. Saves the best-val-IoU
// checkpoint and reloads it at the end, so the report's final metrics equal
// an evaluate() of the saved checkpoint bit for bit.
inline TrainResult train(const RunConfig& cfg, const std::vector<SegmentationSample>& train_set,
                         const std::vector<SegmentationSample>& val_set,
                         const std::function<void(std::size_t, const TrainReport&)>& progress = {}) {
    cfg.net.validate();
    cfg.optim.validate();
    if (train_set.empty() || val_set.empty()) throw UsageError("train: empty train or val set");

    UmanNetwork net(cfg.net, cfg.optim.seed);
    Adam adam(cfg.optim);
    Rng droppath_rng = Rng::derive(cfg.optim.seed, 0xD409);

    TrainResult result;
    TrainReport& report = result.report;
    report.config_echo = describe_config(cfg);

    double best_iou = -1.0;
    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
        Rng shuffle_rng = Rng::derive(cfg.optim.seed, 0xE0000000ull + epoch);
        for (std::size_t i = order.size(); i-- > 1;)
            std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);

        double epoch_loss = 0.0;
        std::uint64_t aug_base = (static_cast<std::uint64_t>(epoch) << 32) ^ (cfg.optim.seed << 1);
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.optim.batch_size) {
            std::size_t end = std::min(begin + cfg.optim.batch_size, order.size());
            Tensor x, y;
            detail::stack_batch(train_set, order, begin, end, cfg.optim.augment, aug_base, x, y);

            Tape tape;
            Tensor logits = net.forward(x, true, &droppath_rng);
            Tensor loss = total_loss(logits, y, cfg.net.loss);
            double lv = loss.data()[0];
            if (!std::isfinite(lv)) {
                // Re-run with the NaN guard armed to name the first bad op.
                detail::NanGuard::enabled() = true;
                std::string origin = "unidentified op";
                try {
                    Tensor relog = net.forward(x, true, &droppath_rng);
                    total_loss(relog, y, cfg.net.loss);
                } catch (const NumericError& e) {
                    origin = e.what();
                }
                detail::NanGuard::enabled() = false;
                throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                   " (" + origin + ")");
            }
            net.store().zero_grad();
            tape.backward(loss);
            adam.step(net.store());
            epoch_loss += lv * static_cast<double>(end - begin);
        }
        epoch_loss /= static_cast<double>(order.size());

        EvalMetrics val = evaluate_samples(net, val_set);
        report.train_loss.push_back(epoch_loss);
        report.val_loss.push_back(val.loss);
        report.val_iou.push_back(val.iou);
        report.val_f1.push_back(val.f1);
        ++report.epochs_run;
        if (val.iou > best_iou) {
            best_iou = val.iou;
            report.best_epoch = epoch;
            result.checkpoint = save_checkpoint_bytes(net.store());
        }
        if (progress) progress(epoch, report);
        if (cfg.optim.stop_train_loss > 0.0 && epoch_loss < cfg.optim.stop_train_loss) break;
    }

    // Final metrics come from the persisted best weights (f32-rounded), so a
    // later evaluate() of the saved file reproduces them exactly.
    load_checkpoint_bytes(net.store(), result.checkpoint);
    report.final_metrics = evaluate_samples(net, val_set);
    return result;
}

// ---------------------------------------------------------------------------
// Ablation runner
// ---------------------------------------------------------------------------

struct AblationRow {
    std::string name;
    double iou = 0.0;
    double f1 = 0.0;
};

struct AblationTable {
    std::string table;
    std::vector<AblationRow> rows;

    std::string to_text() const {
        std::size_t width = 12;
        for (const auto& r : rows) width = std::max(width, r.name.size());
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-*s  %8s  %8s\n", static_cast<int>(width),
                      "configuration", "IoU", "F1");
        std::string out = buf;
        out += std::string(width + 20, '-') + "\n";
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof(buf), "%-*s  %8.4f  %8.4f\n", static_cast<int>(width),
                          r.name.c_str(), r.iou, r.f1);
            out += buf;
        }
        return out;
    }

    std::string to_tsv() const {
        std::string out = "configuration\tiou\tf1\n";
        for (const auto& r : rows)
            out += r.name + "\t" + detail::fmt_double(r.iou) + "\t" + detail::fmt_double(r.f1) +
                   "\n";
        return out;
    }
};

// Per-table configuration variants. Every arm trains on the same seeded
// split of the same data, so differences are attributable to architecture.
inline std::vector<std::pair<std::string, RunConfig>> ablation_arms(const std::string& table,
                                                                    const RunConfig& base) {
    std::vector<std::pair<std::string, RunConfig>> arms;
    auto with = [&](const std::string& name, auto&& mutate) {
        RunConfig c = base;
        mutate(c);
        arms.emplace_back(name, std::move(c));
    };
    if (table == "overall") {
        with("Full", [](RunConfig&) {});
        with("w/o MSAB (KAN only)", [](RunConfig& c) { c.net.use_msab = false; });
        with("Simple Skip Connection",
             [](RunConfig& c) { c.net.pagf_mode = PagfMode::SimpleSkip; });
    } else if (table == "man") {
        with("w/o MSAB (KAN only)", [](RunConfig& c) { c.net.use_msab = false; });
        with("Single-scale (3x3)", [](RunConfig& c) { c.net.msab_kernels = {3}; });
        with("Multi-scale (1x1,3x3,5x5)", [](RunConfig& c) { c.net.msab_kernels = {1, 3, 5}; });
        with("1-layer KAN", [](RunConfig& c) { c.net.man_depths = {1, 1, 1}; });
        with("3-layer KAN", [](RunConfig& c) { c.net.man_depths = {3, 3, 3}; });
        with("5-layer KAN", [](RunConfig& c) { c.net.man_depths = {5, 5, 5}; });
    } else if (table == "pagf") {
        with("Simple Skip Connection",
             [](RunConfig& c) { c.net.pagf_mode = PagfMode::SimpleSkip; });
        with("w/o Channel Attention", [](RunConfig& c) { c.net.pagf_mode = PagfMode::NoChannel; });
        with("w/o Spatial Attention", [](RunConfig& c) { c.net.pagf_mode = PagfMode::NoSpatial; });
        with("w/o Gating Mechanism", [](RunConfig& c) { c.net.pagf_mode = PagfMode::NoGate; });
        with("Element-wise Addition", [](RunConfig& c) { c.net.pagf_mode = PagfMode::AddOnly; });
        with("Full PAGF", [](RunConfig& c) { c.net.pagf_mode = PagfMode::Full; });
    } else {
        throw UsageError("ablate: unknown table '" + table + "' (expected overall|man|pagf)");
    }
    return arms;
}

inline AblationTable ablate(const std::string& table, const RunConfig& base,
                            const std::vector<SegmentationSample>& data,
                            std::vector<TrainReport>* reports = nullptr) {
    auto [train_set, val_set] = split(data, 1.0 - base.optim.val_fraction, base.optim.seed);
    AblationTable out;
    out.table = table;
    for (auto& [name, cfg] : ablation_arms(table, base)) {
        TrainResult r = train(cfg, train_set, val_set);
        out.rows.push_back(AblationRow{name, r.report.final_metrics.iou, r.report.final_metrics.f1});
        if (reports) reports->push_back(std::move(r.report));
    }
    return out;
}

}  // namespace uman
