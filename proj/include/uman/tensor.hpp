#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "uman/common.hpp"

namespace uman {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

struct TensorImpl {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until a backward pass touches it
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

// Dense N-D double tensor. Copies share storage (handle semantics, like the
// usual define-by-run frameworks); clone() gives an independent buffer.
class Tensor {
public:
    Tensor() : impl_(std::make_shared<TensorImpl>()) {}

    explicit Tensor(Shape shape, double fill = 0.0)
        : impl_(std::make_shared<TensorImpl>()) {
        // Zero-sized dims are allowed so degenerate cases (e.g. concat with
        // an empty tensor) behave as identities.
        impl_->shape = std::move(shape);
        impl_->value.assign(shape_numel(impl_->shape), fill);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }

    static Tensor from(Shape shape, std::vector<double> data) {
        Tensor t;
        if (shape_numel(shape) != data.size())
            throw ShapeError("Tensor::from: shape/data size mismatch");
        t.impl_->shape = std::move(shape);
        t.impl_->value = std::move(data);
        return t;
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    static Tensor randn(Rng& rng, Shape shape, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (double& v : t.data()) v = stddev * rng.normal();
        return t;
    }

    static Tensor rand_uniform(Rng& rng, Shape shape, double lo, double hi) {
        Tensor t(std::move(shape));
        for (double& v : t.data()) v = rng.uniform(lo, hi);
        return t;
    }

    const Shape& shape() const { return impl_->shape; }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->value.size(); }

    std::vector<double>& data() { return impl_->value; }
    const std::vector<double>& data() const { return impl_->value; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        impl_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::vector<double>& grad() {
        impl_->ensure_grad();
        return impl_->grad;
    }
    const std::vector<double>& grad() const {
        impl_->ensure_grad();
        return impl_->grad;
    }
    void zero_grad() {
        std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
    }

    // Element access for 1..4-D tensors (tests and reference loops).
    double& at(std::size_t i) { return impl_->value[i]; }
    double at(std::size_t i) const { return impl_->value[i]; }
    double& operator()(std::size_t i) { return impl_->value[offset({i})]; }
    double& operator()(std::size_t i, std::size_t j) { return impl_->value[offset({i, j})]; }
    double& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return impl_->value[offset({i, j, k})];
    }
    double& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
        return impl_->value[offset({i, j, k, l})];
    }
    double operator()(std::size_t i) const { return impl_->value[offset({i})]; }
    double operator()(std::size_t i, std::size_t j) const { return impl_->value[offset({i, j})]; }
    double operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return impl_->value[offset({i, j, k})];
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
        return impl_->value[offset({i, j, k, l})];
    }

    Tensor clone() const {
        Tensor t;
        t.impl_->shape = impl_->shape;
        t.impl_->value = impl_->value;
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    std::size_t offset(std::initializer_list<std::size_t> idx) const {
        if (idx.size() != impl_->shape.size())
            throw ShapeError("Tensor: index rank mismatch");
        std::size_t off = 0, k = 0;
        for (std::size_t i : idx) {
            off = off * impl_->shape[k] + i;
            ++k;
        }
        return off;
    }

    std::shared_ptr<TensorImpl> impl_;
};

// Wengert list recording one define-by-run forward pass. Ops append their
// backward rules in execution order, so the list is topologically sorted by
// construction; backward() replays it in reverse exactly once.
class Tape {
public:
    Tape() : prev_(current_ref()) { current_ref() = this; }
    ~Tape() { current_ref() = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() { return current_ref(); }

    struct OpRecord {
        const char* name;
        std::function<void()> backward;
    };

    void record(const char* name, std::function<void()> backward) {
        ops_.push_back(OpRecord{name, std::move(backward)});
    }

    std::size_t size() const { return ops_.size(); }

    void backward(const Tensor& loss) {
        if (loss.numel() != 1)
            throw UsageError("Tape::backward: loss must be a scalar");
        if (consumed_)
            throw UsageError("Tape::backward: tape already consumed; re-record the forward pass");
        consumed_ = true;
        loss.impl()->ensure_grad();
        loss.impl()->grad[0] = 1.0;
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->backward();
    }

private:
    static Tape*& current_ref() {
        thread_local Tape* tape = nullptr;
        return tape;
    }

    std::vector<OpRecord> ops_;
    bool consumed_ = false;
    Tape* prev_ = nullptr;
};

namespace detail {

inline bool recording(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::current()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

// Runtime NaN guard. Always on when NDEBUG is not defined; can be forced on
// at runtime to locate the first NaN-producing op after a non-finite loss.
struct NanGuard {
    static bool& enabled() {
        static bool on = false;
        return on;
    }
};

inline void check_finite(const char* op, const Tensor& t) {
#ifdef NDEBUG
    if (!NanGuard::enabled()) return;
#endif
    for (double v : t.data())
        if (!std::isfinite(v))
            throw NumericError(std::string("non-finite output in op '") + op + "'");
}

}  // namespace detail

// Convenience wrapper so callers can write backward(loss) as the spec-level
// entry point when the active tape recorded the pass.
inline void backward(const Tensor& loss) {
    if (!Tape::current()) throw UsageError("backward: no active tape");
    Tape::current()->backward(loss);
}

}  // namespace uman
