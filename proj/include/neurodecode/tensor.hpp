#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "common.hpp"
#include "rng.hpp"

namespace nd {

namespace detail {

template <class S>
struct Storage {
    Shape shape;
    std::vector<S> v;  // values, row-major contiguous
    std::vector<S> g;  // gradient, empty until touched by backward
    bool requires_grad = false;
    bool leaf = true;  // false once produced by a recorded op

    void ensure_grad() {
        if (g.size() != v.size()) g.assign(v.size(), S(0));
    }
};

}  // namespace detail

template <class S>
class GradTapeT;

// Dense n-dimensional array of S (double by default across the project,
// float available for storage-light work). Copies are shallow: tensors
// are value handles onto shared storage. Ops never mutate their inputs;
// parameter updates go through v() deliberately.
template <class S>
class TensorT {
public:
    using Scalar = S;

    TensorT() = default;

    explicit TensorT(Shape shape, S fill = S(0), bool requires_grad = false)
        : s_(std::make_shared<detail::Storage<S>>()) {
        const i64 n = shape_numel(shape);
        s_->shape = std::move(shape);
        s_->v.assign(static_cast<size_t>(n), fill);
        s_->requires_grad = requires_grad;
    }

    static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }
    static TensorT ones(Shape shape) { return TensorT(std::move(shape), S(1)); }
    static TensorT full(Shape shape, S v) { return TensorT(std::move(shape), v); }
    static TensorT scalar(S v) { return TensorT(Shape{1}, v); }

    static TensorT from_data(Shape shape, std::vector<S> data) {
        ND_CHECK(shape_numel(shape) == static_cast<i64>(data.size()), DimensionError,
                 "from_data: shape " << shape_str(shape) << " does not match data length "
                                     << data.size());
        TensorT t;
        t.s_ = std::make_shared<detail::Storage<S>>();
        t.s_->shape = std::move(shape);
        t.s_->v = std::move(data);
        return t;
    }

    static TensorT randn(Shape shape, Rng& rng, double mean = 0.0, double sd = 1.0) {
        TensorT t(std::move(shape));
        for (auto& x : t.s_->v) x = static_cast<S>(rng.gauss(mean, sd));
        return t;
    }

    static TensorT uniform(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
        TensorT t(std::move(shape));
        for (auto& x : t.s_->v) x = static_cast<S>(rng.uniform(lo, hi));
        return t;
    }

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    int rank() const { return static_cast<int>(s_->shape.size()); }
    i64 numel() const { return static_cast<i64>(s_->v.size()); }
    i64 dim(int i) const { return s_->shape[static_cast<size_t>(i)]; }

    std::span<S> v() { return {s_->v.data(), s_->v.size()}; }
    std::span<const S> v() const { return {s_->v.data(), s_->v.size()}; }

    bool requires_grad() const { return s_->requires_grad; }
    TensorT& set_requires_grad(bool b) {
        s_->requires_grad = b;
        return *this;
    }
    bool is_leaf() const { return s_->leaf; }

    bool has_grad() const { return !s_->g.empty(); }
    std::span<S> g() {
        s_->ensure_grad();
        return {s_->g.data(), s_->g.size()};
    }
    std::span<const S> g() const {
        s_->ensure_grad();
        return {s_->g.data(), s_->g.size()};
    }
    void zero_grad() {
        if (!s_->g.empty()) std::fill(s_->g.begin(), s_->g.end(), S(0));
    }

    S item() const {
        ND_CHECK(numel() == 1, DimensionError, "item() on tensor of shape " << shape_str(shape()));
        return s_->v[0];
    }

    S& at(std::initializer_list<i64> idx) { return s_->v[static_cast<size_t>(offset(idx))]; }
    S at(std::initializer_list<i64> idx) const { return s_->v[static_cast<size_t>(offset(idx))]; }

    // Deep copy of values; detached from any graph.
    TensorT clone() const {
        TensorT t;
        t.s_ = std::make_shared<detail::Storage<S>>();
        t.s_->shape = s_->shape;
        t.s_->v = s_->v;
        return t;
    }

    bool all_finite() const {
        for (S x : s_->v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    std::shared_ptr<detail::Storage<S>> ptr() const { return s_; }
    void mark_nonleaf() { s_->leaf = false; }

private:
    i64 offset(std::initializer_list<i64> idx) const {
        ND_CHECK(static_cast<int>(idx.size()) == rank(), DimensionError,
                 "index rank " << idx.size() << " vs tensor rank " << rank());
        i64 off = 0;
        auto it = idx.begin();
        for (int d = 0; d < rank(); ++d, ++it) {
            off = off * s_->shape[static_cast<size_t>(d)] + *it;
        }
        return off;
    }

    std::shared_ptr<detail::Storage<S>> s_;
};

using Tensor = TensorT<double>;
using TensorF = TensorT<float>;

// Wengert-list reverse-mode tape. Ops append nodes in execution order,
// which is a topological order of the graph, so running the backward
// closures back-to-front visits each node exactly once in reverse
// topological order. A tape records only while installed via TapeScope.
template <class S>
class GradTapeT {
public:
    struct Node {
        const char* op;
        std::function<void()> backward;
    };

    void record(const char* op, std::function<void()> backward) {
        nodes_.push_back(Node{op, std::move(backward)});
    }

    // Leaf-parameter registry: grad-requiring leaves seen by recorded ops.
    void note_leaf(const TensorT<S>& t) {
        const void* key = t.ptr().get();
        for (const auto& l : leaves_)
            if (l.ptr().get() == key) return;
        leaves_.push_back(t);
    }

    const std::vector<TensorT<S>>& leaves() const { return leaves_; }
    size_t size() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss)=1 and runs the recorded closures in reverse.
    // The tape is consumed: a second backward needs a fresh forward pass.
    void backward(TensorT<S> loss) {
        ND_CHECK(loss.numel() == 1, DimensionError,
                 "backward expects a scalar loss, got shape " << shape_str(loss.shape()));
        ND_CHECK(std::isfinite(static_cast<double>(loss.item())), NumericError,
                 "backward on non-finite loss");
        loss.g()[0] += S(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
        nodes_.clear();
    }

    static GradTapeT*& active() {
        thread_local GradTapeT* t = nullptr;
        return t;
    }

private:
    std::vector<Node> nodes_;
    std::vector<TensorT<S>> leaves_;
};

template <class S>
struct TapeScopeT {
    explicit TapeScopeT(GradTapeT<S>& tape) : prev_(GradTapeT<S>::active()) {
        GradTapeT<S>::active() = &tape;
    }
    ~TapeScopeT() { GradTapeT<S>::active() = prev_; }
    TapeScopeT(const TapeScopeT&) = delete;
    TapeScopeT& operator=(const TapeScopeT&) = delete;

private:
    GradTapeT<S>* prev_;
};

using GradTape = GradTapeT<double>;
using TapeScope = TapeScopeT<double>;

}  // namespace nd
