#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "tensor.hpp"

// Differentiable primitives over TensorT. Every op returns a fresh tensor,
// never mutates inputs, and registers a backward closure when a tape is
// active and some input requires grad. Elementwise binaries broadcast a
// one-element tensor against any shape; other broadcasts are dedicated ops
// (add_bias, bias_nchw, scale_shift_nchw).

namespace nd {

namespace detail {

template <class S>
bool grad_needed(std::initializer_list<const TensorT<S>*> ins) {
    auto* tape = GradTapeT<S>::active();
    if (!tape) return false;
    for (auto* t : ins)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

template <class S>
void mark_output(TensorT<S>& out, std::initializer_list<const TensorT<S>*> ins) {
    auto* tape = GradTapeT<S>::active();
    out.set_requires_grad(true);
    out.mark_nonleaf();
    for (auto* t : ins)
        if (t->defined() && t->requires_grad() && t->is_leaf()) tape->note_leaf(*t);
}

template <class S>
void check_same_shape(const char* op, const TensorT<S>& a, const TensorT<S>& b) {
    ND_CHECK(a.shape() == b.shape(), DimensionError,
             op << ": shape mismatch " << shape_str(a.shape()) << " vs " << shape_str(b.shape()));
}

template <class S, class Fwd, class Da, class Db>
TensorT<S> ew_binary(const char* name, const TensorT<S>& a, const TensorT<S>& b, Fwd fwd, Da da,
                     Db db) {
    const bool a_scalar = a.numel() == 1 && b.numel() > 1;
    const bool b_scalar = b.numel() == 1 && a.numel() > 1;
    if (!a_scalar && !b_scalar) check_same_shape(name, a, b);
    const TensorT<S>& lead = a_scalar ? b : a;
    TensorT<S> out(lead.shape());
    auto av = a.v(), bv = b.v();
    auto ov = out.v();
    const i64 n = lead.numel();
    for (i64 i = 0; i < n; ++i) {
        const S x = av[a_scalar ? 0 : i];
        const S y = bv[b_scalar ? 0 : i];
        ov[i] = fwd(x, y);
    }
    if (grad_needed<S>({&a, &b})) {
        mark_output(out, {&a, &b});
        auto as = a.ptr(), bs = b.ptr(), os = out.ptr();
        GradTapeT<S>::active()->record(name, [as, bs, os, a_scalar, b_scalar, da, db, n] {
            if (os->g.empty()) return;
            if (as->requires_grad) {
                as->ensure_grad();
                for (i64 i = 0; i < n; ++i) {
                    const S x = as->v[a_scalar ? 0 : i];
                    const S y = bs->v[b_scalar ? 0 : i];
                    as->g[a_scalar ? 0 : i] += da(os->g[i], x, y, os->v[i]);
                }
            }
            if (bs->requires_grad) {
                bs->ensure_grad();
                for (i64 i = 0; i < n; ++i) {
                    const S x = as->v[a_scalar ? 0 : i];
                    const S y = bs->v[b_scalar ? 0 : i];
                    bs->g[b_scalar ? 0 : i] += db(os->g[i], x, y, os->v[i]);
                }
            }
        });
    }
    return out;
}

template <class S, class Fwd, class Dx>
TensorT<S> ew_unary(const char* name, const TensorT<S>& x, Fwd fwd, Dx dx) {
    TensorT<S> out(x.shape());
    auto xv = x.v();
    auto ov = out.v();
    const i64 n = x.numel();
    for (i64 i = 0; i < n; ++i) ov[i] = fwd(xv[i]);
    if (grad_needed<S>({&x})) {
        mark_output(out, {&x});
        auto xs = x.ptr(), os = out.ptr();
        GradTapeT<S>::active()->record(name, [xs, os, dx, n] {
            if (os->g.empty()) return;
            xs->ensure_grad();
            for (i64 i = 0; i < n; ++i) xs->g[i] += dx(os->g[i], xs->v[i], os->v[i]);
        });
    }
    return out;
}

template <class S>
void check_finite(const char* op, const TensorT<S>& t) {
    ND_CHECK(t.all_finite(), NumericError, op << ": non-finite result");
}

}  // namespace detail

// ---------------------------------------------------------------- binary

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::ew_binary<S>(
        "add", a, b, [](S x, S y) { return x + y; }, [](S go, S, S, S) { return go; },
        [](S go, S, S, S) { return go; });
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::ew_binary<S>(
        "sub", a, b, [](S x, S y) { return x - y; }, [](S go, S, S, S) { return go; },
        [](S go, S, S, S) { return -go; });
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::ew_binary<S>(
        "mul", a, b, [](S x, S y) { return x * y; }, [](S go, S, S y, S) { return go * y; },
        [](S go, S x, S, S) { return go * x; });
}

template <class S>
TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b) {
    for (S y : b.v())
        ND_CHECK(y != S(0), NumericError, "div: division by zero");
    return detail::ew_binary<S>(
        "div", a, b, [](S x, S y) { return x / y; }, [](S go, S, S y, S) { return go / y; },
        [](S go, S x, S y, S) { return -go * x / (y * y); });
}

// ----------------------------------------------------------------- unary

template <class S>
TensorT<S> neg(const TensorT<S>& x) {
    return detail::ew_unary<S>(
        "neg", x, [](S v) { return -v; }, [](S go, S, S) { return -go; });
}

template <class S>
TensorT<S> add_scalar(const TensorT<S>& x, S c) {
    return detail::ew_unary<S>(
        "add_scalar", x, [c](S v) { return v + c; }, [](S go, S, S) { return go; });
}

template <class S>
TensorT<S> mul_scalar(const TensorT<S>& x, S c) {
    return detail::ew_unary<S>(
        "mul_scalar", x, [c](S v) { return v * c; }, [c](S go, S, S) { return go * c; });
}

template <class S>
TensorT<S> relu(const TensorT<S>& x) {
    return detail::ew_unary<S>(
        "relu", x, [](S v) { return v > S(0) ? v : S(0); },
        [](S go, S xv, S) { return xv > S(0) ? go : S(0); });
}

template <class S>
TensorT<S> sigmoid(const TensorT<S>& x) {
    return detail::ew_unary<S>(
        "sigmoid", x,
        [](S v) {
            return v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                             : std::exp(v) / (S(1) + std::exp(v));
        },
        [](S go, S, S y) { return go * y * (S(1) - y); });
}

template <class S>
TensorT<S> tanh(const TensorT<S>& x) {
    return detail::ew_unary<S>(
        "tanh", x, [](S v) { return std::tanh(v); },
        [](S go, S, S y) { return go * (S(1) - y * y); });
}

template <class S>
TensorT<S> exp(const TensorT<S>& x) {
    auto out = detail::ew_unary<S>(
        "exp", x, [](S v) { return std::exp(v); }, [](S go, S, S y) { return go * y; });
    detail::check_finite("exp", out);
    return out;
}

template <class S>
TensorT<S> log(const TensorT<S>& x) {
    for (S v : x.v())
        ND_CHECK(v > S(0), NumericError, "log: non-positive input");
    return detail::ew_unary<S>(
        "log", x, [](S v) { return std::log(v); }, [](S go, S xv, S) { return go / xv; });
}

template <class S>
TensorT<S> sqrt(const TensorT<S>& x) {
    for (S v : x.v())
        ND_CHECK(v >= S(0), NumericError, "sqrt: negative input");
    return detail::ew_unary<S>(
        "sqrt", x, [](S v) { return std::sqrt(v); },
        [](S go, S, S y) { return y > S(0) ? go / (S(2) * y) : S(0); });
}

template <class S>
TensorT<S> abs(const TensorT<S>& x) {
    return detail::ew_unary<S>(
        "abs", x, [](S v) { return std::abs(v); },
        [](S go, S xv, S) { return xv > S(0) ? go : (xv < S(0) ? -go : S(0)); });
}

template <class S>
TensorT<S> square(const TensorT<S>& x) {
    return detail::ew_unary<S>(
        "square", x, [](S v) { return v * v; }, [](S go, S xv, S) { return S(2) * go * xv; });
}

// Hard clamp; zero gradient outside [lo, hi].
template <class S>
TensorT<S> clamp(const TensorT<S>& x, S lo, S hi) {
    return detail::ew_unary<S>(
        "clamp", x, [lo, hi](S v) { return std::min(hi, std::max(lo, v)); },
        [lo, hi](S go, S xv, S) { return (xv >= lo && xv <= hi) ? go : S(0); });
}

// ---------------------------------------------------------------- matmul

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    ND_CHECK(a.rank() == 2 && b.rank() == 2, DimensionError,
             "matmul: expects rank-2 tensors, got " << shape_str(a.shape()) << " and "
                                                    << shape_str(b.shape()));
    const i64 m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    ND_CHECK(k == k2, DimensionError,
             "matmul: inner dimensions differ, " << shape_str(a.shape()) << " vs "
                                                 << shape_str(b.shape()));
    TensorT<S> out(Shape{m, n});
    {
        auto av = a.v(), bv = b.v();
        auto ov = out.v();
        for (i64 i = 0; i < m; ++i) {
            S* orow = ov.data() + i * n;
            const S* arow = av.data() + i * k;
            for (i64 p = 0; p < k; ++p) {
                const S aik = arow[p];
                if (aik == S(0)) continue;
                const S* brow = bv.data() + p * n;
                for (i64 j = 0; j < n; ++j) orow[j] += aik * brow[j];
            }
        }
    }
    if (detail::grad_needed<S>({&a, &b})) {
        detail::mark_output(out, {&a, &b});
        auto as = a.ptr(), bs = b.ptr(), os = out.ptr();
        GradTapeT<S>::active()->record("matmul", [as, bs, os, m, k, n] {
            if (os->g.empty()) return;
            const S* go = os->g.data();
            if (as->requires_grad) {
                as->ensure_grad();
                // dA = dC * B^T
                for (i64 i = 0; i < m; ++i) {
                    S* garow = as->g.data() + i * k;
                    const S* grow = go + i * n;
                    for (i64 p = 0; p < k; ++p) {
                        const S* brow = bs->v.data() + p * n;
                        S acc = S(0);
                        for (i64 j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        garow[p] += acc;
                    }
                }
            }
            if (bs->requires_grad) {
                bs->ensure_grad();
                // dB = A^T * dC
                for (i64 i = 0; i < m; ++i) {
                    const S* arow = as->v.data() + i * k;
                    const S* grow = go + i * n;
                    for (i64 p = 0; p < k; ++p) {
                        const S aik = arow[p];
                        if (aik == S(0)) continue;
                        S* gbrow = bs->g.data() + p * n;
                        for (i64 j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
                    }
                }
            }
        });
    }
    return out;
}

// y = x + b with x:[N,D], b:[D]
template <class S>
TensorT<S> add_bias(const TensorT<S>& x, const TensorT<S>& b) {
    ND_CHECK(x.rank() == 2 && b.rank() == 1 && x.dim(1) == b.dim(0), DimensionError,
             "add_bias: incompatible shapes " << shape_str(x.shape()) << " and "
                                              << shape_str(b.shape()));
    const i64 rows = x.dim(0), d = x.dim(1);
    TensorT<S> out(x.shape());
    auto xv = x.v(), bv = b.v();
    auto ov = out.v();
    for (i64 i = 0; i < rows; ++i)
        for (i64 j = 0; j < d; ++j) ov[i * d + j] = xv[i * d + j] + bv[j];
    if (detail::grad_needed<S>({&x, &b})) {
        detail::mark_output(out, {&x, &b});
        auto xs = x.ptr(), bs = b.ptr(), os = out.ptr();
        GradTapeT<S>::active()->record("add_bias", [xs, bs, os, rows, d] {
            if (os->g.empty()) return;
            if (xs->requires_grad) {
                xs->ensure_grad();
                for (size_t i = 0; i < os->g.size(); ++i) xs->g[i] += os->g[i];
            }
            if (bs->requires_grad) {
                bs->ensure_grad();
                for (i64 i = 0; i < rows; ++i)
                    for (i64 j = 0; j < d; ++j) bs->g[j] += os->g[i * d + j];
            }
        });
    }
    return out;
}

// y = x*W + b convenience
template <class S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b) {
    return add_bias(matmul(x, w), b);
}

// y = x * s where s is a one-element tensor (possibly learnable)
template <class S>
TensorT<S> mul_scalar_t(const TensorT<S>& x, const TensorT<S>& s) {
    ND_CHECK(s.numel() == 1, DimensionError, "mul_scalar_t: scale must have one element");
    return mul(x, s);
}

// --------------------------------------------------------- shape movement

template <class S>
TensorT<S> reshape(const TensorT<S>& x, Shape new_shape) {
    ND_CHECK(shape_numel(new_shape) == x.numel(), DimensionError,
             "reshape: cannot view " << shape_str(x.shape()) << " as " << shape_str(new_shape));
    TensorT<S> out = TensorT<S>::from_data(std::move(new_shape),
                                           std::vector<S>(x.v().begin(), x.v().end()));
    if (detail::grad_needed<S>({&x})) {
        detail::mark_output(out, {&x});
        auto xs = x.ptr(), os = out.ptr();
        GradTapeT<S>::active()->record("reshape", [xs, os] {
            if (os->g.empty()) return;
            xs->ensure_grad();
            for (size_t i = 0; i < os->g.size(); ++i) xs->g[i] += os->g[i];
        });
    }
    return out;
}

namespace detail {
inline std::vector<i64> row_major_strides(const Shape& s) {
    std::vector<i64> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}
}  // namespace detail

template <class S>
TensorT<S> permute(const TensorT<S>& x, const std::vector<int>& perm) {
    const int r = x.rank();
    ND_CHECK(static_cast<int>(perm.size()) == r, DimensionError, "permute: rank mismatch");
    Shape new_shape(perm.size());
    for (int i = 0; i < r; ++i) new_shape[i] = x.dim(perm[i]);
    TensorT<S> out(new_shape);
    const auto in_st = detail::row_major_strides(x.shape());
    const auto out_st = detail::row_major_strides(new_shape);
    // map: linear index in output -> linear index in input
    std::vector<i64> map(static_cast<size_t>(x.numel()));
    auto xv = x.v();
    auto ov = out.v();
    const i64 n = x.numel();
    for (i64 o = 0; o < n; ++o) {
        i64 rem = o, src = 0;
        for (int d = 0; d < r; ++d) {
            const i64 idx = rem / out_st[d];
            rem %= out_st[d];
            src += idx * in_st[perm[d]];
        }
        map[o] = src;
        ov[o] = xv[src];
    }
    if (detail::grad_needed<S>({&x})) {
        detail::mark_output(out, {&x});
        auto xs = x.ptr(), os = out.ptr();
        GradTapeT<S>::active()->record("permute", [xs, os, map = std::move(map)] {
            if (os->g.empty()) return;
            xs->ensure_grad();
            for (size_t o = 0; o < map.size(); ++o) xs->g[map[o]] += os->g[o];
        });
    }
    return out;
}

template <class S>
TensorT<S> transpose2d(const TensorT<S>& x) {
    ND_CHECK(x.rank() == 2, DimensionError, "transpose2d: expects rank-2");
    return permute(x, {1, 0});
}

template <class S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts, int axis) {
    ND_CHECK(!parts.empty(), DimensionError, "concat: empty input list");
    const int r = parts[0].rank();
    ND_CHECK(axis >= 0 && axis < r, DimensionError, "concat: axis out of range");
    Shape out_shape = parts[0].shape();
    i64 axis_total = 0;
    for (const auto& p : parts) {
        ND_CHECK(p.rank() == r, DimensionError, "concat: rank mismatch");
        for (int d = 0; d < r; ++d)
            if (d != axis)
                ND_CHECK(p.dim(d) == out_shape[d], DimensionError,
                         "concat: shape mismatch off-axis: " << shape_str(p.shape()));
        axis_total += p.dim(axis);
    }
    out_shape[axis] = axis_total;
    TensorT<S> out(out_shape);
    i64 outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= out_shape[d];
    for (int d = axis + 1; d < r; ++d) inner *= out_shape[d];
    auto ov = out.v();
    i64 axis_off = 0;
    for (const auto& p : parts) {
        const i64 ax = p.dim(axis);
        auto pv = p.v();
        for (i64 o = 0; o < outer; ++o) {
            const S* src = pv.data() + o * ax * inner;
            S* dst = ov.data() + (o * axis_total + axis_off) * inner;
            std::copy(src, src + ax * inner, dst);
        }
        axis_off += ax;
    }
    bool need = false;
    for (const auto& p : parts) need = need || (GradTapeT<S>::active() && p.requires_grad());
    if (need) {
        auto* tape = GradTapeT<S>::active();
        out.set_requires_grad(true);
        out.mark_nonleaf();
        std::vector<std::shared_ptr<detail::Storage<S>>> srcs;
        std::vector<i64> offs;
        i64 off = 0;
        for (const auto& p : parts) {
            if (p.requires_grad() && p.is_leaf()) tape->note_leaf(p);
            srcs.push_back(p.ptr());
            offs.push_back(off);
            off += p.dim(axis);
        }
        auto os = out.ptr();
        tape->record("concat", [srcs, offs, os, outer, inner, axis_total, axis] {
            if (os->g.empty()) return;
            for (size_t pi = 0; pi < srcs.size(); ++pi) {
                auto& sp = srcs[pi];
                if (!sp->requires_grad) continue;
                sp->ensure_grad();
                const i64 ax = sp->shape[static_cast<size_t>(axis)];
                for (i64 o = 0; o < outer; ++o) {
                    const S* gsrc = os->g.data() + (o * axis_total + offs[pi]) * inner;
                    S* gdst = sp->g.data() + o * ax * inner;
                    for (i64 t = 0; t < ax * inner; ++t) gdst[t] += gsrc[t];
                }
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> slice(const TensorT<S>& x, int axis, i64 start, i64 len) {
    const int r = x.rank();
    ND_CHECK(axis >= 0 && axis < r, DimensionError, "slice: axis out of range");
    ND_CHECK(start >= 0 && len > 0 && start + len <= x.dim(axis), DimensionError,
             "slice: range [" << start << "," << start + len << ") out of bounds for axis size "
                              << x.dim(axis));
    Shape out_shape = x.shape();
    out_shape[axis] = len;
    TensorT<S> out(out_shape);
    i64 outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= x.dim(d);
    for (int d = axis + 1; d < r; ++d) inner *= x.dim(d);
    const i64 ax = x.dim(axis);
    auto xv = x.v();
    auto ov = out.v();
    for (i64 o = 0; o < outer; ++o) {
        const S* src = xv.data() + (o * ax + start) * inner;
        std::copy(src, src + len * inner, ov.data() + o * len * inner);
    }
    if (detail::grad_needed<S>({&x})) {
        detail::mark_output(out, {&x});
        auto xs = x.ptr(), os = out.ptr();
        GradTapeT<S>::active()->record("slice", [xs, os, outer, inner, ax, start, len] {
            if (os->g.empty()) return;
            xs->ensure_grad();
            for (i64 o = 0; o < outer; ++o) {
                const S* gsrc = os->g.data() + o * len * inner;
                S* gdst = xs->g.data() + (o * ax + start) * inner;
                for (i64 t = 0; t < len * inner; ++t) gdst[t] += gsrc[t];
            }
        });
    }
    return out;
}

// ------------------------------------------------------------- reductions

template <class S>
TensorT<S> sum_all(const TensorT<S>& x) {
    TensorT<S> out(Shape{1});
    S acc = S(0);
    for (S v : x.v()) acc += v;
    out.v()[0] = acc;
    if (detail::grad_needed<S>({&x})) {
        detail::mark_output(out, {&x});
        auto xs = x.ptr(), os = out.ptr();
        GradTapeT<S>::active()->record("sum_all", [xs, os] {
            if (os->g.empty()) return;
            xs->ensure_grad();
            const S g = os->g[0];
            for (auto& gx : xs->g) gx += g;
        });
    }
    return out;
}

template <class S>
TensorT<S> mean_all(const TensorT<S>& x) {
    const S inv = S(1) / static_cast<S>(x.numel());
    return mul_scalar(sum_all(x), inv);
}

// axis reduction over rank-2 inputs; axis=0 sums rows away -> [D],
// axis=1 sums columns away -> [N]
template <class S>
TensorT<S> sum_axis(const TensorT<S>& x, int axis) {
    ND_CHECK(x.rank() == 2, DimensionError, "sum_axis: expects rank-2");
    ND_CHECK(axis == 0 || axis == 1, DimensionError, "sum_axis: axis must be 0 or 1");
    const i64 rows = x.dim(0), cols = x.dim(1);
    TensorT<S> out(Shape{axis == 0 ? cols : rows});
    auto xv = x.v();
    auto ov = out.v();
    for (i64 i = 0; i < rows; ++i)
        for (i64 j = 0; j < cols; ++j) ov[axis == 0 ? j : i] += xv[i * cols + j];
    if (detail::grad_needed<S>({&x})) {
        detail::mark_output(out, {&x});
        auto xs = x.ptr(), os = out.ptr();
        GradTapeT<S>::active()->record("sum_axis", [xs, os, rows, cols, axis] {
            if (os->g.empty()) return;
            xs->ensure_grad();
            for (i64 i = 0; i < rows; ++i)
                for (i64 j = 0; j < cols; ++j)
                    xs->g[i * cols + j] += os->g[axis == 0 ? j : i];
        });
    }
    return out;
}

template <class S>
TensorT<S> mean_axis(const TensorT<S>& x, int axis) {
    const S inv = S(1) / static_cast<S>(axis == 0 ? x.dim(0) : x.dim(1));
    return mul_scalar(sum_axis(x, axis), inv);
}

// ------------------------------------------------------------ activations

// softmax over the last axis, stabilized by the per-row maximum
template <class S>
TensorT<S> softmax(const TensorT<S>& x) {
    ND_CHECK(x.rank() >= 1, DimensionError, "softmax: needs rank >= 1");
    const i64 d = x.dim(x.rank() - 1);
    ND_CHECK(d > 0, DimensionError, "softmax: empty axis");
    const i64 rows = x.numel() / d;
    TensorT<S> out(x.shape());
    auto xv = x.v();
    auto ov = out.v();
    for (i64 r = 0; r < rows; ++r) {
        const S* px = xv.data() + r * d;
        S* po = ov.data() + r * d;
        S mx = px[0];
        for (i64 j = 1; j < d; ++j) mx = std::max(mx, px[j]);
        S sum = S(0);
        for (i64 j = 0; j < d; ++j) {
            po[j] = std::exp(px[j] - mx);
            sum += po[j];
        }
        for (i64 j = 0; j < d; ++j) po[j] /= sum;
    }
    if (detail::grad_needed<S>({&x})) {
        detail::mark_output(out, {&x});
        auto xs = x.ptr(), os = out.ptr();
        GradTapeT<S>::active()->record("softmax", [xs, os, rows, d] {
            if (os->g.empty()) return;
            xs->ensure_grad();
            for (i64 r = 0; r < rows; ++r) {
                const S* y = os->v.data() + r * d;
                const S* gy = os->g.data() + r * d;
                S dot = S(0);
                for (i64 j = 0; j < d; ++j) dot += gy[j] * y[j];
                S* gx = xs->g.data() + r * d;
                for (i64 j = 0; j < d; ++j) gx[j] += y[j] * (gy[j] - dot);
            }
        });
    }
    return out;
}

// logsumexp over the last axis; output drops that axis (rank-1 -> [1])
template <class S>
TensorT<S> logsumexp(const TensorT<S>& x) {
    ND_CHECK(x.rank() >= 1, DimensionError, "logsumexp: needs rank >= 1");
    const i64 d = x.dim(x.rank() - 1);
    const i64 rows = x.numel() / d;
    Shape out_shape(x.shape().begin(), x.shape().end() - 1);
    if (out_shape.empty()) out_shape = {1};
    TensorT<S> out(out_shape);
    auto xv = x.v();
    auto ov = out.v();
    for (i64 r = 0; r < rows; ++r) {
        const S* px = xv.data() + r * d;
        S mx = px[0];
        for (i64 j = 1; j < d; ++j) mx = std::max(mx, px[j]);
        S sum = S(0);
        for (i64 j = 0; j < d; ++j) sum += std::exp(px[j] - mx);
        ov[r] = mx + std::log(sum);
    }
    if (detail::grad_needed<S>({&x})) {
        detail::mark_output(out, {&x});
        auto xs = x.ptr(), os = out.ptr();
        GradTapeT<S>::active()->record("logsumexp", [xs, os, rows, d] {
            if (os->g.empty()) return;
            xs->ensure_grad();
            for (i64 r = 0; r < rows; ++r) {
                const S go = os->g[r];
                if (go == S(0)) continue;
                const S lse = os->v[r];
                const S* px = xs->v.data() + r * d;
                S* gx = xs->g.data() + r * d;
                for (i64 j = 0; j < d; ++j) gx[j] += go * std::exp(px[j] - lse);
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> take_diag(const TensorT<S>& x) {
    ND_CHECK(x.rank() == 2 && x.dim(0) == x.dim(1), DimensionError,
             "take_diag: expects a square matrix, got " << shape_str(x.shape()));
    const i64 n = x.dim(0);
    TensorT<S> out(Shape{n});
    for (i64 i = 0; i < n; ++i) out.v()[i] = x.v()[i * n + i];
    if (detail::grad_needed<S>({&x})) {
        detail::mark_output(out, {&x});
        auto xs = x.ptr(), os = out.ptr();
        GradTapeT<S>::active()->record("take_diag", [xs, os, n] {
            if (os->g.empty()) return;
            xs->ensure_grad();
            for (i64 i = 0; i < n; ++i) xs->g[i * n + i] += os->g[i];
        });
    }
    return out;
}

// Row-wise L2 normalization of [N,D]; rows shorter than eps are scaled by 1/eps.
template <class S>
TensorT<S> l2_normalize_rows(const TensorT<S>& x, S eps = S(1e-12)) {
    ND_CHECK(x.rank() == 2, DimensionError, "l2_normalize_rows: expects rank-2");
    const i64 rows = x.dim(0), d = x.dim(1);
    TensorT<S> out(x.shape());
    std::vector<S> norms(static_cast<size_t>(rows));
    auto xv = x.v();
    auto ov = out.v();
    for (i64 r = 0; r < rows; ++r) {
        S s = S(0);
        for (i64 j = 0; j < d; ++j) s += xv[r * d + j] * xv[r * d + j];
        const S nrm = std::max(std::sqrt(s), eps);
        norms[static_cast<size_t>(r)] = nrm;
        for (i64 j = 0; j < d; ++j) ov[r * d + j] = xv[r * d + j] / nrm;
    }
    if (detail::grad_needed<S>({&x})) {
        detail::mark_output(out, {&x});
        auto xs = x.ptr(), os = out.ptr();
        GradTapeT<S>::active()->record("l2_normalize_rows",
                                       [xs, os, rows, d, norms = std::move(norms)] {
            if (os->g.empty()) return;
            xs->ensure_grad();
            for (i64 r = 0; r < rows; ++r) {
                const S nrm = norms[static_cast<size_t>(r)];
                const S* y = os->v.data() + r * d;
                const S* gy = os->g.data() + r * d;
                S dot = S(0);
                for (i64 j = 0; j < d; ++j) dot += gy[j] * y[j];
                S* gx = xs->g.data() + r * d;
                for (i64 j = 0; j < d; ++j) gx[j] += (gy[j] - y[j] * dot) / nrm;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------- normalization

// Layer normalization over the last axis with affine parameters.
template <class S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                      S eps = S(1e-5)) {
    const i64 d = x.dim(x.rank() - 1);
    ND_CHECK(gamma.numel() == d && beta.numel() == d, DimensionError,
             "layer_norm: affine params must have length " << d);
    const i64 rows = x.numel() / d;
    TensorT<S> out(x.shape());
    std::vector<S> inv_sd(static_cast<size_t>(rows));
    std::vector<S> xhat(static_cast<size_t>(x.numel()));
    auto xv = x.v();
    auto gv = gamma.v();
    auto bv = beta.v();
    auto ov = out.v();
    for (i64 r = 0; r < rows; ++r) {
        const S* px = xv.data() + r * d;
        S mean = S(0);
        for (i64 j = 0; j < d; ++j) mean += px[j];
        mean /= static_cast<S>(d);
        S var = S(0);
        for (i64 j = 0; j < d; ++j) var += (px[j] - mean) * (px[j] - mean);
        var /= static_cast<S>(d);
        const S is = S(1) / std::sqrt(var + eps);
        inv_sd[static_cast<size_t>(r)] = is;
        for (i64 j = 0; j < d; ++j) {
            const S xh = (px[j] - mean) * is;
            xhat[static_cast<size_t>(r * d + j)] = xh;
            ov[r * d + j] = xh * gv[j] + bv[j];
        }
    }
    if (detail::grad_needed<S>({&x, &gamma, &beta})) {
        detail::mark_output(out, {&x, &gamma, &beta});
        auto xs = x.ptr(), gs = gamma.ptr(), bs = beta.ptr(), os = out.ptr();
        GradTapeT<S>::active()->record(
            "layer_norm",
            [xs, gs, bs, os, rows, d, inv_sd = std::move(inv_sd), xhat = std::move(xhat)] {
                if (os->g.empty()) return;
                const S* go = os->g.data();
                if (gs->requires_grad) {
                    gs->ensure_grad();
                    for (i64 r = 0; r < rows; ++r)
                        for (i64 j = 0; j < d; ++j)
                            gs->g[j] += go[r * d + j] * xhat[static_cast<size_t>(r * d + j)];
                }
                if (bs->requires_grad) {
                    bs->ensure_grad();
                    for (i64 r = 0; r < rows; ++r)
                        for (i64 j = 0; j < d; ++j) bs->g[j] += go[r * d + j];
                }
                if (xs->requires_grad) {
                    xs->ensure_grad();
                    for (i64 r = 0; r < rows; ++r) {
                        const S is = inv_sd[static_cast<size_t>(r)];
                        const S* xh = xhat.data() + r * d;
                        S sum_g = S(0), sum_gx = S(0);
                        for (i64 j = 0; j < d; ++j) {
                            const S gj = go[r * d + j] * gs->v[j];
                            sum_g += gj;
                            sum_gx += gj * xh[j];
                        }
                        const S invd = S(1) / static_cast<S>(d);
                        for (i64 j = 0; j < d; ++j) {
                            const S gj = go[r * d + j] * gs->v[j];
                            xs->g[r * d + j] +=
                                is * (gj - sum_g * invd - xh[j] * sum_gx * invd);
                        }
                    }
                }
            });
    }
    return out;
}

// Batch normalization over the batch axis of [N,D]. Training mode uses
// batch statistics (biased variance) and updates the running buffers in
// place; eval mode reads the running buffers only.
template <class S>
TensorT<S> batch_norm1d(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                        TensorT<S>& running_mean, TensorT<S>& running_var, bool training,
                        S momentum = S(0.1), S eps = S(1e-5)) {
    ND_CHECK(x.rank() == 2, DimensionError, "batch_norm1d: expects [N,D]");
    const i64 n = x.dim(0), d = x.dim(1);
    ND_CHECK(gamma.numel() == d && beta.numel() == d && running_mean.numel() == d &&
                 running_var.numel() == d,
             DimensionError, "batch_norm1d: parameter length mismatch");
    TensorT<S> out(x.shape());
    auto xv = x.v();
    auto gv = gamma.v();
    auto bv = beta.v();
    auto ov = out.v();
    if (!training) {
        auto rm = running_mean.v();
        auto rv = running_var.v();
        for (i64 i = 0; i < n; ++i)
            for (i64 j = 0; j < d; ++j)
                ov[i * d + j] =
                    (xv[i * d + j] - rm[j]) / std::sqrt(rv[j] + eps) * gv[j] + bv[j];
        if (detail::grad_needed<S>({&x, &gamma, &beta})) {
            detail::mark_output(out, {&x, &gamma, &beta});
            auto xs = x.ptr(), gs = gamma.ptr(), bs = beta.ptr(), os = out.ptr();
            auto rms = running_mean.ptr(), rvs = running_var.ptr();
            GradTapeT<S>::active()->record("batch_norm1d_eval", [xs, gs, bs, os, rms, rvs, n, d,
                                                                 eps] {
                if (os->g.empty()) return;
                for (i64 j = 0; j < d; ++j) {
                    const S is = S(1) / std::sqrt(rvs->v[j] + eps);
                    for (i64 i = 0; i < n; ++i) {
                        const S go = os->g[i * d + j];
                        const S xh = (xs->v[i * d + j] - rms->v[j]) * is;
                        if (gs->requires_grad) {
                            gs->ensure_grad();
                            gs->g[j] += go * xh;
                        }
                        if (bs->requires_grad) {
                            bs->ensure_grad();
                            bs->g[j] += go;
                        }
                        if (xs->requires_grad) {
                            xs->ensure_grad();
                            xs->g[i * d + j] += go * gs->v[j] * is;
                        }
                    }
                }
            });
        }
        return out;
    }
    ND_CHECK(n >= 2, DimensionError, "batch_norm1d: training mode needs batch >= 2");
    std::vector<S> mean(static_cast<size_t>(d), S(0)), var(static_cast<size_t>(d), S(0));
    for (i64 j = 0; j < d; ++j) {
        S m = S(0);
        for (i64 i = 0; i < n; ++i) m += xv[i * d + j];
        m /= static_cast<S>(n);
        S v2 = S(0);
        for (i64 i = 0; i < n; ++i) v2 += (xv[i * d + j] - m) * (xv[i * d + j] - m);
        mean[static_cast<size_t>(j)] = m;
        var[static_cast<size_t>(j)] = v2 / static_cast<S>(n);
    }
    {
        auto rm = running_mean.v();
        auto rv = running_var.v();
        for (i64 j = 0; j < d; ++j) {
            rm[j] = (S(1) - momentum) * rm[j] + momentum * mean[static_cast<size_t>(j)];
            const S unbiased =
                var[static_cast<size_t>(j)] * static_cast<S>(n) / static_cast<S>(n - 1);
            rv[j] = (S(1) - momentum) * rv[j] + momentum * unbiased;
        }
    }
    std::vector<S> inv_sd(static_cast<size_t>(d));
    for (i64 j = 0; j < d; ++j)
        inv_sd[static_cast<size_t>(j)] = S(1) / std::sqrt(var[static_cast<size_t>(j)] + eps);
    for (i64 i = 0; i < n; ++i)
        for (i64 j = 0; j < d; ++j)
            ov[i * d + j] = (xv[i * d + j] - mean[static_cast<size_t>(j)]) *
                                inv_sd[static_cast<size_t>(j)] * gv[j] +
                            bv[j];
    if (detail::grad_needed<S>({&x, &gamma, &beta})) {
        detail::mark_output(out, {&x, &gamma, &beta});
        auto xs = x.ptr(), gs = gamma.ptr(), bs = beta.ptr(), os = out.ptr();
        GradTapeT<S>::active()->record(
            "batch_norm1d", [xs, gs, bs, os, n, d, mean = std::move(mean),
                             inv_sd = std::move(inv_sd)] {
                if (os->g.empty()) return;
                for (i64 j = 0; j < d; ++j) {
                    const S is = inv_sd[static_cast<size_t>(j)];
                    const S mu = mean[static_cast<size_t>(j)];
                    S sum_g = S(0), sum_gx = S(0);
                    for (i64 i = 0; i < n; ++i) {
                        const S go = os->g[i * d + j];
                        const S xh = (xs->v[i * d + j] - mu) * is;
                        sum_g += go;
                        sum_gx += go * xh;
                    }
                    if (gs->requires_grad) {
                        gs->ensure_grad();
                        gs->g[j] += sum_gx;
                    }
                    if (bs->requires_grad) {
                        bs->ensure_grad();
                        bs->g[j] += sum_g;
                    }
                    if (xs->requires_grad) {
                        xs->ensure_grad();
                        const S invn = S(1) / static_cast<S>(n);
                        for (i64 i = 0; i < n; ++i) {
                            const S go = os->g[i * d + j];
                            const S xh = (xs->v[i * d + j] - mu) * is;
                            xs->g[i * d + j] +=
                                gs->v[j] * is * (go - sum_g * invn - xh * sum_gx * invn);
                        }
                    }
                }
            });
    }
    return out;
}

// Inverted dropout; identity map when not training.
template <class S>
TensorT<S> dropout(const TensorT<S>& x, double p, bool training, Rng& rng) {
    ND_CHECK(p >= 0.0 && p < 1.0, ConfigError, "dropout: p must be in [0,1)");
    if (!training || p == 0.0) return x;
    TensorT<S> out(x.shape());
    const S keep_scale = S(1.0 / (1.0 - p));
    std::vector<S> mask(static_cast<size_t>(x.numel()));
    auto xv = x.v();
    auto ov = out.v();
    for (i64 i = 0; i < x.numel(); ++i) {
        const S m = rng.uniform() >= p ? keep_scale : S(0);
        mask[static_cast<size_t>(i)] = m;
        ov[i] = xv[i] * m;
    }
    if (detail::grad_needed<S>({&x})) {
        detail::mark_output(out, {&x});
        auto xs = x.ptr(), os = out.ptr();
        GradTapeT<S>::active()->record("dropout", [xs, os, mask = std::move(mask)] {
            if (os->g.empty()) return;
            xs->ensure_grad();
            for (size_t i = 0; i < mask.size(); ++i) xs->g[i] += os->g[i] * mask[i];
        });
    }
    return out;
}

// ------------------------------------------------------------ convolution

template <class S>
TensorT<S> conv1d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b, i64 stride = 1,
                  i64 pad = 0) {
    ND_CHECK(x.rank() == 3 && w.rank() == 3, DimensionError, "conv1d: expects x [N,C,L], w [O,C,K]");
    const i64 n = x.dim(0), ci = x.dim(1), len = x.dim(2);
    const i64 co = w.dim(0), k = w.dim(2);
    ND_CHECK(w.dim(1) == ci, DimensionError, "conv1d: channel mismatch");
    const i64 lo = (len + 2 * pad - k) / stride + 1;
    ND_CHECK(lo > 0, DimensionError, "conv1d: kernel larger than padded input");
    if (b.defined()) ND_CHECK(b.numel() == co, DimensionError, "conv1d: bias length mismatch");
    TensorT<S> out(Shape{n, co, lo});
    auto xv = x.v();
    auto wv = w.v();
    auto ov = out.v();
    for (i64 in = 0; in < n; ++in)
        for (i64 oc = 0; oc < co; ++oc)
            for (i64 ol = 0; ol < lo; ++ol) {
                S acc = b.defined() ? b.v()[oc] : S(0);
                for (i64 ic = 0; ic < ci; ++ic)
                    for (i64 kk = 0; kk < k; ++kk) {
                        const i64 il = ol * stride - pad + kk;
                        if (il < 0 || il >= len) continue;
                        acc += xv[(in * ci + ic) * len + il] * wv[(oc * ci + ic) * k + kk];
                    }
                ov[(in * co + oc) * lo + ol] = acc;
            }
    if (detail::grad_needed<S>({&x, &w, &b})) {
        detail::mark_output(out, {&x, &w, &b});
        auto xs = x.ptr(), ws = w.ptr(), os = out.ptr();
        auto bs = b.defined() ? b.ptr() : nullptr;
        GradTapeT<S>::active()->record("conv1d", [xs, ws, bs, os, n, ci, len, co, k, lo, stride,
                                                  pad] {
            if (os->g.empty()) return;
            const bool gx = xs->requires_grad, gw = ws->requires_grad;
            const bool gb = bs && bs->requires_grad;
            if (gx) xs->ensure_grad();
            if (gw) ws->ensure_grad();
            if (gb) bs->ensure_grad();
            for (i64 in = 0; in < n; ++in)
                for (i64 oc = 0; oc < co; ++oc)
                    for (i64 ol = 0; ol < lo; ++ol) {
                        const S go = os->g[(in * co + oc) * lo + ol];
                        if (go == S(0)) continue;
                        if (gb) bs->g[oc] += go;
                        for (i64 ic = 0; ic < ci; ++ic)
                            for (i64 kk = 0; kk < k; ++kk) {
                                const i64 il = ol * stride - pad + kk;
                                if (il < 0 || il >= len) continue;
                                if (gw)
                                    ws->g[(oc * ci + ic) * k + kk] +=
                                        go * xs->v[(in * ci + ic) * len + il];
                                if (gx)
                                    xs->g[(in * ci + ic) * len + il] +=
                                        go * ws->v[(oc * ci + ic) * k + kk];
                            }
                    }
        });
    }
    return out;
}

template <class S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b, i64 stride = 1,
                  i64 pad = 0) {
    ND_CHECK(x.rank() == 4 && w.rank() == 4, DimensionError,
             "conv2d: expects x [N,C,H,W], w [O,C,kh,kw]");
    const i64 n = x.dim(0), ci = x.dim(1), h = x.dim(2), wdt = x.dim(3);
    const i64 co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    ND_CHECK(w.dim(1) == ci, DimensionError, "conv2d: channel mismatch");
    const i64 ho = (h + 2 * pad - kh) / stride + 1;
    const i64 wo = (wdt + 2 * pad - kw) / stride + 1;
    ND_CHECK(ho > 0 && wo > 0, DimensionError, "conv2d: kernel larger than padded input");
    if (b.defined()) ND_CHECK(b.numel() == co, DimensionError, "conv2d: bias length mismatch");
    TensorT<S> out(Shape{n, co, ho, wo});
    auto xv = x.v();
    auto wv = w.v();
    auto ov = out.v();
    for (i64 in = 0; in < n; ++in)
        for (i64 oc = 0; oc < co; ++oc)
            for (i64 oh = 0; oh < ho; ++oh)
                for (i64 ow = 0; ow < wo; ++ow) {
                    S acc = b.defined() ? b.v()[oc] : S(0);
                    for (i64 ic = 0; ic < ci; ++ic) {
                        const S* xc = xv.data() + (in * ci + ic) * h * wdt;
                        const S* wc = wv.data() + (oc * ci + ic) * kh * kw;
                        for (i64 r = 0; r < kh; ++r) {
                            const i64 ih = oh * stride - pad + r;
                            if (ih < 0 || ih >= h) continue;
                            for (i64 c = 0; c < kw; ++c) {
                                const i64 iw = ow * stride - pad + c;
                                if (iw < 0 || iw >= wdt) continue;
                                acc += xc[ih * wdt + iw] * wc[r * kw + c];
                            }
                        }
                    }
                    ov[((in * co + oc) * ho + oh) * wo + ow] = acc;
                }
    if (detail::grad_needed<S>({&x, &w, &b})) {
        detail::mark_output(out, {&x, &w, &b});
        auto xs = x.ptr(), ws = w.ptr(), os = out.ptr();
        auto bs = b.defined() ? b.ptr() : nullptr;
        GradTapeT<S>::active()->record(
            "conv2d", [xs, ws, bs, os, n, ci, h, wdt, co, kh, kw, ho, wo, stride, pad] {
                if (os->g.empty()) return;
                const bool gx = xs->requires_grad, gw = ws->requires_grad;
                const bool gb = bs && bs->requires_grad;
                if (gx) xs->ensure_grad();
                if (gw) ws->ensure_grad();
                if (gb) bs->ensure_grad();
                for (i64 in = 0; in < n; ++in)
                    for (i64 oc = 0; oc < co; ++oc)
                        for (i64 oh = 0; oh < ho; ++oh)
                            for (i64 ow = 0; ow < wo; ++ow) {
                                const S go = os->g[((in * co + oc) * ho + oh) * wo + ow];
                                if (go == S(0)) continue;
                                if (gb) bs->g[oc] += go;
                                for (i64 ic = 0; ic < ci; ++ic) {
                                    const i64 xoff = (in * ci + ic) * h * wdt;
                                    const i64 woff = (oc * ci + ic) * kh * kw;
                                    for (i64 r = 0; r < kh; ++r) {
                                        const i64 ih = oh * stride - pad + r;
                                        if (ih < 0 || ih >= h) continue;
                                        for (i64 c = 0; c < kw; ++c) {
                                            const i64 iw = ow * stride - pad + c;
                                            if (iw < 0 || iw >= wdt) continue;
                                            if (gw)
                                                ws->g[woff + r * kw + c] +=
                                                    go * xs->v[xoff + ih * wdt + iw];
                                            if (gx)
                                                xs->g[xoff + ih * wdt + iw] +=
                                                    go * ws->v[woff + r * kw + c];
                                        }
                                    }
                                }
                            }
            });
    }
    return out;
}

// Transposed convolutions; weight layout [Cin, Cout, K...] as the adjoint
// of conv with stride/pad. Output length = (L-1)*stride - 2*pad + K.
template <class S>
TensorT<S> conv_transpose1d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b,
                            i64 stride = 1, i64 pad = 0) {
    ND_CHECK(x.rank() == 3 && w.rank() == 3, DimensionError,
             "conv_transpose1d: expects x [N,C,L], w [C,O,K]");
    const i64 n = x.dim(0), ci = x.dim(1), len = x.dim(2);
    ND_CHECK(w.dim(0) == ci, DimensionError, "conv_transpose1d: channel mismatch");
    const i64 co = w.dim(1), k = w.dim(2);
    const i64 lo = (len - 1) * stride - 2 * pad + k;
    ND_CHECK(lo > 0, DimensionError, "conv_transpose1d: empty output");
    if (b.defined()) ND_CHECK(b.numel() == co, DimensionError, "conv_transpose1d: bias mismatch");
    TensorT<S> out(Shape{n, co, lo});
    auto xv = x.v();
    auto wv = w.v();
    auto ov = out.v();
    for (i64 in = 0; in < n; ++in)
        for (i64 oc = 0; oc < co; ++oc)
            for (i64 ol = 0; ol < lo; ++ol) {
                S acc = b.defined() ? b.v()[oc] : S(0);
                for (i64 kk = 0; kk < k; ++kk) {
                    const i64 num = ol + pad - kk;
                    if (num < 0 || num % stride != 0) continue;
                    const i64 il = num / stride;
                    if (il >= len) continue;
                    for (i64 ic = 0; ic < ci; ++ic)
                        acc += xv[(in * ci + ic) * len + il] * wv[(ic * co + oc) * k + kk];
                }
                ov[(in * co + oc) * lo + ol] = acc;
            }
    if (detail::grad_needed<S>({&x, &w, &b})) {
        detail::mark_output(out, {&x, &w, &b});
        auto xs = x.ptr(), ws = w.ptr(), os = out.ptr();
        auto bs = b.defined() ? b.ptr() : nullptr;
        GradTapeT<S>::active()->record(
            "conv_transpose1d", [xs, ws, bs, os, n, ci, len, co, k, lo, stride, pad] {
                if (os->g.empty()) return;
                const bool gx = xs->requires_grad, gw = ws->requires_grad;
                const bool gb = bs && bs->requires_grad;
                if (gx) xs->ensure_grad();
                if (gw) ws->ensure_grad();
                if (gb) bs->ensure_grad();
                for (i64 in = 0; in < n; ++in)
                    for (i64 oc = 0; oc < co; ++oc)
                        for (i64 ol = 0; ol < lo; ++ol) {
                            const S go = os->g[(in * co + oc) * lo + ol];
                            if (go == S(0)) continue;
                            if (gb) bs->g[oc] += go;
                            for (i64 kk = 0; kk < k; ++kk) {
                                const i64 num = ol + pad - kk;
                                if (num < 0 || num % stride != 0) continue;
                                const i64 il = num / stride;
                                if (il >= len) continue;
                                for (i64 ic = 0; ic < ci; ++ic) {
                                    if (gw)
                                        ws->g[(ic * co + oc) * k + kk] +=
                                            go * xs->v[(in * ci + ic) * len + il];
                                    if (gx)
                                        xs->g[(in * ci + ic) * len + il] +=
                                            go * ws->v[(ic * co + oc) * k + kk];
                                }
                            }
                        }
            });
    }
    return out;
}

template <class S>
TensorT<S> conv_transpose2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b,
                            i64 stride = 1, i64 pad = 0) {
    ND_CHECK(x.rank() == 4 && w.rank() == 4, DimensionError,
             "conv_transpose2d: expects x [N,C,H,W], w [C,O,kh,kw]");
    const i64 n = x.dim(0), ci = x.dim(1), h = x.dim(2), wdt = x.dim(3);
    ND_CHECK(w.dim(0) == ci, DimensionError, "conv_transpose2d: channel mismatch");
    const i64 co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const i64 ho = (h - 1) * stride - 2 * pad + kh;
    const i64 wo = (wdt - 1) * stride - 2 * pad + kw;
    ND_CHECK(ho > 0 && wo > 0, DimensionError, "conv_transpose2d: empty output");
    if (b.defined()) ND_CHECK(b.numel() == co, DimensionError, "conv_transpose2d: bias mismatch");
    TensorT<S> out(Shape{n, co, ho, wo});
    auto xv = x.v();
    auto wv = w.v();
    auto ov = out.v();
    for (i64 in = 0; in < n; ++in)
        for (i64 oc = 0; oc < co; ++oc)
            for (i64 oh = 0; oh < ho; ++oh)
                for (i64 ow = 0; ow < wo; ++ow) {
                    S acc = b.defined() ? b.v()[oc] : S(0);
                    for (i64 r = 0; r < kh; ++r) {
                        const i64 hn = oh + pad - r;
                        if (hn < 0 || hn % stride != 0) continue;
                        const i64 ih = hn / stride;
                        if (ih >= h) continue;
                        for (i64 c = 0; c < kw; ++c) {
                            const i64 wn = ow + pad - c;
                            if (wn < 0 || wn % stride != 0) continue;
                            const i64 iw = wn / stride;
                            if (iw >= wdt) continue;
                            for (i64 ic = 0; ic < ci; ++ic)
                                acc += xv[((in * ci + ic) * h + ih) * wdt + iw] *
                                       wv[((ic * co + oc) * kh + r) * kw + c];
                        }
                    }
                    ov[((in * co + oc) * ho + oh) * wo + ow] = acc;
                }
    if (detail::grad_needed<S>({&x, &w, &b})) {
        detail::mark_output(out, {&x, &w, &b});
        auto xs = x.ptr(), ws = w.ptr(), os = out.ptr();
        auto bs = b.defined() ? b.ptr() : nullptr;
        GradTapeT<S>::active()->record(
            "conv_transpose2d",
            [xs, ws, bs, os, n, ci, h, wdt, co, kh, kw, ho, wo, stride, pad] {
                if (os->g.empty()) return;
                const bool gx = xs->requires_grad, gw = ws->requires_grad;
                const bool gb = bs && bs->requires_grad;
                if (gx) xs->ensure_grad();
                if (gw) ws->ensure_grad();
                if (gb) bs->ensure_grad();
                for (i64 in = 0; in < n; ++in)
                    for (i64 oc = 0; oc < co; ++oc)
                        for (i64 oh = 0; oh < ho; ++oh)
                            for (i64 ow = 0; ow < wo; ++ow) {
                                const S go = os->g[((in * co + oc) * ho + oh) * wo + ow];
                                if (go == S(0)) continue;
                                if (gb) bs->g[oc] += go;
                                for (i64 r = 0; r < kh; ++r) {
                                    const i64 hn = oh + pad - r;
                                    if (hn < 0 || hn % stride != 0) continue;
                                    const i64 ih = hn / stride;
                                    if (ih >= h) continue;
                                    for (i64 c = 0; c < kw; ++c) {
                                        const i64 wn = ow + pad - c;
                                        if (wn < 0 || wn % stride != 0) continue;
                                        const i64 iw = wn / stride;
                                        if (iw >= wdt) continue;
                                        for (i64 ic = 0; ic < ci; ++ic) {
                                            const i64 xoff = ((in * ci + ic) * h + ih) * wdt + iw;
                                            const i64 woff = ((ic * co + oc) * kh + r) * kw + c;
                                            if (gw) ws->g[woff] += go * xs->v[xoff];
                                            if (gx) xs->g[xoff] += go * ws->v[woff];
                                        }
                                    }
                                }
                            }
            });
    }
    return out;
}

// Max pooling over [N,C,L] with window k and stride k; a trailing partial
// window is pooled as-is.
template <class S>
TensorT<S> max_pool1d(const TensorT<S>& x, i64 k) {
    ND_CHECK(x.rank() == 3 && k >= 1, DimensionError, "max_pool1d: expects [N,C,L] and k >= 1");
    const i64 n = x.dim(0), c = x.dim(1), len = x.dim(2);
    const i64 lo = (len + k - 1) / k;
    TensorT<S> out(Shape{n, c, lo});
    std::vector<i64> arg(static_cast<size_t>(out.numel()));
    auto xv = x.v();
    auto ov = out.v();
    for (i64 in = 0; in < n; ++in)
        for (i64 ic = 0; ic < c; ++ic)
            for (i64 ol = 0; ol < lo; ++ol) {
                const i64 lo_i = ol * k, hi_i = std::min(len, lo_i + k);
                i64 best = lo_i;
                S bv = xv[(in * c + ic) * len + lo_i];
                for (i64 il = lo_i + 1; il < hi_i; ++il) {
                    const S v = xv[(in * c + ic) * len + il];
                    if (v > bv) {
                        bv = v;
                        best = il;
                    }
                }
                ov[(in * c + ic) * lo + ol] = bv;
                arg[static_cast<size_t>((in * c + ic) * lo + ol)] = (in * c + ic) * len + best;
            }
    if (detail::grad_needed<S>({&x})) {
        detail::mark_output(out, {&x});
        auto xs = x.ptr(), os = out.ptr();
        GradTapeT<S>::active()->record("max_pool1d", [xs, os, arg = std::move(arg)] {
            if (os->g.empty()) return;
            xs->ensure_grad();
            for (size_t i = 0; i < arg.size(); ++i) xs->g[arg[i]] += os->g[i];
        });
    }
    return out;
}

template <class S>
TensorT<S> upsample_nearest2d(const TensorT<S>& x, i64 factor) {
    ND_CHECK(x.rank() == 4 && factor >= 1, DimensionError,
             "upsample_nearest2d: expects [N,C,H,W] and factor >= 1");
    const i64 n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    TensorT<S> out(Shape{n, c, h * factor, w * factor});
    auto xv = x.v();
    auto ov = out.v();
    const i64 ho = h * factor, wo = w * factor;
    for (i64 in = 0; in < n; ++in)
        for (i64 ic = 0; ic < c; ++ic)
            for (i64 oh = 0; oh < ho; ++oh)
                for (i64 ow = 0; ow < wo; ++ow)
                    ov[((in * c + ic) * ho + oh) * wo + ow] =
                        xv[((in * c + ic) * h + oh / factor) * w + ow / factor];
    if (detail::grad_needed<S>({&x})) {
        detail::mark_output(out, {&x});
        auto xs = x.ptr(), os = out.ptr();
        GradTapeT<S>::active()->record("upsample_nearest2d", [xs, os, n, c, h, w, factor] {
            if (os->g.empty()) return;
            xs->ensure_grad();
            const i64 ho = h * factor, wo = w * factor;
            for (i64 in = 0; in < n; ++in)
                for (i64 ic = 0; ic < c; ++ic)
                    for (i64 oh = 0; oh < ho; ++oh)
                        for (i64 ow = 0; ow < wo; ++ow)
                            xs->g[((in * c + ic) * h + oh / factor) * w + ow / factor] +=
                                os->g[((in * c + ic) * ho + oh) * wo + ow];
        });
    }
    return out;
}

// y[n,c,h,w] = x[n,c,h,w] + b[c]
template <class S>
TensorT<S> bias_nchw(const TensorT<S>& x, const TensorT<S>& b) {
    ND_CHECK(x.rank() == 4 && b.rank() == 1 && b.dim(0) == x.dim(1), DimensionError,
             "bias_nchw: incompatible shapes");
    const i64 n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    TensorT<S> out(x.shape());
    auto xv = x.v();
    auto bv = b.v();
    auto ov = out.v();
    for (i64 in = 0; in < n; ++in)
        for (i64 ic = 0; ic < c; ++ic)
            for (i64 p = 0; p < hw; ++p)
                ov[(in * c + ic) * hw + p] = xv[(in * c + ic) * hw + p] + bv[ic];
    if (detail::grad_needed<S>({&x, &b})) {
        detail::mark_output(out, {&x, &b});
        auto xs = x.ptr(), bs = b.ptr(), os = out.ptr();
        GradTapeT<S>::active()->record("bias_nchw", [xs, bs, os, n, c, hw] {
            if (os->g.empty()) return;
            if (xs->requires_grad) {
                xs->ensure_grad();
                for (size_t i = 0; i < os->g.size(); ++i) xs->g[i] += os->g[i];
            }
            if (bs->requires_grad) {
                bs->ensure_grad();
                for (i64 in = 0; in < n; ++in)
                    for (i64 ic = 0; ic < c; ++ic)
                        for (i64 p = 0; p < hw; ++p) bs->g[ic] += os->g[(in * c + ic) * hw + p];
            }
        });
    }
    return out;
}

// Feature-wise affine over spatial maps: y[n,c,:,:] = x[n,c,:,:]*s[n,c] + b[n,c]
template <class S>
TensorT<S> scale_shift_nchw(const TensorT<S>& x, const TensorT<S>& s, const TensorT<S>& b) {
    ND_CHECK(x.rank() == 4 && s.rank() == 2 && b.rank() == 2, DimensionError,
             "scale_shift_nchw: expects x [N,C,H,W], s/b [N,C]");
    const i64 n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    ND_CHECK(s.dim(0) == n && s.dim(1) == c && b.dim(0) == n && b.dim(1) == c, DimensionError,
             "scale_shift_nchw: shape mismatch");
    TensorT<S> out(x.shape());
    auto xv = x.v();
    auto sv = s.v();
    auto bv = b.v();
    auto ov = out.v();
    for (i64 in = 0; in < n; ++in)
        for (i64 ic = 0; ic < c; ++ic) {
            const S sc = sv[in * c + ic], sh = bv[in * c + ic];
            for (i64 p = 0; p < hw; ++p)
                ov[(in * c + ic) * hw + p] = xv[(in * c + ic) * hw + p] * sc + sh;
        }
    if (detail::grad_needed<S>({&x, &s, &b})) {
        detail::mark_output(out, {&x, &s, &b});
        auto xs = x.ptr(), ss = s.ptr(), bs = b.ptr(), os = out.ptr();
        GradTapeT<S>::active()->record("scale_shift_nchw", [xs, ss, bs, os, n, c, hw] {
            if (os->g.empty()) return;
            const bool gx = xs->requires_grad, gs = ss->requires_grad, gb = bs->requires_grad;
            if (gx) xs->ensure_grad();
            if (gs) ss->ensure_grad();
            if (gb) bs->ensure_grad();
            for (i64 in = 0; in < n; ++in)
                for (i64 ic = 0; ic < c; ++ic) {
                    const S sc = ss->v[in * c + ic];
                    S acc_s = S(0), acc_b = S(0);
                    for (i64 p = 0; p < hw; ++p) {
                        const S go = os->g[(in * c + ic) * hw + p];
                        if (gx) xs->g[(in * c + ic) * hw + p] += go * sc;
                        acc_s += go * xs->v[(in * c + ic) * hw + p];
                        acc_b += go;
                    }
                    if (gs) ss->g[in * c + ic] += acc_s;
                    if (gb) bs->g[in * c + ic] += acc_b;
                }
        });
    }
    return out;
}

// Row gather from an embedding table [V,D]; backward scatter-adds.
template <class S>
TensorT<S> embedding(const TensorT<S>& table, const std::vector<i64>& ids) {
    ND_CHECK(table.rank() == 2, DimensionError, "embedding: table must be [V,D]");
    const i64 v = table.dim(0), d = table.dim(1);
    for (i64 id : ids)
        ND_CHECK(id >= 0 && id < v, DimensionError, "embedding: id " << id << " out of range");
    TensorT<S> out(Shape{static_cast<i64>(ids.size()), d});
    auto tv = table.v();
    auto ov = out.v();
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(tv.data() + ids[i] * d, tv.data() + (ids[i] + 1) * d, ov.data() + i * d);
    if (detail::grad_needed<S>({&table})) {
        detail::mark_output(out, {&table});
        auto ts = table.ptr(), os = out.ptr();
        GradTapeT<S>::active()->record("embedding", [ts, os, ids, d] {
            if (os->g.empty()) return;
            ts->ensure_grad();
            for (size_t i = 0; i < ids.size(); ++i)
                for (i64 j = 0; j < d; ++j) ts->g[ids[i] * d + j] += os->g[i * d + j];
        });
    }
    return out;
}

// ----------------------------------------------------------------- losses

template <class S>
TensorT<S> mse_loss(const TensorT<S>& pred, const TensorT<S>& target) {
    detail::check_same_shape("mse_loss", pred, target);
    const i64 n = pred.numel();
    TensorT<S> out(Shape{1});
    auto pv = pred.v();
    auto tv = target.v();
    S acc = S(0);
    for (i64 i = 0; i < n; ++i) {
        const S d = pv[i] - tv[i];
        acc += d * d;
    }
    out.v()[0] = acc / static_cast<S>(n);
    if (detail::grad_needed<S>({&pred, &target})) {
        detail::mark_output(out, {&pred, &target});
        auto ps = pred.ptr(), ts = target.ptr(), os = out.ptr();
        GradTapeT<S>::active()->record("mse_loss", [ps, ts, os, n] {
            if (os->g.empty()) return;
            const S go = os->g[0] * S(2) / static_cast<S>(n);
            if (ps->requires_grad) {
                ps->ensure_grad();
                for (i64 i = 0; i < n; ++i) ps->g[i] += go * (ps->v[i] - ts->v[i]);
            }
            if (ts->requires_grad) {
                ts->ensure_grad();
                for (i64 i = 0; i < n; ++i) ts->g[i] -= go * (ps->v[i] - ts->v[i]);
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> mae_loss(const TensorT<S>& pred, const TensorT<S>& target) {
    detail::check_same_shape("mae_loss", pred, target);
    return mean_all(abs(sub(pred, target)));
}

// Mean cross-entropy of row-wise softmax(logits) against integer labels.
template <class S>
TensorT<S> cross_entropy_rows(const TensorT<S>& logits, const std::vector<i64>& labels) {
    ND_CHECK(logits.rank() == 2, DimensionError,
             "cross_entropy_rows: expects [N,C] logits, got " << shape_str(logits.shape()));
    const i64 n = logits.dim(0), c = logits.dim(1);
    ND_CHECK(static_cast<i64>(labels.size()) == n, DimensionError,
             "cross_entropy_rows: " << n << " rows vs " << labels.size() << " labels");
    for (i64 r = 0; r < n; ++r)
        ND_CHECK(labels[r] >= 0 && labels[r] < c, DimensionError,
                 "cross_entropy_rows: label " << labels[r] << " outside [0," << c << ")");
    TensorT<S> out(Shape{1});
    auto xv = logits.v();
    S acc = S(0);
    for (i64 r = 0; r < n; ++r) {
        const S* px = xv.data() + r * c;
        S mx = px[0];
        for (i64 j = 1; j < c; ++j) mx = std::max(mx, px[j]);
        S sum = S(0);
        for (i64 j = 0; j < c; ++j) sum += std::exp(px[j] - mx);
        acc += mx + std::log(sum) - px[labels[r]];
    }
    out.v()[0] = acc / static_cast<S>(n);
    if (detail::grad_needed<S>({&logits})) {
        detail::mark_output(out, {&logits});
        auto xs = logits.ptr(), os = out.ptr();
        GradTapeT<S>::active()->record("cross_entropy_rows", [xs, os, labels, n, c] {
            if (os->g.empty()) return;
            xs->ensure_grad();
            const S go = os->g[0] / static_cast<S>(n);
            for (i64 r = 0; r < n; ++r) {
                const S* px = xs->v.data() + r * c;
                S* gx = xs->g.data() + r * c;
                S mx = px[0];
                for (i64 j = 1; j < c; ++j) mx = std::max(mx, px[j]);
                S sum = S(0);
                for (i64 j = 0; j < c; ++j) sum += std::exp(px[j] - mx);
                for (i64 j = 0; j < c; ++j)
                    gx[j] += go * (std::exp(px[j] - mx) / sum - S(j == labels[r] ? 1 : 0));
            }
        });
    }
    return out;
}

// --------------------------------------------------- non-grad conveniences

template <class S>
std::vector<S> to_vector(const TensorT<S>& t) {
    return std::vector<S>(t.v().begin(), t.v().end());
}

template <class S>
i64 argmax(const TensorT<S>& t) {
    auto v = t.v();
    return std::distance(v.begin(), std::max_element(v.begin(), v.end()));
}

}  // namespace nd
