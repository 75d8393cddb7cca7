#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "tensor.hpp"

// Dense double-precision solvers used by the estimation stages. All
// routines are value-only (nothing here touches the autodiff tape).
// Matrices are rank-2 Tensors in row-major order.

namespace nd {
namespace la {

inline void check_mat(const Tensor& a, const char* who) {
    ND_CHECK(a.rank() == 2, DimensionError, who << ": expects a rank-2 tensor, got "
                                                << shape_str(a.shape()));
}

// C = A * B without tape interaction.
inline Tensor mat_mul(const Tensor& a, const Tensor& b) {
    check_mat(a, "mat_mul");
    check_mat(b, "mat_mul");
    const i64 m = a.dim(0), k = a.dim(1), n = b.dim(1);
    ND_CHECK(b.dim(0) == k, DimensionError, "mat_mul: inner dims " << k << " vs " << b.dim(0));
    Tensor c(Shape{m, n});
    auto av = a.v();
    auto bv = b.v();
    auto cv = c.v();
    for (i64 i = 0; i < m; ++i) {
        double* crow = cv.data() + i * n;
        for (i64 p = 0; p < k; ++p) {
            const double aik = av[i * k + p];
            if (aik == 0.0) continue;
            const double* brow = bv.data() + p * n;
            for (i64 j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

// C = A^T * B
inline Tensor mat_tmul(const Tensor& a, const Tensor& b) {
    check_mat(a, "mat_tmul");
    check_mat(b, "mat_tmul");
    const i64 m = a.dim(0), ka = a.dim(1), n = b.dim(1);
    ND_CHECK(b.dim(0) == m, DimensionError, "mat_tmul: row counts differ");
    Tensor c(Shape{ka, n});
    auto av = a.v();
    auto bv = b.v();
    auto cv = c.v();
    for (i64 i = 0; i < m; ++i) {
        const double* arow = av.data() + i * ka;
        const double* brow = bv.data() + i * n;
        for (i64 p = 0; p < ka; ++p) {
            const double aip = arow[p];
            if (aip == 0.0) continue;
            double* crow = cv.data() + p * n;
            for (i64 j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
    return c;
}

inline Tensor transpose(const Tensor& a) {
    check_mat(a, "transpose");
    const i64 m = a.dim(0), n = a.dim(1);
    Tensor t(Shape{n, m});
    auto av = a.v();
    auto tv = t.v();
    for (i64 i = 0; i < m; ++i)
        for (i64 j = 0; j < n; ++j) tv[j * m + i] = av[i * n + j];
    return t;
}

// In-place lower Cholesky of an SPD matrix; returns false if a pivot is
// not positive (matrix not SPD to working precision).
inline bool cholesky_factor(std::vector<double>& a, i64 n) {
    for (i64 j = 0; j < n; ++j) {
        double d = a[j * n + j];
        for (i64 k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
        if (!(d > 0.0) || !std::isfinite(d)) return false;
        const double l = std::sqrt(d);
        a[j * n + j] = l;
        for (i64 i = j + 1; i < n; ++i) {
            double s = a[i * n + j];
            for (i64 k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
            a[i * n + j] = s / l;
        }
    }
    return true;
}

// Solves (L L^T) X = B given the factor from cholesky_factor.
inline void cholesky_solve_factored(const std::vector<double>& l, i64 n, Tensor& b) {
    const i64 m = b.dim(1);
    auto bv = b.v();
    for (i64 j = 0; j < m; ++j) {
        // forward: L y = b
        for (i64 i = 0; i < n; ++i) {
            double s = bv[i * m + j];
            for (i64 k = 0; k < i; ++k) s -= l[i * n + k] * bv[k * m + j];
            bv[i * m + j] = s / l[i * n + i];
        }
        // backward: L^T x = y
        for (i64 i = n - 1; i >= 0; --i) {
            double s = bv[i * m + j];
            for (i64 k = i + 1; k < n; ++k) s -= l[k * n + i] * bv[k * m + j];
            bv[i * m + j] = s / l[i * n + i];
        }
    }
}

// Solves A X = B for SPD A.
inline Tensor cholesky_solve(const Tensor& a, const Tensor& b) {
    check_mat(a, "cholesky_solve");
    check_mat(b, "cholesky_solve");
    const i64 n = a.dim(0);
    ND_CHECK(a.dim(1) == n && b.dim(0) == n, DimensionError, "cholesky_solve: shape mismatch");
    std::vector<double> l(a.v().begin(), a.v().end());
    ND_CHECK(cholesky_factor(l, n), SolverError,
             "cholesky_solve: matrix is not positive definite");
    Tensor x = b.clone();
    cholesky_solve_factored(l, n, x);
    return x;
}

// Cyclic Jacobi eigensolver for symmetric matrices. Returns eigenvalues in
// descending order with matching eigenvector columns.
struct SymmetricEigen {
    std::vector<double> values;  // descending
    Tensor vectors;              // [n,n], column i pairs with values[i]
};

inline SymmetricEigen symmetric_eigen(const Tensor& a_in) {
    check_mat(a_in, "symmetric_eigen");
    const i64 n = a_in.dim(0);
    ND_CHECK(a_in.dim(1) == n, DimensionError, "symmetric_eigen: matrix must be square");
    std::vector<double> a(a_in.v().begin(), a_in.v().end());
    std::vector<double> v(static_cast<size_t>(n * n), 0.0);
    for (i64 i = 0; i < n; ++i) v[i * n + i] = 1.0;

    double frob = 0.0;
    for (double x : a) frob += x * x;
    const double tol = 1e-14 * std::max(1.0, std::sqrt(frob));

    for (int sweep = 0; sweep < 128; ++sweep) {
        double off = 0.0;
        for (i64 p = 0; p < n; ++p)
            for (i64 q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
        if (std::sqrt(2.0 * off) <= tol) break;
        for (i64 p = 0; p < n - 1; ++p) {
            for (i64 q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (std::abs(apq) <= tol * 1e-2) continue;
                const double app = a[p * n + p], aqq = a[q * n + q];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (i64 k = 0; k < n; ++k) {
                    const double akp = a[k * n + p], akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for (i64 k = 0; k < n; ++k) {
                    const double apk = a[p * n + k], aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for (i64 k = 0; k < n; ++k) {
                    const double vkp = v[k * n + p], vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<i64> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](i64 x, i64 y) { return a[x * n + x] > a[y * n + y]; });
    SymmetricEigen out;
    out.values.resize(static_cast<size_t>(n));
    out.vectors = Tensor(Shape{n, n});
    auto ov = out.vectors.v();
    for (i64 c = 0; c < n; ++c) {
        out.values[static_cast<size_t>(c)] = a[order[c] * n + order[c]];
        for (i64 r = 0; r < n; ++r) ov[r * n + c] = v[r * n + order[c]];
    }
    return out;
}

// Least squares via Householder QR with column pivoting.
struct LstsqResult {
    Tensor x;      // [n, k]
    i64 rank = 0;  // numerical rank of A
};

inline LstsqResult lstsq_qr(const Tensor& a_in, const Tensor& b_in,
                            bool require_full_rank = true) {
    check_mat(a_in, "lstsq_qr");
    check_mat(b_in, "lstsq_qr");
    const i64 m = a_in.dim(0), n = a_in.dim(1), k = b_in.dim(1);
    ND_CHECK(b_in.dim(0) == m, DimensionError, "lstsq_qr: row counts differ");
    ND_CHECK(m >= n, DimensionError,
             "lstsq_qr: underdetermined system (" << m << " rows < " << n << " cols)");
    std::vector<double> a(a_in.v().begin(), a_in.v().end());
    std::vector<double> b(b_in.v().begin(), b_in.v().end());
    std::vector<i64> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<double> colnorm(static_cast<size_t>(n), 0.0);
    for (i64 j = 0; j < n; ++j) {
        double s = 0.0;
        for (i64 i = 0; i < m; ++i) s += a[i * n + j] * a[i * n + j];
        colnorm[static_cast<size_t>(j)] = s;
    }

    i64 rank = 0;
    double r00 = 0.0;
    for (i64 step = 0; step < n; ++step) {
        // pivot: remaining column with the largest residual norm
        i64 piv = step;
        for (i64 j = step + 1; j < n; ++j)
            if (colnorm[static_cast<size_t>(j)] > colnorm[static_cast<size_t>(piv)]) piv = j;
        if (piv != step) {
            for (i64 i = 0; i < m; ++i) std::swap(a[i * n + step], a[i * n + piv]);
            std::swap(colnorm[static_cast<size_t>(step)], colnorm[static_cast<size_t>(piv)]);
            std::swap(perm[static_cast<size_t>(step)], perm[static_cast<size_t>(piv)]);
        }
        // Householder vector for column `step`, rows step..m
        double norm = 0.0;
        for (i64 i = step; i < m; ++i) norm += a[i * n + step] * a[i * n + step];
        norm = std::sqrt(norm);
        if (step == 0) r00 = norm;
        const double tolerance = std::max<double>(m, n) * 1e-13 * std::max(r00, 1e-300);
        if (norm <= tolerance) break;  // remaining columns are numerically dependent
        ++rank;
        const double alpha = a[step * n + step] >= 0.0 ? -norm : norm;
        std::vector<double> u(static_cast<size_t>(m - step));
        u[0] = a[step * n + step] - alpha;
        for (i64 i = step + 1; i < m; ++i) u[static_cast<size_t>(i - step)] = a[i * n + step];
        double unorm2 = 0.0;
        for (double x : u) unorm2 += x * x;
        if (unorm2 > 0.0) {
            // reflect A[step:, step:] and B[step:, :]
            for (i64 j = step; j < n; ++j) {
                double dot = 0.0;
                for (i64 i = step; i < m; ++i) dot += u[static_cast<size_t>(i - step)] * a[i * n + j];
                const double f = 2.0 * dot / unorm2;
                for (i64 i = step; i < m; ++i) a[i * n + j] -= f * u[static_cast<size_t>(i - step)];
            }
            for (i64 j = 0; j < k; ++j) {
                double dot = 0.0;
                for (i64 i = step; i < m; ++i) dot += u[static_cast<size_t>(i - step)] * b[i * k + j];
                const double f = 2.0 * dot / unorm2;
                for (i64 i = step; i < m; ++i) b[i * k + j] -= f * u[static_cast<size_t>(i - step)];
            }
        }
        a[step * n + step] = alpha;
        for (i64 i = step + 1; i < m; ++i) a[i * n + step] = 0.0;
        for (i64 j = step + 1; j < n; ++j)
            colnorm[static_cast<size_t>(j)] -= a[step * n + j] * a[step * n + j];
    }

    if (require_full_rank)
        ND_CHECK(rank == n, SolverError, "lstsq_qr: design matrix is rank deficient ("
                                             << n - rank << " of " << n
                                             << " columns linearly dependent)");

    // back substitution on the leading rank x rank triangle; free vars = 0
    Tensor x(Shape{n, k});
    auto xv = x.v();
    std::vector<double> xp(static_cast<size_t>(n * k), 0.0);
    for (i64 j = 0; j < k; ++j) {
        for (i64 i = rank - 1; i >= 0; --i) {
            double s = b[i * k + j];
            for (i64 p = i + 1; p < rank; ++p) s -= a[i * n + p] * xp[p * k + j];
            xp[i * k + j] = s / a[i * n + i];
        }
    }
    for (i64 i = 0; i < n; ++i)
        for (i64 j = 0; j < k; ++j) xv[perm[static_cast<size_t>(i)] * k + j] = xp[i * k + j];
    LstsqResult res;
    res.x = std::move(x);
    res.rank = rank;
    return res;
}

// Multi-output ridge on already-prepared matrices: W = (X^T X + a I)^-1 X^T Y.
// Falls back to an eigendecomposition when the shifted normal matrix is not
// numerically SPD (only possible for alpha ~ 0 with dependent columns).
inline Tensor ridge_normal_solve(const Tensor& x, const Tensor& y, double alpha) {
    check_mat(x, "ridge_normal_solve");
    check_mat(y, "ridge_normal_solve");
    ND_CHECK(x.dim(0) == y.dim(0), DimensionError, "ridge_normal_solve: row counts differ");
    ND_CHECK(alpha >= 0.0, ConfigError, "ridge_normal_solve: alpha must be >= 0");
    const i64 d = x.dim(1);
    Tensor xtx = mat_tmul(x, x);
    {
        auto v = xtx.v();
        for (i64 i = 0; i < d; ++i) v[i * d + i] += alpha;
    }
    Tensor xty = mat_tmul(x, y);
    std::vector<double> l(xtx.v().begin(), xtx.v().end());
    if (cholesky_factor(l, d)) {
        Tensor w = xty.clone();
        cholesky_solve_factored(l, d, w);
        return w;
    }
    // eigendecomposition fallback with pseudo-inverse of tiny eigenvalues
    auto eig = symmetric_eigen(xtx);
    const double cutoff = 1e-12 * std::max(1.0, eig.values.empty() ? 0.0 : eig.values[0]);
    Tensor vt_xty = mat_tmul(eig.vectors, xty);  // [d, m]
    auto vv = vt_xty.v();
    const i64 mcols = vt_xty.dim(1);
    for (i64 i = 0; i < d; ++i) {
        const double ev = eig.values[static_cast<size_t>(i)];
        const double inv = ev > cutoff ? 1.0 / ev : 0.0;
        for (i64 j = 0; j < mcols; ++j) vv[i * mcols + j] *= inv;
    }
    return mat_mul(eig.vectors, vt_xty);
}

// Principal-component time courses of a centered data matrix X [n, d]
// (rows = observations). Returns the top-k unit-norm score columns [n, k].
// Uses the Gram matrix when d > n so cost is min(n,d)^3.
inline Tensor pca_scores(const Tensor& xc, i64 k) {
    check_mat(xc, "pca_scores");
    const i64 n = xc.dim(0), d = xc.dim(1);
    ND_CHECK(k >= 1 && k <= std::min(n, d), DimensionError,
             "pca_scores: k=" << k << " out of range for [" << n << "," << d << "]");
    Tensor scores(Shape{n, k});
    auto sv = scores.v();
    if (d <= n) {
        auto eig = symmetric_eigen(mat_tmul(xc, xc));  // [d,d]
        // scores = Xc * V_k, then normalize columns
        auto xv = xc.v();
        auto ev = eig.vectors.v();
        for (i64 i = 0; i < n; ++i)
            for (i64 c = 0; c < k; ++c) {
                double acc = 0.0;
                for (i64 j = 0; j < d; ++j) acc += xv[i * d + j] * ev[j * d + c];
                sv[i * k + c] = acc;
            }
    } else {
        // Gram trick: eigenvectors of X X^T are the score directions directly
        Tensor gram = mat_mul(xc, transpose(xc));  // [n,n]
        auto eig = symmetric_eigen(gram);
        auto ev = eig.vectors.v();
        for (i64 i = 0; i < n; ++i)
            for (i64 c = 0; c < k; ++c) sv[i * k + c] = ev[i * n + c];
    }
    for (i64 c = 0; c < k; ++c) {
        double nrm = 0.0;
        for (i64 i = 0; i < n; ++i) nrm += sv[i * k + c] * sv[i * k + c];
        nrm = std::sqrt(nrm);
        if (nrm > 1e-30)
            for (i64 i = 0; i < n; ++i) sv[i * k + c] /= nrm;
    }
    return scores;
}

// Pearson correlation between two equal-length sequences; 0 when either
// side is constant.
inline double pearson(std::span<const double> a, std::span<const double> b) {
    ND_CHECK(a.size() == b.size() && !a.empty(), DimensionError,
             "pearson: length mismatch or empty input");
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa <= 0.0 || sbb <= 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

}  // namespace la
}  // namespace nd
