#pragma once

#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "hrf.hpp"
#include "linalg.hpp"
#include "parallel.hpp"
#include "serialize.hpp"
#include "synth.hpp"

// Single-trial beta estimation: HRF-library selection, session-aware OLS,
// cross-validated noise pool with PCA noise regressors, and fractional ridge
// shrinkage of the trial betas.
//
// Nuisance handling follows the Frisch-Waugh-Lovell route: polynomial drift
// (and, once chosen, the PCA noise regressors) form per-session orthonormal
// blocks that are projected out of both the data and the task regressors;
// the reported u/v weights come from one final joint OLS over the full
// unprojected design.

namespace nd::glm {

// ------------------------------------------------------------------ design

struct DesignMatrix {
    Tensor x;  // [T, S] single-trial indicators: one 1 per column at the onset row
    Tensor p;  // [T, Pt] per-session Legendre drift columns (orthonormal blocks)
    Tensor g;  // [T, Gt] per-session PCA noise regressors; undefined before Step 2

    std::vector<i64> session_len;          // rows per session, sum = T
    std::vector<i64> p_cols_per_session;   // columns of p owned by each session
    std::vector<i64> g_cols_per_session;   // columns of g owned by each session
    std::vector<i64> trial_stimulus;       // condition id per trial column
    std::vector<i64> trial_session;        // session of each trial column
    std::vector<i64> trial_onset_row;      // global row holding the trial's 1
    i64 n_conditions = 0;
    double tr = 1.5;

    i64 rows() const { return x.dim(0); }
    i64 trials() const { return x.dim(1); }
    i64 n_sessions() const { return static_cast<i64>(session_len.size()); }
    i64 session_start(i64 s) const {
        i64 r = 0;
        for (i64 i = 0; i < s; ++i) r += session_len[static_cast<size_t>(i)];
        return r;
    }
};

// Builds the indicator + drift design from per-session trial lists.
// `poly_degree < 0` applies the duration rule (floor(seconds/120)+1, cap 4).
inline DesignMatrix make_design(const std::vector<std::vector<synth::Trial>>& trials,
                                const std::vector<i64>& session_len, double tr,
                                i64 n_conditions, i64 poly_degree = -1) {
    ND_CHECK(trials.size() == session_len.size() && !trials.empty(), DimensionError,
             "make_design: one trial list per session required");
    ND_CHECK(tr > 0.0 && n_conditions >= 1, ConfigError, "make_design: bad TR or condition count");

    DesignMatrix d;
    d.session_len = session_len;
    d.tr = tr;
    d.n_conditions = n_conditions;

    i64 t_total = 0, s_total = 0;
    for (size_t s = 0; s < trials.size(); ++s) {
        ND_CHECK(session_len[s] >= 1, DimensionError, "make_design: empty session");
        t_total += session_len[s];
        s_total += static_cast<i64>(trials[s].size());
    }
    ND_CHECK(s_total >= 1, ConfigError, "make_design: no trials");

    d.x = Tensor(Shape{t_total, s_total});
    i64 col = 0, row0 = 0;
    for (size_t s = 0; s < trials.size(); ++s) {
        i64 prev_onset = -1;
        for (const auto& tr_ev : trials[s]) {
            ND_CHECK(tr_ev.onset_tr >= 0 && tr_ev.onset_tr < session_len[s], ConfigError,
                     "make_design: onset outside session");
            ND_CHECK(tr_ev.onset_tr > prev_onset, ConfigError,
                     "make_design: onsets must be strictly ascending within a session");
            ND_CHECK(tr_ev.stimulus_id >= 0 && tr_ev.stimulus_id < n_conditions, ConfigError,
                     "make_design: stimulus id outside [0, n_conditions)");
            prev_onset = tr_ev.onset_tr;
            const i64 row = row0 + tr_ev.onset_tr;
            d.x.at({row, col}) = 1.0;
            d.trial_stimulus.push_back(tr_ev.stimulus_id);
            d.trial_session.push_back(static_cast<i64>(s));
            d.trial_onset_row.push_back(row);
            ++col;
        }
        row0 += session_len[s];
    }

    // per-session orthonormal Legendre drift blocks
    std::vector<Tensor> blocks;
    i64 p_total = 0;
    for (size_t s = 0; s < trials.size(); ++s) {
        const i64 deg = poly_degree >= 0
                            ? poly_degree
                            : synth::drift_degree_for(static_cast<double>(session_len[s]) * tr);
        blocks.push_back(synth::legendre_columns(session_len[s], deg));
        d.p_cols_per_session.push_back(deg + 1);
        p_total += deg + 1;
    }
    d.p = Tensor(Shape{t_total, p_total});
    i64 pc = 0;
    row0 = 0;
    for (size_t s = 0; s < trials.size(); ++s) {
        const i64 cols = d.p_cols_per_session[s];
        for (i64 i = 0; i < session_len[s]; ++i)
            for (i64 c = 0; c < cols; ++c) d.p.at({row0 + i, pc + c}) = blocks[s].at({i, c});
        pc += cols;
        row0 += session_len[s];
    }
    return d;
}

inline DesignMatrix make_design(const synth::SynthDataset& ds, i64 poly_degree = -1) {
    std::vector<i64> session_len;
    for (const auto& b : ds.bold) session_len.push_back(b.dim(1));
    return make_design(ds.trials, session_len, ds.cfg.tr, ds.cfg.n_stimuli, poly_degree);
}

// --------------------------------------------------------------- utilities

// Task regressors for one kernel: each trial's indicator convolved with the
// HRF, truncated at its session boundary. `group_of_trial` collapses trials
// onto shared columns (identity for the single-trial design, stimulus id for
// the condition-level design used in cross-validation).
inline Tensor convolved_design(const DesignMatrix& d, const Tensor& kernel,
                               const std::vector<i64>& group_of_trial, i64 n_cols) {
    ND_CHECK(static_cast<i64>(group_of_trial.size()) == d.trials(), DimensionError,
             "convolved_design: group map size mismatch");
    Tensor out(Shape{d.rows(), n_cols});
    auto ov = out.v();
    auto kv = kernel.v();
    for (i64 j = 0; j < d.trials(); ++j) {
        const i64 c = group_of_trial[static_cast<size_t>(j)];
        ND_CHECK(c >= 0 && c < n_cols, DimensionError, "convolved_design: group id out of range");
        const i64 s = d.trial_session[static_cast<size_t>(j)];
        const i64 sess_end = d.session_start(s) + d.session_len[static_cast<size_t>(s)];
        const i64 row = d.trial_onset_row[static_cast<size_t>(j)];
        const i64 kmax = std::min<i64>(kernel.numel(), sess_end - row);
        for (i64 k = 0; k < kmax; ++k)
            ov[static_cast<size_t>((row + k) * n_cols + c)] += kv[static_cast<size_t>(k)];
    }
    return out;
}

namespace detail {

// Projects the per-session orthonormal columns `basis` (block layout given by
// cols_per_session) out of every column of m: m <- m - B (B^T m), session-wise.
inline void project_block_basis(Tensor& m, const Tensor& basis,
                                const std::vector<i64>& cols_per_session,
                                const std::vector<i64>& session_len) {
    const i64 n_cols = m.dim(1);
    auto mv = m.v();
    auto bv = basis.v();
    const i64 btot = basis.dim(1);
    i64 row0 = 0, b0 = 0;
    for (size_t s = 0; s < session_len.size(); ++s) {
        const i64 len = session_len[s];
        const i64 bc = cols_per_session[s];
        for (i64 c = 0; c < n_cols; ++c) {
            for (i64 k = 0; k < bc; ++k) {
                double dot = 0.0;
                for (i64 i = 0; i < len; ++i)
                    dot += bv[static_cast<size_t>((row0 + i) * btot + b0 + k)] *
                           mv[static_cast<size_t>((row0 + i) * n_cols + c)];
                for (i64 i = 0; i < len; ++i)
                    mv[static_cast<size_t>((row0 + i) * n_cols + c)] -=
                        dot * bv[static_cast<size_t>((row0 + i) * btot + b0 + k)];
            }
        }
        row0 += len;
        b0 += bc;
    }
}

inline void project_nuisance(Tensor& m, const DesignMatrix& d, bool include_g) {
    project_block_basis(m, d.p, d.p_cols_per_session, d.session_len);
    if (include_g && d.g.defined() && d.g.dim(1) > 0)
        project_block_basis(m, d.g, d.g_cols_per_session, d.session_len);
}

// Least-squares for a shared design and many voxels: B = argmin |A B - Y|.
// Normal equations with a pseudo-inverse fallback keep negative controls
// (deliberately degenerate designs) finite instead of throwing.
inline Tensor solve_multi(const Tensor& a, const Tensor& y) {
    return la::ridge_normal_solve(a, y, 0.0);
}

// Rows of m excluding one session block.
inline Tensor drop_session_rows(const Tensor& m, const std::vector<i64>& session_len,
                                i64 drop) {
    const i64 t = m.dim(0), c = m.dim(1);
    i64 start = 0;
    for (i64 s = 0; s < drop; ++s) start += session_len[static_cast<size_t>(s)];
    const i64 len = session_len[static_cast<size_t>(drop)];
    Tensor out(Shape{t - len, c});
    auto ov = out.v();
    auto mv = m.v();
    std::copy(mv.begin(), mv.begin() + start * c, ov.begin());
    std::copy(mv.begin() + (start + len) * c, mv.end(), ov.begin() + start * c);
    return out;
}

inline Tensor session_rows(const Tensor& m, const std::vector<i64>& session_len, i64 s) {
    i64 start = 0;
    for (i64 i = 0; i < s; ++i) start += session_len[static_cast<size_t>(i)];
    const i64 len = session_len[static_cast<size_t>(s)];
    const i64 c = m.dim(1);
    Tensor out(Shape{len, c});
    std::copy(m.v().begin() + start * c, m.v().begin() + (start + len) * c, out.v().begin());
    return out;
}

}  // namespace detail

// ------------------------------------------------------------------ types

struct GlmConfig {
    i64 max_g = 5;                        // largest PCA noise-regressor count tried
    std::vector<double> ridge_fractions;  // shrinkage grid; empty -> {0,0.05,...,0.95}
    bool enable_ridge = true;
    i64 poly_degree = -1;  // forwarded to make_design by pipeline callers

    std::vector<double> fractions() const {
        if (!ridge_fractions.empty()) return ridge_fractions;
        std::vector<double> f;
        for (int i = 0; i < 20; ++i) f.push_back(0.05 * i);
        return f;
    }
};

struct GlmReport {
    bool noise_pool_skipped = false;  // no voxel had cross-validated R^2 < 0
    bool ridge_skipped = false;       // no condition repeats across sessions
    i64 n_noise_pool = 0;
    i64 chosen_g = 0;
    std::vector<double> g_cv_scores;  // mean signal-voxel CV R^2 for g = 0..gmax
};

struct GlmFit {
    Tensor betas;                       // [V, S] single-trial betas (after shrinkage)
    std::vector<int> chosen_hrf_index;  // per voxel
    Tensor u;                           // [V, Pt] drift weights (final joint OLS)
    Tensor v;                           // [V, Gt] noise-regressor weights; undefined if Gt=0
    Tensor r2_cv;                       // [V] cross-validated R^2 at the chosen g
    std::vector<double> ridge_fraction; // per voxel
    GlmConfig config;
    GlmReport report;
};

// -------------------------------------------------------------- operations

// Strict single-RHS OLS used where rank deficiency is a caller error.
inline Tensor ols_solve(const Tensor& a, const Tensor& y) {
    ND_CHECK(y.rank() == 1, DimensionError, "ols_solve: y must be a vector");
    Tensor ycol(Shape{y.numel(), 1});
    std::copy(y.v().begin(), y.v().end(), ycol.v().begin());
    la::LstsqResult r = la::lstsq_qr(a, ycol, /*require_full_rank=*/true);
    Tensor out(Shape{a.dim(1)});
    std::copy(r.x.v().begin(), r.x.v().end(), out.v().begin());
    return out;
}

// Top-n principal-component time courses of the column-centered matrix.
inline Tensor pca_components(const Tensor& xn, i64 n) {
    la::check_mat(xn, "pca_components");
    ND_CHECK(n >= 1 && n <= std::min(xn.dim(0), xn.dim(1)), DimensionError,
             "pca_components: n must lie in [1, min(T,k)], got " << n);
    Tensor xc = xn.clone();
    const i64 t = xc.dim(0), k = xc.dim(1);
    auto v = xc.v();
    for (i64 j = 0; j < k; ++j) {
        double mean = 0.0;
        for (i64 i = 0; i < t; ++i) mean += v[static_cast<size_t>(i * k + j)];
        mean /= static_cast<double>(t);
        for (i64 i = 0; i < t; ++i) v[static_cast<size_t>(i * k + j)] -= mean;
    }
    return la::pca_scores(xc, n);
}

// Cross-validated condition-level fit: leave one session out, estimate
// per-condition amplitudes on the remaining sessions, and predict the
// held-out session. Predictions for a fold never touch that fold's data;
// `pred[s]` is [V, len_s] in the nuisance-projected domain.
struct CvResult {
    Tensor r2;                 // [V]
    std::vector<Tensor> pred;  // per held-out session
};

inline CvResult cv_condition(const Tensor& bold, const DesignMatrix& d,
                             const hrf::HrfLibrary& hrfs, const std::vector<int>& chosen_hrf,
                             bool include_g) {
    const i64 n_vox = bold.dim(0), t_total = bold.dim(1);
    ND_CHECK(t_total == d.rows(), DimensionError, "cv_condition: BOLD/design row mismatch");
    ND_CHECK(static_cast<i64>(chosen_hrf.size()) == n_vox, DimensionError,
             "cv_condition: one HRF index per voxel required");
    const i64 n_sess = d.n_sessions();
    ND_CHECK(n_sess >= 2, ConfigError,
             "cv_condition: leave-one-session-out cross-validation requires >= 2 sessions");

    Tensor y = la::transpose(bold);  // [T, V]
    detail::project_nuisance(y, d, include_g);

    // condition-level projected design per HRF actually in use
    std::map<int, Tensor> cond_design;
    for (int h : chosen_hrf)
        if (!cond_design.count(h)) {
            Tensor xc = convolved_design(d, hrfs.kernels[static_cast<size_t>(h)],
                                         d.trial_stimulus, d.n_conditions);
            detail::project_nuisance(xc, d, include_g);
            cond_design.emplace(h, std::move(xc));
        }

    // voxel groups sharing an HRF (design is identical within a group)
    std::map<int, std::vector<i64>> groups;
    for (i64 v = 0; v < n_vox; ++v) groups[chosen_hrf[static_cast<size_t>(v)]].push_back(v);

    CvResult out;
    out.pred.resize(static_cast<size_t>(n_sess));
    for (i64 s = 0; s < n_sess; ++s)
        out.pred[static_cast<size_t>(s)] =
            Tensor(Shape{n_vox, d.session_len[static_cast<size_t>(s)]});

    std::vector<double> sse(static_cast<size_t>(n_vox), 0.0), sst(static_cast<size_t>(n_vox), 0.0);
    for (i64 s = 0; s < n_sess; ++s) {
        Tensor y_train = detail::drop_session_rows(y, d.session_len, s);
        Tensor y_hold = detail::session_rows(y, d.session_len, s);
        const i64 len = d.session_len[static_cast<size_t>(s)];
        auto& pred_s = out.pred[static_cast<size_t>(s)];
        for (const auto& [h, vox] : groups) {
            const Tensor& xc = cond_design.at(h);
            Tensor a_train = detail::drop_session_rows(xc, d.session_len, s);
            Tensor a_hold = detail::session_rows(xc, d.session_len, s);
            // gather this group's columns of y_train
            Tensor yg(Shape{y_train.dim(0), static_cast<i64>(vox.size())});
            for (i64 r = 0; r < y_train.dim(0); ++r)
                for (size_t j = 0; j < vox.size(); ++j)
                    yg.at({r, static_cast<i64>(j)}) = y_train.at({r, vox[j]});
            Tensor b = detail::solve_multi(a_train, yg);     // [C, |vox|]
            Tensor ph = la::mat_mul(a_hold, b);              // [len, |vox|]
            for (size_t j = 0; j < vox.size(); ++j) {
                const i64 v = vox[j];
                for (i64 i = 0; i < len; ++i) {
                    const double p = ph.at({i, static_cast<i64>(j)});
                    const double yv = y_hold.at({i, v});
                    pred_s.at({v, i}) = p;
                    sse[static_cast<size_t>(v)] += (yv - p) * (yv - p);
                    sst[static_cast<size_t>(v)] += yv * yv;
                }
            }
        }
    }

    out.r2 = Tensor(Shape{n_vox});
    for (i64 v = 0; v < n_vox; ++v)
        out.r2.v()[static_cast<size_t>(v)] =
            sst[static_cast<size_t>(v)] > 1e-30
                ? 1.0 - sse[static_cast<size_t>(v)] / sst[static_cast<size_t>(v)]
                : 0.0;
    return out;
}

namespace detail {

inline double mean_signal_r2(const Tensor& r2, const std::vector<i64>& pool) {
    std::vector<bool> in_pool(static_cast<size_t>(r2.numel()), false);
    for (i64 v : pool) in_pool[static_cast<size_t>(v)] = true;
    double acc = 0.0;
    i64 n = 0;
    for (i64 v = 0; v < r2.numel(); ++v)
        if (!in_pool[static_cast<size_t>(v)]) {
            acc += r2.v()[static_cast<size_t>(v)];
            ++n;
        }
    return n > 0 ? acc / static_cast<double>(n) : -std::numeric_limits<double>::infinity();
}

// Installs the first `gc` of `gmax` per-session PCA columns into d.g.
inline void set_noise_regressors(DesignMatrix& d, const Tensor& g_all, i64 gc, i64 gmax) {
    const i64 t_total = g_all.dim(0);
    const i64 n_sess = d.n_sessions();
    Tensor g(Shape{t_total, n_sess * gc});
    for (i64 r = 0; r < t_total; ++r)
        for (i64 s = 0; s < n_sess; ++s)
            for (i64 c = 0; c < gc; ++c) g.at({r, s * gc + c}) = g_all.at({r, s * gmax + c});
    d.g = std::move(g);
    d.g_cols_per_session.assign(static_cast<size_t>(n_sess), gc);
}

}  // namespace detail

// Full Algorithm-1 style fit. Appends the chosen noise regressors to `d.g`.
inline GlmFit fit_glmsingle(const Tensor& bold, DesignMatrix& d, const hrf::HrfLibrary& hrfs,
                            const GlmConfig& cfg) {
    la::check_mat(bold, "fit_glmsingle");
    const i64 n_vox = bold.dim(0), t_total = bold.dim(1);
    ND_CHECK(t_total == d.rows(), DimensionError, "fit_glmsingle: BOLD/design row mismatch");
    ND_CHECK(d.n_sessions() >= 2, ConfigError,
             "fit_glmsingle: cross-validation requires >= 2 sessions; provide at least 2");
    ND_CHECK(bold.all_finite(), NumericError, "fit_glmsingle: BOLD contains non-finite values");
    const i64 n_hrf = static_cast<i64>(hrfs.kernels.size());
    const i64 s_trials = d.trials();

    GlmFit fit;
    fit.config = cfg;

    // ---- Step 1: per-voxel HRF selection by in-sample R^2 (drift projected out)
    Tensor y = la::transpose(bold);  // [T, V]
    detail::project_nuisance(y, d, /*include_g=*/false);

    std::vector<double> sst(static_cast<size_t>(n_vox), 0.0);
    for (i64 v = 0; v < n_vox; ++v)
        for (i64 r = 0; r < t_total; ++r) {
            const double x = y.at({r, v});
            sst[static_cast<size_t>(v)] += x * x;
        }

    std::vector<i64> trial_identity(static_cast<size_t>(s_trials));
    for (i64 j = 0; j < s_trials; ++j) trial_identity[static_cast<size_t>(j)] = j;

    fit.chosen_hrf_index.assign(static_cast<size_t>(n_vox), 0);
    std::vector<double> best_r2(static_cast<size_t>(n_vox),
                                -std::numeric_limits<double>::infinity());
    for (i64 h = 0; h < n_hrf; ++h) {
        Tensor xt = convolved_design(d, hrfs.kernels[static_cast<size_t>(h)], trial_identity,
                                     s_trials);
        detail::project_nuisance(xt, d, false);
        Tensor b = detail::solve_multi(xt, y);   // [S, V]
        Tensor yhat = la::mat_mul(xt, b);        // [T, V]
        for (i64 v = 0; v < n_vox; ++v) {
            double sse = 0.0;
            for (i64 r = 0; r < t_total; ++r) {
                const double e = y.at({r, v}) - yhat.at({r, v});
                sse += e * e;
            }
            const double r2 =
                sst[static_cast<size_t>(v)] > 1e-30 ? 1.0 - sse / sst[static_cast<size_t>(v)] : 0.0;
            if (r2 > best_r2[static_cast<size_t>(v)]) {
                best_r2[static_cast<size_t>(v)] = r2;
                fit.chosen_hrf_index[static_cast<size_t>(v)] = static_cast<int>(h);
            }
        }
    }

    // ---- Step 2: noise pool from cross-validated R^2, per-session PCA regressors
    CvResult cv0 = cv_condition(bold, d, hrfs, fit.chosen_hrf_index, /*include_g=*/false);
    std::vector<i64> pool;
    for (i64 v = 0; v < n_vox; ++v)
        if (cv0.r2.v()[static_cast<size_t>(v)] < 0.0) pool.push_back(v);
    fit.report.n_noise_pool = static_cast<i64>(pool.size());

    fit.r2_cv = cv0.r2;
    if (pool.empty()) {
        fit.report.noise_pool_skipped = true;
        fit.report.g_cv_scores = {detail::mean_signal_r2(cv0.r2, pool)};
    } else {
        // candidate counts limited by session length, drift dof, and pool size
        i64 gmax = cfg.max_g;
        for (size_t s = 0; s < d.session_len.size(); ++s) {
            const i64 room = d.session_len[s] - d.p_cols_per_session[s] - 1;
            gmax = std::min(gmax, room);
        }
        gmax = std::min<i64>(gmax, static_cast<i64>(pool.size()));
        gmax = std::max<i64>(gmax, 0);

        // session-blocked PCA score columns of the pool voxels' drift-free data
        Tensor g_all;  // [T, n_sess * gmax] when gmax > 0
        if (gmax > 0) {
            g_all = Tensor(Shape{t_total, d.n_sessions() * gmax});
            i64 row0 = 0;
            for (i64 s = 0; s < d.n_sessions(); ++s) {
                const i64 len = d.session_len[static_cast<size_t>(s)];
                Tensor xn(Shape{len, static_cast<i64>(pool.size())});
                for (i64 i = 0; i < len; ++i)
                    for (size_t j = 0; j < pool.size(); ++j)
                        xn.at({i, static_cast<i64>(j)}) = y.at({row0 + i, pool[j]});
                Tensor comp = pca_components(xn, gmax);  // [len, gmax]
                for (i64 i = 0; i < len; ++i)
                    for (i64 c = 0; c < gmax; ++c)
                        g_all.at({row0 + i, s * gmax + c}) = comp.at({i, c});
                row0 += len;
            }
        }

        // choose the count 0..gmax maximizing mean CV R^2 over signal voxels
        std::vector<bool> in_pool(static_cast<size_t>(n_vox), false);
        for (i64 v : pool) in_pool[static_cast<size_t>(v)] = true;
        double best_score = -std::numeric_limits<double>::infinity();
        i64 best_g = 0;
        CvResult best_cv = cv0;
        for (i64 gc = 0; gc <= gmax; ++gc) {
            CvResult cvg;
            if (gc == 0) {
                cvg = cv0;
            } else {
                detail::set_noise_regressors(d, g_all, gc, gmax);
                cvg = cv_condition(bold, d, hrfs, fit.chosen_hrf_index, /*include_g=*/true);
            }
            double acc = 0.0;
            i64 n_signal = 0;
            for (i64 v = 0; v < n_vox; ++v)
                if (!in_pool[static_cast<size_t>(v)]) {
                    acc += cvg.r2.v()[static_cast<size_t>(v)];
                    ++n_signal;
                }
            const double score = n_signal > 0 ? acc / static_cast<double>(n_signal)
                                              : -std::numeric_limits<double>::infinity();
            fit.report.g_cv_scores.push_back(score);
            if (score > best_score + 1e-12) {
                best_score = score;
                best_g = gc;
                best_cv = cvg;
            }
        }
        fit.report.chosen_g = best_g;
        if (best_g > 0)
            detail::set_noise_regressors(d, g_all, best_g, gmax);
        else {
            d.g = Tensor();
            d.g_cols_per_session.clear();
        }
        fit.r2_cv = best_cv.r2;
    }

    // ---- Final joint OLS: [kX | P | G] per HRF group, then Step 3 shrinkage
    const i64 p_total = d.p.dim(1);
    const i64 g_total = d.g.defined() ? d.g.dim(1) : 0;
    fit.betas = Tensor(Shape{n_vox, s_trials});
    fit.u = Tensor(Shape{n_vox, p_total});
    if (g_total > 0) fit.v = Tensor(Shape{n_vox, g_total});

    Tensor y_raw = la::transpose(bold);
    std::map<int, std::vector<i64>> groups;
    for (i64 v = 0; v < n_vox; ++v) groups[fit.chosen_hrf_index[static_cast<size_t>(v)]].push_back(v);
    for (const auto& [h, vox] : groups) {
        // unprojected trial design for this kernel
        Tensor xt = convolved_design(d, hrfs.kernels[static_cast<size_t>(h)], trial_identity,
                                     s_trials);
        const i64 q = s_trials + p_total + g_total;
        Tensor full(Shape{t_total, q});
        for (i64 r = 0; r < t_total; ++r) {
            for (i64 c = 0; c < s_trials; ++c) full.at({r, c}) = xt.at({r, c});
            for (i64 c = 0; c < p_total; ++c) full.at({r, s_trials + c}) = d.p.at({r, c});
            for (i64 c = 0; c < g_total; ++c)
                full.at({r, s_trials + p_total + c}) = d.g.at({r, c});
        }
        Tensor yg(Shape{t_total, static_cast<i64>(vox.size())});
        for (i64 r = 0; r < t_total; ++r)
            for (size_t j = 0; j < vox.size(); ++j)
                yg.at({r, static_cast<i64>(j)}) = y_raw.at({r, vox[j]});
        Tensor coef = detail::solve_multi(full, yg);  // [q, |vox|]
        for (size_t j = 0; j < vox.size(); ++j) {
            const i64 v = vox[j];
            for (i64 c = 0; c < s_trials; ++c)
                fit.betas.at({v, c}) = coef.at({c, static_cast<i64>(j)});
            for (i64 c = 0; c < p_total; ++c)
                fit.u.at({v, c}) = coef.at({s_trials + c, static_cast<i64>(j)});
            for (i64 c = 0; c < g_total; ++c)
                fit.v.at({v, c}) = coef.at({s_trials + p_total + c, static_cast<i64>(j)});
        }
    }
    ND_CHECK(fit.betas.all_finite(), NumericError, "fit_glmsingle: non-finite betas");

    // ---- Step 3: fractional ridge shrinkage validated on cross-session repeats
    fit.ridge_fraction.assign(static_cast<size_t>(n_vox), 0.0);
    if (cfg.enable_ridge) {
        // ordered cross-session trial pairs of the same condition
        std::vector<std::pair<i64, i64>> pairs;
        std::map<i64, std::vector<i64>> by_cond;
        for (i64 j = 0; j < s_trials; ++j) by_cond[d.trial_stimulus[static_cast<size_t>(j)]].push_back(j);
        for (const auto& [cond, js] : by_cond)
            for (i64 a : js)
                for (i64 b : js)
                    if (a != b &&
                        d.trial_session[static_cast<size_t>(a)] !=
                            d.trial_session[static_cast<size_t>(b)])
                        pairs.emplace_back(a, b);
        if (pairs.empty()) {
            fit.report.ridge_skipped = true;
        } else {
            const std::vector<double> grid = cfg.fractions();
            parallel_for(n_vox, [&](i64 v) {
                double s_aa = 0.0, s_ab = 0.0;
                for (const auto& [a, b] : pairs) {
                    const double ba = fit.betas.at({v, a});
                    const double bb = fit.betas.at({v, b});
                    s_aa += ba * ba;
                    s_ab += ba * bb;
                }
                double best = std::numeric_limits<double>::infinity();
                double best_f = 0.0;
                for (double f : grid) {
                    const double w = 1.0 - f;
                    const double obj = w * w * s_aa - 2.0 * w * s_ab;
                    if (obj < best - 1e-15) {
                        best = obj;
                        best_f = f;
                    }
                }
                fit.ridge_fraction[static_cast<size_t>(v)] = best_f;
            });
            for (i64 v = 0; v < n_vox; ++v) {
                const double w = 1.0 - fit.ridge_fraction[static_cast<size_t>(v)];
                for (i64 c = 0; c < s_trials; ++c) fit.betas.at({v, c}) *= w;
            }
        }
    }
    for (double r2 : fit.r2_cv.v()) ND_CHECK(r2 <= 1.0 + 1e-12, NumericError, "r2_cv > 1");
    return fit;
}

// ------------------------------------------------------------- persistence

inline void save_glm_fit(const GlmFit& fit, const std::string& stem) {
    TensorArchive<double> ar;
    ar.put("betas", fit.betas);
    ar.put("u", fit.u);
    ar.put("r2_cv", fit.r2_cv);
    if (fit.v.defined()) ar.put("v", fit.v);
    ar.save(stem + ".ndar");

    nlohmann::json j;
    j["format"] = "neurodecode.glmfit.v1";
    j["chosen_hrf_index"] = fit.chosen_hrf_index;
    j["ridge_fraction"] = fit.ridge_fraction;
    j["report"] = {{"noise_pool_skipped", fit.report.noise_pool_skipped},
                   {"ridge_skipped", fit.report.ridge_skipped},
                   {"n_noise_pool", fit.report.n_noise_pool},
                   {"chosen_g", fit.report.chosen_g},
                   {"g_cv_scores", fit.report.g_cv_scores}};
    j["config"] = {{"max_g", fit.config.max_g},
                   {"ridge_fractions", fit.config.fractions()},
                   {"enable_ridge", fit.config.enable_ridge},
                   {"poly_degree", fit.config.poly_degree}};
    std::ofstream out(stem + ".json");
    ND_CHECK(out.good(), ArtifactError, "save_glm_fit: cannot open " << stem << ".json");
    out << j.dump(2) << "\n";
    ND_CHECK(out.good(), ArtifactError, "save_glm_fit: write failed for " << stem << ".json");
}

inline GlmFit load_glm_fit(const std::string& stem) {
    TensorArchive<double> ar = TensorArchive<double>::load(stem + ".ndar");
    GlmFit fit;
    fit.betas = ar.get("betas");
    fit.u = ar.get("u");
    fit.r2_cv = ar.get("r2_cv");
    if (ar.has("v")) fit.v = ar.get("v");

    std::ifstream in(stem + ".json");
    ND_CHECK(in.good(), ArtifactError, "load_glm_fit: cannot open " << stem << ".json");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ArtifactError(std::string("load_glm_fit: bad sidecar JSON: ") + e.what());
    }
    ND_CHECK(j.value("format", "") == std::string("neurodecode.glmfit.v1"), ArtifactError,
             "load_glm_fit: unknown sidecar format");
    fit.chosen_hrf_index = j.at("chosen_hrf_index").get<std::vector<int>>();
    fit.ridge_fraction = j.at("ridge_fraction").get<std::vector<double>>();
    const auto& rep = j.at("report");
    fit.report.noise_pool_skipped = rep.at("noise_pool_skipped").get<bool>();
    fit.report.ridge_skipped = rep.at("ridge_skipped").get<bool>();
    fit.report.n_noise_pool = rep.at("n_noise_pool").get<i64>();
    fit.report.chosen_g = rep.at("chosen_g").get<i64>();
    fit.report.g_cv_scores = rep.at("g_cv_scores").get<std::vector<double>>();
    const auto& cj = j.at("config");
    fit.config.max_g = cj.at("max_g").get<i64>();
    fit.config.ridge_fractions = cj.at("ridge_fractions").get<std::vector<double>>();
    fit.config.enable_ridge = cj.at("enable_ridge").get<bool>();
    fit.config.poly_degree = cj.at("poly_degree").get<i64>();
    ND_CHECK(static_cast<i64>(fit.chosen_hrf_index.size()) == fit.betas.dim(0), ArtifactError,
             "load_glm_fit: sidecar/tensor size mismatch");
    return fit;
}

}  // namespace nd::glm
