#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "neurodecode/glm.hpp"

using namespace nd;
using namespace nd::glm;

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

synth::SynthConfig small_clean_config() {
    synth::SynthConfig cfg;
    cfg.n_stimuli = 8;
    cfg.n_classes = 8;
    cfg.n_voxels = 20;
    cfg.n_sessions = 2;
    cfg.repeats = 2;
    cfg.image_size = 16;
    cfg.isi_tr = 6;
    cfg.warmup_tr = 4;
    cfg.tail_tr = 24;
    cfg.noise_sd = 0.0;
    cfg.drift_amp = 0.4;  // drift on: absorbed exactly by the Legendre block
    return cfg;
}

// One concatenated [V, T_total] matrix from the per-session BOLD blocks.
Tensor concat_bold(const synth::SynthDataset& ds) {
    i64 t_total = 0;
    for (const auto& b : ds.bold) t_total += b.dim(1);
    const i64 v = ds.bold[0].dim(0);
    Tensor out(Shape{v, t_total});
    i64 off = 0;
    for (const auto& b : ds.bold) {
        const i64 t = b.dim(1);
        for (i64 i = 0; i < v; ++i)
            for (i64 j = 0; j < t; ++j) out.at({i, off + j}) = b.at({i, j});
        off += t;
    }
    return out;
}

struct Fixture {
    synth::SynthDataset ds;
    Tensor bold;
    hrf::HrfLibrary lib;
};

Fixture make_fixture(const synth::SynthConfig& cfg, u64 seed) {
    Fixture f;
    Rng rng(seed);
    f.ds = synth::generate_dataset(cfg, rng);
    f.bold = concat_bold(f.ds);
    f.lib = hrf::make_library(cfg.tr);
    return f;
}

}  // namespace

// ------------------------------------------------------------- HRF library

TEST(GlmHrf, LibraryHasTwentyUnitPeakKernels) {
    auto lib = hrf::make_library(1.5);
    ASSERT_EQ(lib.kernels.size(), 20u);
    const i64 expect_len = static_cast<i64>(std::ceil(32.0 / 1.5)) + 1;
    for (const auto& k : lib.kernels) {
        ASSERT_EQ(k.numel(), expect_len);
        double mx = -1.0;
        i64 argmax = -1, n_at_max = 0;
        for (i64 i = 0; i < k.numel(); ++i) {
            const double x = k.v()[static_cast<size_t>(i)];
            if (x > mx) {
                mx = x;
                argmax = i;
                n_at_max = 1;
            } else if (x == mx) {
                ++n_at_max;
            }
        }
        EXPECT_EQ(mx, 1.0);          // unit peak, exact by construction
        EXPECT_EQ(n_at_max, 1);      // peaks once
        EXPECT_GT(argmax, 0);        // peak strictly after onset
        EXPECT_EQ(k.v()[0], 0.0);    // zero response at stimulus onset
    }
    // all twenty kernels pairwise distinct
    for (size_t a = 0; a < lib.kernels.size(); ++a)
        for (size_t b = a + 1; b < lib.kernels.size(); ++b) {
            double linf = 0.0;
            for (i64 i = 0; i < lib.kernels[a].numel(); ++i)
                linf = std::max(linf, std::abs(lib.kernels[a].v()[static_cast<size_t>(i)] -
                                               lib.kernels[b].v()[static_cast<size_t>(i)]));
            EXPECT_GT(linf, 1e-3) << a << " vs " << b;
        }
}

TEST(GlmHrf, AddResponseClipsAtBufferEnd) {
    auto lib = hrf::make_library(1.0);
    const Tensor& k = lib.kernels[0];
    std::vector<double> buf(10, 0.0);
    hrf::add_response(std::span<double>(buf), k, 7, 2.0);
    for (i64 i = 0; i < 7; ++i) EXPECT_EQ(buf[static_cast<size_t>(i)], 0.0);
    for (i64 i = 7; i < 10; ++i)
        EXPECT_EQ(buf[static_cast<size_t>(i)], 2.0 * k.v()[static_cast<size_t>(i - 7)]);
}

// ------------------------------------------------------------------ design

TEST(GlmDesign, IndicatorAndDriftInvariants) {
    auto f = make_fixture(small_clean_config(), 31);
    DesignMatrix d = make_design(f.ds);

    ASSERT_EQ(d.rows(), f.bold.dim(1));
    ASSERT_EQ(d.trials(), 16);  // 8 stimuli x 2 repeats
    for (i64 c = 0; c < d.trials(); ++c) {
        double sum = 0.0;
        for (i64 r = 0; r < d.rows(); ++r) {
            const double x = d.x.at({r, c});
            ASSERT_TRUE(x == 0.0 || x == 1.0);
            sum += x;
        }
        ASSERT_EQ(sum, 1.0);  // exactly one onset per trial column
        ASSERT_EQ(d.x.at({d.trial_onset_row[static_cast<size_t>(c)], c}), 1.0);
    }
    // drift columns mutually orthogonal within 1e-10
    const i64 pt = d.p.dim(1);
    for (i64 a = 0; a < pt; ++a)
        for (i64 b = a + 1; b < pt; ++b) {
            double dot = 0.0;
            for (i64 r = 0; r < d.rows(); ++r) dot += d.p.at({r, a}) * d.p.at({r, b});
            ASSERT_LT(std::abs(dot), 1e-10);
        }
    EXPECT_FALSE(d.g.defined());  // empty before Step 2
}

TEST(GlmDesign, RejectsBadTrials) {
    std::vector<std::vector<synth::Trial>> trials{{{0, 5}, {1, 5}}};  // duplicate onset
    EXPECT_THROW({ auto d = make_design(trials, {20}, 1.0, 2); (void)d; }, ConfigError);
    std::vector<std::vector<synth::Trial>> trials2{{{0, 25}}};  // onset outside session
    EXPECT_THROW({ auto d = make_design(trials2, {20}, 1.0, 1); (void)d; }, ConfigError);
}

// --------------------------------------------------------------- ols_solve

TEST(GlmOls, IdentityDesignReturnsY) {
    Rng rng(5);
    Tensor a(Shape{6, 6});
    for (i64 i = 0; i < 6; ++i) a.at({i, i}) = 1.0;
    Tensor y = Tensor::randn(Shape{6}, rng);
    Tensor x = ols_solve(a, y);
    for (i64 i = 0; i < 6; ++i) EXPECT_NEAR(x.v()[static_cast<size_t>(i)], y.v()[static_cast<size_t>(i)], 1e-12);
}

TEST(GlmOls, ConsistentSystemHasZeroResidual) {
    Rng rng(6);
    Tensor a = Tensor::randn(Shape{30, 4}, rng);
    Tensor w = Tensor::randn(Shape{4}, rng);
    Tensor y(Shape{30});
    for (i64 i = 0; i < 30; ++i) {
        double s = 0.0;
        for (i64 j = 0; j < 4; ++j) s += a.at({i, j}) * w.v()[static_cast<size_t>(j)];
        y.v()[static_cast<size_t>(i)] = s;
    }
    Tensor x = ols_solve(a, y);
    double resid = 0.0;
    for (i64 i = 0; i < 30; ++i) {
        double s = 0.0;
        for (i64 j = 0; j < 4; ++j) s += a.at({i, j}) * x.v()[static_cast<size_t>(j)];
        resid = std::max(resid, std::abs(s - y.v()[static_cast<size_t>(i)]));
    }
    EXPECT_LE(resid, 1e-10);
}

TEST(GlmOls, MatchesNormalEquationOracle) {
    Rng rng(7);
    Tensor a = Tensor::randn(Shape{50, 5}, rng);
    Tensor y = Tensor::randn(Shape{50}, rng);
    Tensor x = ols_solve(a, y);
    // explicit (A^T A)^{-1} A^T y oracle
    Tensor ata = la::mat_tmul(a, a);
    Tensor aty(Shape{5, 1});
    for (i64 j = 0; j < 5; ++j) {
        double s = 0.0;
        for (i64 i = 0; i < 50; ++i) s += a.at({i, j}) * y.v()[static_cast<size_t>(i)];
        aty.at({j, 0}) = s;
    }
    Tensor oracle = la::cholesky_solve(ata, aty);
    for (i64 j = 0; j < 5; ++j)
        EXPECT_NEAR(x.v()[static_cast<size_t>(j)], oracle.at({j, 0}), 1e-9);
}

TEST(GlmOls, ResidualOrthogonalToDesign) {
    Rng rng(8);
    Tensor a = Tensor::randn(Shape{40, 6}, rng);
    Tensor y = Tensor::randn(Shape{40}, rng);
    Tensor x = ols_solve(a, y);
    std::vector<double> r(40);
    double rnorm = 0.0;
    for (i64 i = 0; i < 40; ++i) {
        double s = 0.0;
        for (i64 j = 0; j < 6; ++j) s += a.at({i, j}) * x.v()[static_cast<size_t>(j)];
        r[static_cast<size_t>(i)] = y.v()[static_cast<size_t>(i)] - s;
        rnorm += r[static_cast<size_t>(i)] * r[static_cast<size_t>(i)];
    }
    rnorm = std::sqrt(rnorm);
    for (i64 j = 0; j < 6; ++j) {
        double dot = 0.0, cnorm = 0.0;
        for (i64 i = 0; i < 40; ++i) {
            dot += a.at({i, j}) * r[static_cast<size_t>(i)];
            cnorm += a.at({i, j}) * a.at({i, j});
        }
        EXPECT_LE(std::abs(dot), 1e-8 * std::max(1.0, std::sqrt(cnorm) * rnorm));
    }
}

TEST(GlmOls, RankDeficientNamesDeficientColumnCount) {
    Rng rng(9);
    Tensor a = Tensor::randn(Shape{20, 4}, rng);
    for (i64 i = 0; i < 20; ++i) a.at({i, 3}) = a.at({i, 1});  // duplicate one column
    Tensor y = Tensor::randn(Shape{20}, rng);
    try {
        Tensor x = ols_solve(a, y);
        (void)x;
        FAIL() << "expected SolverError";
    } catch (const SolverError& e) {
        EXPECT_NE(std::string(e.what()).find("1 of 4"), std::string::npos) << e.what();
    }
}

// ---------------------------------------------------------- pca_components

TEST(GlmPca, RankOneMatrixRecovered) {
    Rng rng(10);
    Tensor u = Tensor::randn(Shape{25}, rng);
    Tensor w = Tensor::randn(Shape{6}, rng);
    Tensor x(Shape{25, 6});
    for (i64 i = 0; i < 25; ++i)
        for (i64 j = 0; j < 6; ++j)
            x.at({i, j}) = u.v()[static_cast<size_t>(i)] * w.v()[static_cast<size_t>(j)];
    Tensor c = pca_components(x, 1);
    // centered columns span {u - mean(u)}
    double umean = 0.0;
    for (double v : u.v()) umean += v;
    umean /= 25.0;
    double dot = 0.0, nu = 0.0, nc = 0.0;
    for (i64 i = 0; i < 25; ++i) {
        const double uc = u.v()[static_cast<size_t>(i)] - umean;
        dot += uc * c.at({i, 0});
        nu += uc * uc;
        nc += c.at({i, 0}) * c.at({i, 0});
    }
    EXPECT_GT(std::abs(dot) / std::sqrt(nu * nc), 1.0 - 1e-10);
}

TEST(GlmPca, VarianceOrderingAndCovarianceOracle) {
    Rng rng(11);
    Tensor x = Tensor::randn(Shape{40, 8}, rng);
    Tensor c = pca_components(x, 4);

    // column-centered copy for the oracle
    Tensor xc = x.clone();
    for (i64 j = 0; j < 8; ++j) {
        double m = 0.0;
        for (i64 i = 0; i < 40; ++i) m += xc.at({i, j});
        m /= 40.0;
        for (i64 i = 0; i < 40; ++i) xc.at({i, j}) -= m;
    }
    // variance along each returned component is non-increasing
    std::vector<double> variance(4, 0.0);
    for (i64 k = 0; k < 4; ++k) {
        for (i64 j = 0; j < 8; ++j) {
            double proj = 0.0;
            for (i64 i = 0; i < 40; ++i) proj += xc.at({i, j}) * c.at({i, k});
            variance[static_cast<size_t>(k)] += proj * proj;
        }
    }
    for (i64 k = 1; k < 4; ++k)
        EXPECT_LE(variance[static_cast<size_t>(k)], variance[static_cast<size_t>(k - 1)] + 1e-12);

    // against the covariance eigendecomposition: c_k ∝ Xc v_k
    Tensor cov = la::mat_tmul(xc, xc);
    auto eig = la::symmetric_eigen(cov);
    for (i64 k = 0; k < 4; ++k) {
        std::vector<double> ref(40, 0.0);
        double nrm = 0.0;
        for (i64 i = 0; i < 40; ++i) {
            double s = 0.0;
            for (i64 j = 0; j < 8; ++j) s += xc.at({i, j}) * eig.vectors.at({j, k});
            ref[static_cast<size_t>(i)] = s;
            nrm += s * s;
        }
        nrm = std::sqrt(nrm);
        // fix sign by the largest-|.| entry
        double sign = 0.0;
        for (i64 i = 0; i < 40; ++i)
            if (std::abs(ref[static_cast<size_t>(i)]) > 1e-12) {
                sign = (ref[static_cast<size_t>(i)] > 0) == (c.at({i, k}) > 0) ? 1.0 : -1.0;
                break;
            }
        for (i64 i = 0; i < 40; ++i)
            EXPECT_NEAR(c.at({i, k}), sign * ref[static_cast<size_t>(i)] / nrm, 1e-8);
    }
}

TEST(GlmPca, TooManyComponentsRejected) {
    Tensor x(Shape{5, 3});
    EXPECT_THROW({ auto c = pca_components(x, 4); (void)c; }, DimensionError);
}

// ------------------------------------------------------------ fit_glmsingle

TEST(GlmFitTest, NoiselessRecoveryAndHrfMatch) {
    auto f = make_fixture(small_clean_config(), 101);
    DesignMatrix d = make_design(f.ds);
    GlmConfig cfg;
    GlmFit fit = fit_glmsingle(f.bold, d, f.lib, cfg);

    // chosen HRF matches the generating kernel for every voxel
    for (i64 v = 0; v < 20; ++v)
        EXPECT_EQ(fit.chosen_hrf_index[static_cast<size_t>(v)], f.ds.model.hrf_index[static_cast<size_t>(v)])
            << "voxel " << v;
    // betas equal ground truth within 1e-6
    for (i64 v = 0; v < 20; ++v)
        for (i64 j = 0; j < d.trials(); ++j) {
            const i64 stim = d.trial_stimulus[static_cast<size_t>(j)];
            EXPECT_NEAR(fit.betas.at({v, j}), f.ds.true_amplitudes.at({stim, v}), 1e-6);
        }
    // clean data: every voxel predicts, so no noise pool and Step 2 is skipped
    EXPECT_TRUE(fit.report.noise_pool_skipped);
    EXPECT_EQ(fit.report.chosen_g, 0);
    EXPECT_FALSE(d.g.defined());
    EXPECT_FALSE(fit.v.defined());
    for (i64 v = 0; v < 20; ++v) {
        EXPECT_NEAR(fit.r2_cv.v()[static_cast<size_t>(v)], 1.0, 1e-9);
        EXPECT_EQ(fit.ridge_fraction[static_cast<size_t>(v)], 0.0);  // repeats agree exactly
    }
}

TEST(GlmFitTest, SnrHalfRecoversBetasAtMedianR95) {
    synth::SynthConfig cfg;
    cfg.n_stimuli = 8;
    cfg.n_classes = 8;
    cfg.n_voxels = 30;
    cfg.n_sessions = 8;
    cfg.repeats = 8;
    cfg.image_size = 16;
    cfg.isi_tr = 10;
    cfg.warmup_tr = 4;
    cfg.tail_tr = 20;
    cfg.snr = 0.5;
    auto f = make_fixture(cfg, 202);
    DesignMatrix d = make_design(f.ds);
    GlmConfig gcfg;
    GlmFit fit = fit_glmsingle(f.bold, d, f.lib, gcfg);

    std::vector<double> r_per_voxel;
    for (i64 v = 0; v < cfg.n_voxels; ++v) {
        // average the repeats to per-condition estimates
        std::vector<double> est(static_cast<size_t>(cfg.n_stimuli), 0.0);
        std::vector<double> cnt(static_cast<size_t>(cfg.n_stimuli), 0.0);
        for (i64 j = 0; j < d.trials(); ++j) {
            est[static_cast<size_t>(d.trial_stimulus[static_cast<size_t>(j)])] += fit.betas.at({v, j});
            cnt[static_cast<size_t>(d.trial_stimulus[static_cast<size_t>(j)])] += 1.0;
        }
        std::vector<double> truth(static_cast<size_t>(cfg.n_stimuli));
        for (i64 s = 0; s < cfg.n_stimuli; ++s) {
            est[static_cast<size_t>(s)] /= cnt[static_cast<size_t>(s)];
            truth[static_cast<size_t>(s)] = f.ds.true_amplitudes.at({s, v});
        }
        r_per_voxel.push_back(la::pearson(est, truth));
    }
    EXPECT_GE(median(r_per_voxel), 0.95);
}

TEST(GlmFitTest, ShuffledDesignIsNegativeControl) {
    synth::SynthConfig cfg;
    cfg.n_stimuli = 12;
    cfg.n_classes = 12;
    cfg.n_voxels = 20;
    cfg.n_sessions = 4;
    cfg.repeats = 2;
    cfg.image_size = 16;
    cfg.snr = 1.0;
    auto f = make_fixture(cfg, 303);

    // scramble the onset rows: trial indicators land at random timepoints, so
    // the design no longer lines up with the evoked responses at all
    auto shuffled = f.ds.trials;
    Rng rng(99);
    std::vector<i64> session_len;
    for (const auto& b : f.ds.bold) session_len.push_back(b.dim(1));
    for (size_t s = 0; s < shuffled.size(); ++s) {
        std::vector<i64> rows(static_cast<size_t>(session_len[s]));
        for (i64 r = 0; r < session_len[s]; ++r) rows[static_cast<size_t>(r)] = r;
        rng.shuffle(rows);
        rows.resize(shuffled[s].size());
        std::sort(rows.begin(), rows.end());
        for (size_t k = 0; k < shuffled[s].size(); ++k) shuffled[s][k].onset_tr = rows[k];
    }
    DesignMatrix d = make_design(shuffled, session_len, cfg.tr, cfg.n_stimuli);
    GlmConfig gcfg;
    GlmFit fit = fit_glmsingle(f.bold, d, f.lib, gcfg);

    std::vector<double> r2(fit.r2_cv.v().begin(), fit.r2_cv.v().end());
    EXPECT_LE(median(r2), 0.0);
}

TEST(GlmFitTest, ConstantOffsetChangesOnlyDriftWeights) {
    auto f = make_fixture(small_clean_config(), 404);
    DesignMatrix d1 = make_design(f.ds);
    DesignMatrix d2 = make_design(f.ds);
    GlmConfig cfg;
    GlmFit fit1 = fit_glmsingle(f.bold, d1, f.lib, cfg);
    Tensor shifted = f.bold.clone();
    for (auto& x : shifted.v()) x += 7.25;
    GlmFit fit2 = fit_glmsingle(shifted, d2, f.lib, cfg);

    double beta_scale = 0.0;
    for (double b : fit1.betas.v()) beta_scale = std::max(beta_scale, std::abs(b));
    for (i64 i = 0; i < fit1.betas.numel(); ++i)
        EXPECT_NEAR(fit2.betas.v()[static_cast<size_t>(i)], fit1.betas.v()[static_cast<size_t>(i)],
                    1e-8 * std::max(1.0, beta_scale));
    for (i64 v = 0; v < 20; ++v) {
        EXPECT_EQ(fit2.chosen_hrf_index[static_cast<size_t>(v)],
                  fit1.chosen_hrf_index[static_cast<size_t>(v)]);
        EXPECT_NEAR(fit2.r2_cv.v()[static_cast<size_t>(v)], fit1.r2_cv.v()[static_cast<size_t>(v)], 1e-8);
    }
    // the offset lands in u (per-session constant columns), nowhere else
    double u_shift = 0.0;
    for (i64 i = 0; i < fit1.u.numel(); ++i)
        u_shift = std::max(u_shift, std::abs(fit2.u.v()[static_cast<size_t>(i)] -
                                             fit1.u.v()[static_cast<size_t>(i)]));
    EXPECT_GT(u_shift, 1.0);
}

TEST(GlmFitTest, ScalingBoldScalesBetasExactlyWithoutRidge) {
    synth::SynthConfig cfg;
    cfg.n_stimuli = 10;
    cfg.n_classes = 10;
    cfg.n_voxels = 15;
    cfg.n_sessions = 3;
    cfg.repeats = 2;
    cfg.image_size = 16;
    cfg.snr = 1.5;  // noise on: exact scaling must hold regardless of data
    auto f = make_fixture(cfg, 505);
    DesignMatrix d1 = make_design(f.ds);
    DesignMatrix d2 = make_design(f.ds);
    GlmConfig gcfg;
    gcfg.enable_ridge = false;
    GlmFit fit1 = fit_glmsingle(f.bold, d1, f.lib, gcfg);
    Tensor doubled = f.bold.clone();
    for (auto& x : doubled.v()) x *= 2.0;  // exact in floating point
    GlmFit fit2 = fit_glmsingle(doubled, d2, f.lib, gcfg);

    for (i64 v = 0; v < cfg.n_voxels; ++v)
        ASSERT_EQ(fit2.chosen_hrf_index[static_cast<size_t>(v)],
                  fit1.chosen_hrf_index[static_cast<size_t>(v)]);
    for (i64 i = 0; i < fit1.betas.numel(); ++i)
        ASSERT_EQ(fit2.betas.v()[static_cast<size_t>(i)],
                  2.0 * fit1.betas.v()[static_cast<size_t>(i)]);
}

TEST(GlmFitTest, LargerShrinkageNeverGrowsBetaNorm) {
    synth::SynthConfig cfg;
    cfg.n_stimuli = 10;
    cfg.n_classes = 10;
    cfg.n_voxels = 12;
    cfg.n_sessions = 3;
    cfg.repeats = 2;
    cfg.image_size = 16;
    cfg.snr = 1.0;
    auto f = make_fixture(cfg, 606);
    DesignMatrix d1 = make_design(f.ds);
    DesignMatrix d2 = make_design(f.ds);
    GlmConfig lo, hi;
    lo.ridge_fractions = {0.2};
    hi.ridge_fractions = {0.6};
    GlmFit fit_lo = fit_glmsingle(f.bold, d1, f.lib, lo);
    GlmFit fit_hi = fit_glmsingle(f.bold, d2, f.lib, hi);
    for (i64 v = 0; v < cfg.n_voxels; ++v) {
        EXPECT_EQ(fit_lo.ridge_fraction[static_cast<size_t>(v)], 0.2);
        EXPECT_EQ(fit_hi.ridge_fraction[static_cast<size_t>(v)], 0.6);
        double lo_norm = 0.0, hi_norm = 0.0;
        for (i64 j = 0; j < fit_lo.betas.dim(1); ++j) {
            lo_norm += fit_lo.betas.at({v, j}) * fit_lo.betas.at({v, j});
            hi_norm += fit_hi.betas.at({v, j}) * fit_hi.betas.at({v, j});
        }
        EXPECT_LE(hi_norm, lo_norm + 1e-12);
    }
}

TEST(GlmFitTest, HeldOutPredictionsIgnoreHeldOutData) {
    synth::SynthConfig cfg;
    cfg.n_stimuli = 10;
    cfg.n_classes = 10;
    cfg.n_voxels = 10;
    cfg.n_sessions = 3;
    cfg.repeats = 2;
    cfg.image_size = 16;
    cfg.snr = 1.0;
    auto f = make_fixture(cfg, 707);
    DesignMatrix d = make_design(f.ds);
    std::vector<int> chosen(10, 0);

    CvResult clean = cv_condition(f.bold, d, f.lib, chosen, false);

    // poison every timepoint of session 1; its fold's predictions are fitted
    // on sessions 0 and 2 only, so they must not move at all
    Tensor poisoned = f.bold.clone();
    const i64 start = d.session_start(1);
    const i64 len = d.session_len[1];
    for (i64 v = 0; v < 10; ++v)
        for (i64 t = 0; t < len; ++t) poisoned.at({v, start + t}) = 1e6 + v * 1000.0 + t;
    CvResult dirty = cv_condition(poisoned, d, f.lib, chosen, false);

    for (i64 i = 0; i < clean.pred[1].numel(); ++i)
        ASSERT_EQ(dirty.pred[1].v()[static_cast<size_t>(i)],
                  clean.pred[1].v()[static_cast<size_t>(i)]);
    // sanity: the other folds' predictions do change (their training saw it)
    double moved = 0.0;
    for (i64 i = 0; i < clean.pred[0].numel(); ++i)
        moved = std::max(moved, std::abs(dirty.pred[0].v()[static_cast<size_t>(i)] -
                                         clean.pred[0].v()[static_cast<size_t>(i)]));
    EXPECT_GT(moved, 1e-6);
}

TEST(GlmFitTest, SingleSessionRejectedWithGuidance) {
    synth::SynthConfig cfg;
    cfg.n_stimuli = 8;
    cfg.n_classes = 8;
    cfg.n_voxels = 10;
    cfg.n_sessions = 1;
    cfg.repeats = 1;
    cfg.image_size = 16;
    auto f = make_fixture(cfg, 808);
    DesignMatrix d = make_design(f.ds);
    GlmConfig gcfg;
    try {
        GlmFit fit = fit_glmsingle(f.bold, d, f.lib, gcfg);
        (void)fit;
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("2 sessions"), std::string::npos) << e.what();
    }
}

TEST(GlmFitTest, SharedNoiseSelectsRegressorsAndImprovesCv) {
    // half the voxels carry task signal plus a shared nuisance timecourse,
    // the other half only the nuisance: the latter form the noise pool and
    // PCA recovers the shared component
    synth::SynthConfig cfg;
    cfg.n_stimuli = 10;
    cfg.n_classes = 10;
    cfg.n_voxels = 16;
    cfg.n_sessions = 3;
    cfg.repeats = 3;
    cfg.image_size = 16;
    cfg.noise_sd = 0.0;
    cfg.drift_amp = 0.0;
    auto f = make_fixture(cfg, 909);

    double sig_sd = 0.0;
    for (double x : f.bold.v()) sig_sd += x * x;
    sig_sd = std::sqrt(sig_sd / static_cast<double>(f.bold.numel()));

    Rng noise_rng(4242);
    Tensor bold = f.bold.clone();
    const i64 t_total = bold.dim(1);
    std::vector<double> shared(static_cast<size_t>(t_total));
    for (auto& x : shared) x = noise_rng.gauss(0.0, 2.0 * sig_sd);
    for (i64 v = 0; v < 16; ++v) {
        const double load = 0.5 + 0.1 * static_cast<double>(v);  // varied loadings
        for (i64 t = 0; t < t_total; ++t) {
            if (v >= 8) bold.at({v, t}) = load * shared[static_cast<size_t>(t)];  // pure noise voxel
            else bold.at({v, t}) += load * shared[static_cast<size_t>(t)];
        }
    }

    DesignMatrix d = make_design(f.ds);
    GlmConfig gcfg;
    GlmFit fit = fit_glmsingle(bold, d, f.lib, gcfg);

    EXPECT_FALSE(fit.report.noise_pool_skipped);
    EXPECT_GE(fit.report.n_noise_pool, 6);
    EXPECT_GE(fit.report.chosen_g, 1);
    ASSERT_TRUE(d.g.defined());
    EXPECT_EQ(d.g.dim(1), 3 * fit.report.chosen_g);
    ASSERT_TRUE(fit.v.defined());
    // the selected count strictly improved mean signal-voxel CV R^2 over g=0
    ASSERT_GT(fit.report.g_cv_scores.size(), 1u);
    EXPECT_GT(fit.report.g_cv_scores[static_cast<size_t>(fit.report.chosen_g)],
              fit.report.g_cv_scores[0]);
}

TEST(GlmFitTest, PersistedFitRoundTrips) {
    auto f = make_fixture(small_clean_config(), 111);
    DesignMatrix d = make_design(f.ds);
    GlmConfig cfg;
    GlmFit fit = fit_glmsingle(f.bold, d, f.lib, cfg);

    const std::string stem =
        (std::filesystem::path(::testing::TempDir()) / "glmfit_roundtrip").string();
    save_glm_fit(fit, stem);
    GlmFit back = load_glm_fit(stem);

    ASSERT_EQ(back.betas.shape(), fit.betas.shape());
    for (i64 i = 0; i < fit.betas.numel(); ++i)
        ASSERT_EQ(back.betas.v()[static_cast<size_t>(i)], fit.betas.v()[static_cast<size_t>(i)]);
    for (i64 i = 0; i < fit.u.numel(); ++i)
        ASSERT_EQ(back.u.v()[static_cast<size_t>(i)], fit.u.v()[static_cast<size_t>(i)]);
    ASSERT_EQ(back.v.defined(), fit.v.defined());
    ASSERT_EQ(back.chosen_hrf_index, fit.chosen_hrf_index);
    ASSERT_EQ(back.ridge_fraction, fit.ridge_fraction);
    ASSERT_EQ(back.report.noise_pool_skipped, fit.report.noise_pool_skipped);
    ASSERT_EQ(back.report.chosen_g, fit.report.chosen_g);
    ASSERT_EQ(back.config.max_g, fit.config.max_g);
    ASSERT_EQ(back.config.enable_ridge, fit.config.enable_ridge);
}
