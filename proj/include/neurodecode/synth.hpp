#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "hrf.hpp"
#include "image.hpp"
#include "linalg.hpp"
#include "parallel.hpp"
#include "tensor.hpp"

// Synthetic stand-in for the scanning setup: parametric scene stimuli with
// template captions, a documented image-feature forward model producing
// voxel amplitudes, session schedules, and BOLD timeseries with known
// ground truth per-trial amplitudes.

namespace nd::synth {

// ------------------------------------------------------------- vocabulary

inline const std::vector<std::string>& vocabulary() {
    static const std::vector<std::string> v = {
        "<bos>",   "<eos>",  "a",      "bright",   "dark",  "red",    "green",
        "blue",    "yellow", "circle", "square",   "triangle", "cross",
        "on",      "plain",  "wavy",   "striped",  "background"};
    return v;
}

inline i64 token_id(const std::string& word) {
    const auto& v = vocabulary();
    for (size_t i = 0; i < v.size(); ++i)
        if (v[i] == word) return static_cast<i64>(i);
    throw ConfigError("unknown vocabulary word: " + word);
}

// ------------------------------------------------------------------ types

struct Stimulus {
    Tensor image;               // [3, H, W] in [0,1]
    std::vector<i64> caption;   // token ids, <bos> ... <eos>
    i64 semantic_label = 0;
    i64 stimulus_id = 0;
};

struct Trial {
    i64 stimulus_id = 0;
    i64 onset_tr = 0;
};

struct SessionSchedule {
    std::vector<std::pair<i64, double>> onsets;  // (stimulus_id, onset seconds), ascending
    double tr = 1.5;
    double duration = 0.0;  // seconds
};

struct VoxelForwardModel {
    Tensor weights;                 // [V, F] image-feature -> amplitude map
    std::vector<int> hrf_index;     // per-voxel kernel choice in the shared library
    std::vector<double> noise_sd;   // per voxel
    i64 drift_degree = 0;
    std::vector<Tensor> drift_coef; // per session [V, degree+1]
};

struct BetaRecord {
    Tensor beta;  // [V]
    i64 stimulus_id = 0;
    i64 subject_id = 0;
    bool normalized = false;
};

struct SynthConfig {
    i64 n_stimuli = 200;
    i64 image_size = 64;  // H = W
    i64 n_voxels = 500;
    i64 n_sessions = 4;
    i64 repeats = 2;      // presentations per stimulus, in distinct sessions
    double tr = 1.5;      // seconds
    i64 isi_tr = 5;       // onset spacing in TRs
    i64 warmup_tr = 4;
    i64 tail_tr = 16;
    double snr = 2.0;       // per-voxel signal sd / noise sd; <= 0 means noiseless
    double noise_sd = -1.0; // >= 0 fixes the same noise sd on every voxel ("0" = clean)
    double drift_amp = 0.3;
    i64 n_classes = 16;
    u64 seed = 1;
};

struct SynthDataset {
    SynthConfig cfg;
    std::vector<Stimulus> stimuli;
    std::vector<SessionSchedule> schedules;
    std::vector<std::vector<Trial>> trials;  // per session, onset order
    VoxelForwardModel model;
    std::vector<Tensor> bold;        // per session [V, T]
    Tensor true_amplitudes;          // [n_stimuli, V] — the ground-truth betas
    hrf::HrfLibrary hrf_library;
};

// ----------------------------------------------------------------- scenes

// Class id encodes (shape, color): 4 shapes x up to 8 colors.
inline constexpr int kNumShapes = 4;
inline constexpr const char* kShapeNames[4] = {"circle", "square", "triangle", "cross"};
inline constexpr const char* kColorNames[4] = {"red", "green", "blue", "yellow"};
inline constexpr double kColorRgb[4][3] = {
    {0.85, 0.15, 0.12}, {0.15, 0.75, 0.20}, {0.15, 0.25, 0.85}, {0.90, 0.85, 0.15}};
inline constexpr const char* kTextureNames[3] = {"plain", "wavy", "striped"};

// Deterministic scene: colored shape over a textured background. The rng
// drives nuisance variation only (position, size, texture, brightness).
inline Stimulus make_stimulus(i64 stimulus_id, i64 semantic_label, i64 image_size, Rng& rng) {
    const int shape = static_cast<int>(semantic_label % kNumShapes);
    const int color = static_cast<int>((semantic_label / kNumShapes) % 4);
    const int texture = static_cast<int>(rng.below(3));
    const bool bright = rng.uniform() < 0.5;
    const double bscale = bright ? 1.0 : 0.62;

    const i64 hw = image_size;
    Tensor im(Shape{3, hw, hw});
    auto v = im.v();

    // background: muted base + optional grating
    const double base[3] = {0.35 + 0.2 * rng.uniform(), 0.35 + 0.2 * rng.uniform(),
                            0.35 + 0.2 * rng.uniform()};
    const double tex_amp = texture == 0 ? 0.0 : 0.12;
    const double fx = texture == 2 ? 0.0 : 2.0 + 3.0 * rng.uniform();
    const double fy = texture == 2 ? 4.0 + 3.0 * rng.uniform() : 2.0 + 3.0 * rng.uniform();
    const double phase = rng.uniform(0.0, 6.283185307179586);
    for (i64 y = 0; y < hw; ++y)
        for (i64 x = 0; x < hw; ++x) {
            const double g =
                tex_amp *
                std::sin(6.283185307179586 * (fx * x + fy * y) / static_cast<double>(hw) + phase);
            for (i64 c = 0; c < 3; ++c)
                v[(c * hw + y) * hw + x] = std::clamp(base[c] + g, 0.0, 1.0);
        }

    // shape geometry with jitter
    const double cx = hw * (0.38 + 0.24 * rng.uniform());
    const double cy = hw * (0.38 + 0.24 * rng.uniform());
    const double r = hw * (0.18 + 0.10 * rng.uniform());
    auto inside = [&](double px, double py) {
        const double dx = px - cx, dy = py - cy;
        switch (shape) {
            case 0: return dx * dx + dy * dy <= r * r;
            case 1: return std::abs(dx) <= r * 0.9 && std::abs(dy) <= r * 0.9;
            case 2:  // upward triangle
                return dy <= r * 0.8 && dy >= -r * 0.8 &&
                       std::abs(dx) <= (dy + r * 0.8) * 0.6;
            default:  // cross
                return (std::abs(dx) <= r * 0.33 && std::abs(dy) <= r) ||
                       (std::abs(dy) <= r * 0.33 && std::abs(dx) <= r);
        }
    };
    for (i64 y = 0; y < hw; ++y)
        for (i64 x = 0; x < hw; ++x)
            if (inside(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5))
                for (i64 c = 0; c < 3; ++c)
                    v[(c * hw + y) * hw + x] = std::clamp(kColorRgb[color][c] * bscale, 0.0, 1.0);

    Stimulus s;
    s.image = std::move(im);
    s.semantic_label = semantic_label;
    s.stimulus_id = stimulus_id;
    s.caption = {token_id("<bos>"),       token_id("a"),
                 token_id(bright ? "bright" : "dark"), token_id(kColorNames[color]),
                 token_id(kShapeNames[shape]),         token_id("on"),
                 token_id("a"),                        token_id(kTextureNames[texture]),
                 token_id("background"),               token_id("<eos>")};
    return s;
}

// -------------------------------------------------------------- features

// Fixed documented feature map: 4x4 average-pooled pixels per channel (48)
// + 4x4 luminance edge energy (16) + channel means (3) = 67 dims.
inline constexpr i64 kFeatureGrid = 4;
inline constexpr i64 kFeatureDim = 3 * kFeatureGrid * kFeatureGrid + kFeatureGrid * kFeatureGrid + 3;

inline Tensor image_features(const Tensor& image) {
    ND_CHECK(image.rank() == 3 && image.dim(0) == 3, DimensionError,
             "image_features: expects [3,H,W]");
    const i64 h = image.dim(1), w = image.dim(2);
    ND_CHECK(h >= kFeatureGrid && w >= kFeatureGrid, DimensionError,
             "image_features: image smaller than feature grid");
    Tensor f(Shape{kFeatureDim});
    auto fv = f.v();
    auto iv = image.v();
    i64 idx = 0;
    // pooled pixels
    for (i64 c = 0; c < 3; ++c)
        for (i64 gy = 0; gy < kFeatureGrid; ++gy)
            for (i64 gx = 0; gx < kFeatureGrid; ++gx) {
                const i64 y0 = gy * h / kFeatureGrid, y1 = (gy + 1) * h / kFeatureGrid;
                const i64 x0 = gx * w / kFeatureGrid, x1 = (gx + 1) * w / kFeatureGrid;
                double acc = 0.0;
                for (i64 y = y0; y < y1; ++y)
                    for (i64 x = x0; x < x1; ++x) acc += iv[(c * h + y) * w + x];
                fv[idx++] = acc / static_cast<double>((y1 - y0) * (x1 - x0));
            }
    // edge energy of luminance
    Tensor lum = img::luminance(image);
    auto lv = lum.v();
    for (i64 gy = 0; gy < kFeatureGrid; ++gy)
        for (i64 gx = 0; gx < kFeatureGrid; ++gx) {
            const i64 y0 = gy * h / kFeatureGrid, y1 = (gy + 1) * h / kFeatureGrid;
            const i64 x0 = gx * w / kFeatureGrid, x1 = (gx + 1) * w / kFeatureGrid;
            double acc = 0.0;
            i64 count = 0;
            for (i64 y = y0; y < y1; ++y)
                for (i64 x = x0; x < x1; ++x) {
                    const double dx = x + 1 < w ? lv[y * w + x + 1] - lv[y * w + x] : 0.0;
                    const double dy = y + 1 < h ? lv[(y + 1) * w + x] - lv[y * w + x] : 0.0;
                    acc += std::abs(dx) + std::abs(dy);
                    ++count;
                }
            fv[idx++] = acc / static_cast<double>(count);
        }
    // channel means
    const i64 plane = h * w;
    for (i64 c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (i64 p = 0; p < plane; ++p) acc += iv[c * plane + p];
        fv[idx++] = acc / static_cast<double>(plane);
    }
    return f;
}

// --------------------------------------------------------------- legendre

// Legendre polynomial values on n evenly spaced points over [-1, 1],
// then discretely orthonormalized (Gram-Schmidt) so columns are exactly
// orthogonal on the sample grid.
inline Tensor legendre_columns(i64 n, i64 degree) {
    ND_CHECK(n >= degree + 1, DimensionError, "legendre_columns: too few points");
    Tensor p(Shape{n, degree + 1});
    auto pv = p.v();
    const i64 cols = degree + 1;
    for (i64 i = 0; i < n; ++i) {
        const double x = n == 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(i) / (n - 1);
        double pk2 = 1.0, pk1 = x;
        for (i64 d = 0; d <= degree; ++d) {
            double val;
            if (d == 0)
                val = 1.0;
            else if (d == 1)
                val = x;
            else {
                val = ((2.0 * d - 1.0) * x * pk1 - (d - 1.0) * pk2) / static_cast<double>(d);
                pk2 = pk1;
                pk1 = val;
            }
            pv[i * cols + d] = val;
        }
    }
    // modified Gram-Schmidt for exact discrete orthogonality
    for (i64 c = 0; c < cols; ++c) {
        for (i64 prev = 0; prev < c; ++prev) {
            double dot = 0.0;
            for (i64 i = 0; i < n; ++i) dot += pv[i * cols + c] * pv[i * cols + prev];
            for (i64 i = 0; i < n; ++i) pv[i * cols + c] -= dot * pv[i * cols + prev];
        }
        double nrm = 0.0;
        for (i64 i = 0; i < n; ++i) nrm += pv[i * cols + c] * pv[i * cols + c];
        nrm = std::sqrt(nrm);
        ND_CHECK(nrm > 1e-12, NumericError, "legendre_columns: degenerate column");
        for (i64 i = 0; i < n; ++i) pv[i * cols + c] /= nrm;
    }
    return p;
}

inline i64 drift_degree_for(double duration_seconds) {
    // degree = floor(duration / 120 s) + 1, capped at 4
    return std::min<i64>(4, static_cast<i64>(duration_seconds / 120.0) + 1);
}

// ------------------------------------------------------------- generation

inline SynthDataset generate_dataset(const SynthConfig& cfg, Rng& rng) {
    // degenerate single-voxel / single-stimulus configs stay legal as oracles;
    // realistic V >= 10 is enforced where pipeline presets are validated
    ND_CHECK(cfg.n_stimuli >= 1 && cfg.n_voxels >= 1 && cfg.n_sessions >= 1, ConfigError,
             "generate_dataset: need >= 1 stimulus, voxel, and session");
    ND_CHECK(cfg.repeats >= 1 && cfg.repeats <= cfg.n_sessions, ConfigError,
             "generate_dataset: repeats must be in [1, n_sessions]");
    ND_CHECK(cfg.isi_tr >= 1, ConfigError, "generate_dataset: inter-stimulus interval >= 1 TR");
    ND_CHECK(cfg.warmup_tr >= 0 && cfg.tail_tr >= 0 && cfg.tr > 0.0, ConfigError,
             "generate_dataset: warmup/tail must be >= 0 and TR positive");
    ND_CHECK(cfg.image_size >= 8, ConfigError, "generate_dataset: image_size must be >= 8");
    ND_CHECK(cfg.n_classes >= 8 && cfg.n_classes <= 32, ConfigError,
             "generate_dataset: n_classes must lie in [8, 32]");

    SynthDataset ds;
    ds.cfg = cfg;
    ds.hrf_library = hrf::make_library(cfg.tr);

    // stimuli (per-stimulus child streams irrespective of generation order)
    Rng stim_master = rng.child(1);
    ds.stimuli.resize(static_cast<size_t>(cfg.n_stimuli));
    for (i64 i = 0; i < cfg.n_stimuli; ++i) {
        Rng r = stim_master.child(static_cast<u64>(i));
        ds.stimuli[static_cast<size_t>(i)] =
            make_stimulus(i, i % cfg.n_classes, cfg.image_size, r);
    }

    // forward model
    Rng model_rng = rng.child(2);
    ds.model.weights = Tensor::randn(Shape{cfg.n_voxels, kFeatureDim}, model_rng, 0.0,
                                     1.0 / std::sqrt(static_cast<double>(kFeatureDim)));
    ds.model.hrf_index.resize(static_cast<size_t>(cfg.n_voxels));
    for (auto& h : ds.model.hrf_index) h = static_cast<int>(model_rng.below(hrf::kLibrarySize));

    // ground-truth amplitudes [S, V]: voxels respond to feature deviations from
    // the dataset mean, so the SNR knob measures noise against informative
    // signal variation rather than a shared baseline response. A single-stimulus
    // dataset has no mean to remove and uses raw features (degenerate oracle).
    Tensor features(Shape{cfg.n_stimuli, kFeatureDim});
    for (i64 i = 0; i < cfg.n_stimuli; ++i) {
        Tensor f = image_features(ds.stimuli[static_cast<size_t>(i)].image);
        std::copy(f.v().begin(), f.v().end(), features.v().begin() + i * kFeatureDim);
    }
    if (cfg.n_stimuli > 1) {
        for (i64 k = 0; k < kFeatureDim; ++k) {
            double mean = 0.0;
            for (i64 i = 0; i < cfg.n_stimuli; ++i) mean += features.at({i, k});
            mean /= static_cast<double>(cfg.n_stimuli);
            for (i64 i = 0; i < cfg.n_stimuli; ++i) features.at({i, k}) -= mean;
        }
    }
    ds.true_amplitudes = la::mat_mul(features, la::transpose(ds.model.weights));

    // trial assignment: each stimulus appears in `repeats` distinct sessions
    Rng sched_rng = rng.child(3);
    std::vector<std::vector<i64>> session_stimuli(static_cast<size_t>(cfg.n_sessions));
    {
        std::vector<i64> sessions(static_cast<size_t>(cfg.n_sessions));
        for (i64 s = 0; s < cfg.n_sessions; ++s) sessions[static_cast<size_t>(s)] = s;
        for (i64 i = 0; i < cfg.n_stimuli; ++i) {
            sched_rng.shuffle(sessions);
            for (i64 rcount = 0; rcount < cfg.repeats; ++rcount)
                session_stimuli[static_cast<size_t>(sessions[static_cast<size_t>(rcount)])]
                    .push_back(i);
        }
    }

    // schedules and BOLD
    ds.trials.resize(static_cast<size_t>(cfg.n_sessions));
    ds.schedules.resize(static_cast<size_t>(cfg.n_sessions));
    std::vector<i64> t_len(static_cast<size_t>(cfg.n_sessions));
    for (i64 s = 0; s < cfg.n_sessions; ++s) {
        auto& stims = session_stimuli[static_cast<size_t>(s)];
        ND_CHECK(!stims.empty(), ConfigError,
                 "generate_dataset: session " << s << " has no trials; increase n_stimuli");
        sched_rng.shuffle(stims);
        auto& trials = ds.trials[static_cast<size_t>(s)];
        auto& sched = ds.schedules[static_cast<size_t>(s)];
        sched.tr = cfg.tr;
        for (size_t k = 0; k < stims.size(); ++k) {
            const i64 onset = cfg.warmup_tr + static_cast<i64>(k) * cfg.isi_tr;
            trials.push_back({stims[k], onset});
            sched.onsets.emplace_back(stims[k], static_cast<double>(onset) * cfg.tr);
        }
        t_len[static_cast<size_t>(s)] =
            cfg.warmup_tr + static_cast<i64>(stims.size()) * cfg.isi_tr + cfg.tail_tr;
        sched.duration = static_cast<double>(t_len[static_cast<size_t>(s)]) * cfg.tr;
    }
    ds.model.drift_degree = drift_degree_for(ds.schedules[0].duration);

    // noiseless signal, parallel over sessions (each body writes only its own buffer)
    ds.bold.resize(static_cast<size_t>(cfg.n_sessions));
    for (i64 s = 0; s < cfg.n_sessions; ++s)
        ds.bold[static_cast<size_t>(s)] = Tensor(Shape{cfg.n_voxels, t_len[static_cast<size_t>(s)]});
    parallel_for(cfg.n_sessions, [&](i64 s) {
        auto bv = ds.bold[static_cast<size_t>(s)].v();
        const i64 t = t_len[static_cast<size_t>(s)];
        for (const auto& trial : ds.trials[static_cast<size_t>(s)]) {
            for (i64 vx = 0; vx < cfg.n_voxels; ++vx) {
                const double amp = ds.true_amplitudes.at({trial.stimulus_id, vx});
                hrf::add_response(bv.subspan(static_cast<size_t>(vx * t), static_cast<size_t>(t)),
                                  ds.hrf_library.kernels[static_cast<size_t>(
                                      ds.model.hrf_index[static_cast<size_t>(vx)])],
                                  trial.onset_tr, amp);
            }
        }
    });

    // per-voxel noise level: explicit override, else calibrated to SNR of the clean signal
    ds.model.noise_sd.assign(static_cast<size_t>(cfg.n_voxels), 0.0);
    if (cfg.noise_sd >= 0.0) {
        ds.model.noise_sd.assign(static_cast<size_t>(cfg.n_voxels), cfg.noise_sd);
    } else if (cfg.snr > 0.0) {
        for (i64 vx = 0; vx < cfg.n_voxels; ++vx) {
            double sum = 0.0, sum2 = 0.0;
            i64 n = 0;
            for (i64 s = 0; s < cfg.n_sessions; ++s) {
                const i64 t = t_len[static_cast<size_t>(s)];
                auto bv = ds.bold[static_cast<size_t>(s)].v();
                for (i64 i = 0; i < t; ++i) {
                    const double x = bv[vx * t + i];
                    sum += x;
                    sum2 += x * x;
                    ++n;
                }
            }
            const double mean = sum / static_cast<double>(n);
            const double var = std::max(0.0, sum2 / static_cast<double>(n) - mean * mean);
            ds.model.noise_sd[static_cast<size_t>(vx)] = std::sqrt(var) / cfg.snr;
        }
    }

    // drift + noise, deterministic per-session child streams (thread-count independent)
    ds.model.drift_coef.resize(static_cast<size_t>(cfg.n_sessions));
    parallel_for(cfg.n_sessions, [&](i64 s) {
        Rng srng = rng.child(100 + static_cast<u64>(s));
        const i64 t = t_len[static_cast<size_t>(s)];
        auto bv = ds.bold[static_cast<size_t>(s)].v();
        const i64 cols = ds.model.drift_degree + 1;
        Tensor poly = legendre_columns(t, ds.model.drift_degree);
        Tensor coef(Shape{cfg.n_voxels, cols});
        for (auto& c : coef.v()) c = srng.gauss(0.0, cfg.drift_amp);
        const double scale = std::sqrt(static_cast<double>(t));
        for (i64 vx = 0; vx < cfg.n_voxels; ++vx) {
            const double nsd = ds.model.noise_sd[static_cast<size_t>(vx)];
            for (i64 i = 0; i < t; ++i) {
                double d = 0.0;
                for (i64 c = 0; c < cols; ++c) d += coef.at({vx, c}) * poly.at({i, c});
                bv[vx * t + i] += d * scale;
                if (nsd > 0.0) bv[vx * t + i] += srng.gauss(0.0, nsd);
            }
        }
        ds.model.drift_coef[static_cast<size_t>(s)] = std::move(coef);
    });
    return ds;
}

// ------------------------------------------------------------ processing

// In-place dataset-wide per-voxel standardization (population sd).
// Returns the number of zero-variance voxels that were zeroed instead.
inline i64 zscore_betas(std::vector<BetaRecord>& records) {
    ND_CHECK(records.size() >= 2, ConfigError, "zscore_betas: need at least 2 records");
    const i64 v = records[0].beta.numel();
    for (const auto& r : records)
        ND_CHECK(r.beta.numel() == v, DimensionError, "zscore_betas: inconsistent voxel counts");
    const double n = static_cast<double>(records.size());
    i64 warnings = 0;
    for (i64 j = 0; j < v; ++j) {
        double mean = 0.0;
        for (const auto& r : records) mean += r.beta.v()[j];
        mean /= n;
        double var = 0.0;
        for (const auto& r : records) {
            const double d = r.beta.v()[j] - mean;
            var += d * d;
        }
        var /= n;
        if (var <= 1e-24) {
            ++warnings;
            for (auto& r : records) r.beta.v()[j] = 0.0;
        } else {
            const double inv_sd = 1.0 / std::sqrt(var);
            for (auto& r : records) r.beta.v()[j] = (r.beta.v()[j] - mean) * inv_sd;
        }
    }
    for (auto& r : records) r.normalized = true;
    return warnings;
}

struct SplitResult {
    std::vector<BetaRecord> train, test;
};

// Deterministic stimulus-level split; test count = floor((1-fraction)*N)
// over distinct stimulus ids.
inline SplitResult split_dataset(const std::vector<BetaRecord>& records, double fraction,
                                 Rng& rng) {
    ND_CHECK(fraction > 0.0 && fraction < 1.0, ConfigError,
             "split_dataset: fraction must be in (0,1)");
    std::vector<i64> ids;
    for (const auto& r : records)
        if (std::find(ids.begin(), ids.end(), r.stimulus_id) == ids.end())
            ids.push_back(r.stimulus_id);
    std::sort(ids.begin(), ids.end());
    const i64 n = static_cast<i64>(ids.size());
    // floor((1-fraction)*N); the nudge keeps exact-integer products (e.g. 0.1*10)
    // from landing one ulp below the boundary
    const i64 n_test =
        static_cast<i64>(std::floor((1.0 - fraction) * static_cast<double>(n) + 1e-9));
    ND_CHECK(n_test >= 1 && n_test < n, ConfigError,
             "split_dataset: split would leave an empty side (" << n << " stimuli)");
    rng.shuffle(ids);
    std::vector<i64> test_ids(ids.begin(), ids.begin() + n_test);
    std::sort(test_ids.begin(), test_ids.end());
    SplitResult out;
    for (const auto& r : records) {
        const bool in_test = std::binary_search(test_ids.begin(), test_ids.end(), r.stimulus_id);
        (in_test ? out.test : out.train).push_back(r);
    }
    return out;
}

}  // namespace nd::synth
