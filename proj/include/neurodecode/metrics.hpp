#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "image.hpp"
#include "linalg.hpp"
#include "nn.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "tensor.hpp"

// Evaluation suite for reconstructed stimuli: MSE/MAE, windowed SSIM, pixel
// correlation, two-way identification over pluggable feature extractors, and
// spatial distance correlation, with CSV/JSON report emission.

namespace nd::metrics {

// ------------------------------------------------------------- elementwise

inline double mse(const Tensor& pred, const Tensor& target) {
    ND_CHECK(pred.shape() == target.shape(), DimensionError,
             "mse: shape mismatch " << shape_str(pred.shape()) << " vs "
                                    << shape_str(target.shape()));
    double acc = 0.0;
    for (i64 i = 0; i < pred.numel(); ++i) {
        const double d = pred.v()[i] - target.v()[i];
        acc += d * d;
    }
    return acc / static_cast<double>(pred.numel());
}

inline double mae(const Tensor& pred, const Tensor& target) {
    ND_CHECK(pred.shape() == target.shape(), DimensionError,
             "mae: shape mismatch " << shape_str(pred.shape()) << " vs "
                                    << shape_str(target.shape()));
    double acc = 0.0;
    for (i64 i = 0; i < pred.numel(); ++i) acc += std::abs(pred.v()[i] - target.v()[i]);
    return acc / static_cast<double>(pred.numel());
}

// ------------------------------------------------------------------- SSIM

struct SsimOptions {
    i64 window = 7;              // square side, uniform weights by default
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 1.0;  // L; images here live in [0,1] so 2^1-1
    bool gaussian = false;
    double sigma = 1.5;          // only used when gaussian == true

    // 11x11 Gaussian sigma=1.5 window, the common literature setting.
    static SsimOptions gaussian11() {
        SsimOptions o;
        o.window = 11;
        o.gaussian = true;
        return o;
    }
};

namespace detail {

// Mean-centering a mathematically constant vector leaves O(n*eps*scale)
// rounding residue per element, so "zero variance" must be tested against
// the accumulated-rounding bound rather than exact zero.
inline double variance_floor(i64 n, double scale) {
    const double per =
        static_cast<double>(n) * std::numeric_limits<double>::epsilon() * scale;
    return 4.0 * static_cast<double>(n) * per * per;
}

// Color images are reduced to Rec.601 luma (0.299 R + 0.587 G + 0.114 B)
// before windowing; single-channel images pass through.
inline Tensor to_gray(const char* op, const Tensor& t) {
    if (t.rank() == 2) return t;
    ND_CHECK(t.rank() == 3 && t.dim(0) == 3, DimensionError,
             op << ": expects [H,W] or [3,H,W], got " << shape_str(t.shape()));
    return img::luminance(t);
}

inline std::vector<double> ssim_window_weights(const SsimOptions& opt) {
    const i64 w = opt.window;
    std::vector<double> wt(static_cast<size_t>(w * w), 1.0);
    if (opt.gaussian) {
        const double c = static_cast<double>(w - 1) / 2.0;
        for (i64 i = 0; i < w; ++i)
            for (i64 j = 0; j < w; ++j) {
                const double di = static_cast<double>(i) - c, dj = static_cast<double>(j) - c;
                wt[static_cast<size_t>(i * w + j)] =
                    std::exp(-(di * di + dj * dj) / (2.0 * opt.sigma * opt.sigma));
            }
    }
    double sum = 0.0;
    for (double v : wt) sum += v;
    for (double& v : wt) v /= sum;
    return wt;
}

}  // namespace detail

// Mean over valid stride-1 windows of the local statistic
//   (2 mu_x mu_y + C1)(2 sigma_xy + C2) /
//   ((mu_x^2 + mu_y^2 + C1)(sigma_x^2 + sigma_y^2 + C2))
// with C1=(k1 L)^2, C2=(k2 L)^2 and window-weighted moments.
inline double ssim(const Tensor& x, const Tensor& y, const SsimOptions& opt = {}) {
    ND_CHECK(x.shape() == y.shape(), DimensionError,
             "ssim: shape mismatch " << shape_str(x.shape()) << " vs "
                                     << shape_str(y.shape()));
    ND_CHECK(opt.window >= 1 && opt.dynamic_range > 0.0 && (!opt.gaussian || opt.sigma > 0.0),
             ConfigError, "ssim: window/dynamic_range/sigma must be positive");
    const Tensor gx = detail::to_gray("ssim", x);
    const Tensor gy = detail::to_gray("ssim", y);
    const i64 h = gx.dim(0), w = gx.dim(1), k = opt.window;
    ND_CHECK(h >= k && w >= k, ConfigError,
             "ssim: image " << h << "x" << w << " smaller than window " << k << "x" << k);

    const std::vector<double> wt = detail::ssim_window_weights(opt);
    const double c1 = (opt.k1 * opt.dynamic_range) * (opt.k1 * opt.dynamic_range);
    const double c2 = (opt.k2 * opt.dynamic_range) * (opt.k2 * opt.dynamic_range);

    double acc = 0.0;
    i64 count = 0;
    for (i64 r0 = 0; r0 + k <= h; ++r0) {
        for (i64 c0 = 0; c0 + k <= w; ++c0) {
            double mx = 0.0, my = 0.0;
            for (i64 i = 0; i < k; ++i)
                for (i64 j = 0; j < k; ++j) {
                    const double wij = wt[static_cast<size_t>(i * k + j)];
                    mx += wij * gx.at({r0 + i, c0 + j});
                    my += wij * gy.at({r0 + i, c0 + j});
                }
            double vx = 0.0, vy = 0.0, vxy = 0.0;
            for (i64 i = 0; i < k; ++i)
                for (i64 j = 0; j < k; ++j) {
                    const double wij = wt[static_cast<size_t>(i * k + j)];
                    const double dx = gx.at({r0 + i, c0 + j}) - mx;
                    const double dy = gy.at({r0 + i, c0 + j}) - my;
                    vx += wij * dx * dx;
                    vy += wij * dy * dy;
                    vxy += wij * dx * dy;
                }
            const double num = (2.0 * mx * my + c1) * (2.0 * vxy + c2);
            const double den = (mx * mx + my * my + c1) * (vx + vy + c2);
            acc += num / den;
            ++count;
        }
    }
    return acc / static_cast<double>(count);
}

// ---------------------------------------------------------- pixcorr / SDC

// Pearson correlation over flattened pixels.
inline double pixcorr(const Tensor& x, const Tensor& y) {
    ND_CHECK(x.numel() == y.numel() && x.numel() >= 2, DimensionError,
             "pixcorr: needs equal flattened lengths >= 2, got " << x.numel() << " vs "
                                                                 << y.numel());
    const double n = static_cast<double>(x.numel());
    double mx = 0.0, my = 0.0, scale_x = 0.0, scale_y = 0.0;
    for (i64 i = 0; i < x.numel(); ++i) {
        mx += x.v()[i];
        my += y.v()[i];
        scale_x = std::max(scale_x, std::abs(x.v()[i]));
        scale_y = std::max(scale_y, std::abs(y.v()[i]));
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (i64 i = 0; i < x.numel(); ++i) {
        const double dx = x.v()[i] - mx, dy = y.v()[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    ND_CHECK(sxx > detail::variance_floor(x.numel(), scale_x) &&
                 syy > detail::variance_floor(x.numel(), scale_y),
             NumericError, "pixcorr: undefined correlation, an input has zero variance");
    return sxy / std::sqrt(sxx * syy);
}

// Spatial distance correlation: 1 - cosine similarity of the mean-centered
// vectors. 0 for identical (up to shift/positive scale), 2 for anti-aligned.
inline double sdc(const Tensor& x, const Tensor& y) {
    ND_CHECK(x.numel() == y.numel() && x.numel() >= 2, DimensionError,
             "sdc: needs equal flattened lengths >= 2, got " << x.numel() << " vs "
                                                             << y.numel());
    const double n = static_cast<double>(x.numel());
    double mx = 0.0, my = 0.0, scale_x = 0.0, scale_y = 0.0;
    for (i64 i = 0; i < x.numel(); ++i) {
        mx += x.v()[i];
        my += y.v()[i];
        scale_x = std::max(scale_x, std::abs(x.v()[i]));
        scale_y = std::max(scale_y, std::abs(y.v()[i]));
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (i64 i = 0; i < x.numel(); ++i) {
        const double dx = x.v()[i] - mx, dy = y.v()[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    ND_CHECK(sxx > detail::variance_floor(x.numel(), scale_x) &&
                 syy > detail::variance_floor(x.numel(), scale_y),
             NumericError, "sdc: undefined, an input has zero centered norm");
    return 1.0 - sxy / (std::sqrt(sxx) * std::sqrt(syy));
}

// ------------------------------------------------------ feature extractors

struct FeatureExtractor {
    std::string name;
    std::string tap;  // which internal layer the features are read from
    std::function<Tensor(const Tensor&)> fn;  // image -> fixed-length 1-D vector
};

// Flattened raw pixels; injective, useful as a reference extractor.
inline FeatureExtractor pixel_extractor() {
    return {"pixels", "input",
            [](const Tensor& img) { return nd::reshape(img.clone(), Shape{img.numel()}); }};
}

// Fixed seeded Gaussian random projection of the flattened image: the null
// baseline extractor (features carry no learned structure).
inline FeatureExtractor random_projection_extractor(i64 in_dim, i64 out_dim, u64 seed) {
    ND_CHECK(in_dim >= 1 && out_dim >= 1, ConfigError,
             "random_projection_extractor: dims must be positive");
    Rng rng(seed);
    Tensor proj = Tensor::randn(Shape{out_dim, in_dim}, rng);
    for (i64 i = 0; i < proj.numel(); ++i)
        proj.v()[i] /= std::sqrt(static_cast<double>(in_dim));
    return {"randproj" + std::to_string(out_dim), "projection",
            [proj, in_dim, out_dim](const Tensor& img) {
                ND_CHECK(img.numel() == in_dim, DimensionError,
                         "randproj: expected " << in_dim << " pixels, got " << img.numel());
                Tensor out(Shape{out_dim});
                for (i64 r = 0; r < out_dim; ++r) {
                    double acc = 0.0;
                    for (i64 c = 0; c < in_dim; ++c) acc += proj.at({r, c}) * img.v()[c];
                    out.v()[r] = acc;
                }
                return out;
            }};
}

// --------------------------------------------------- two-way identification

namespace detail {

inline double corr_or_throw(const Tensor& a, const Tensor& b, const std::string& name) {
    ND_CHECK(a.numel() == b.numel() && a.numel() >= 2, DimensionError,
             "two_way: extractor '" << name << "' produced mismatched feature lengths");
    const double n = static_cast<double>(a.numel());
    double ma = 0.0, mb = 0.0, scale_a = 0.0, scale_b = 0.0;
    for (i64 i = 0; i < a.numel(); ++i) {
        ma += a.v()[i];
        mb += b.v()[i];
        scale_a = std::max(scale_a, std::abs(a.v()[i]));
        scale_b = std::max(scale_b, std::abs(b.v()[i]));
    }
    ma /= n;
    mb /= n;
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (i64 i = 0; i < a.numel(); ++i) {
        const double da = a.v()[i] - ma, db = b.v()[i] - mb;
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    ND_CHECK(saa > variance_floor(a.numel(), scale_a) && sbb > variance_floor(a.numel(), scale_b),
             NumericError, "two_way: undefined correlation, extractor '"
                               << name << "' produced constant features");
    return sab / std::sqrt(saa * sbb);
}

}  // namespace detail

// Per-sample success fractions from a similarity matrix s[i,j] between
// prediction i and truth j: trial (i,j != i) succeeds iff s[i,i] > s[i,j],
// ties count 0.5. Depends on the scores only through order comparisons, so
// any strictly monotone rescoring leaves the result unchanged.
inline std::vector<double> two_way_per_sample(const Tensor& s) {
    ND_CHECK(s.rank() == 2 && s.dim(0) == s.dim(1) && s.dim(0) >= 2, DimensionError,
             "two_way_per_sample: expects square similarity matrix with n >= 2, got "
                 << shape_str(s.shape()));
    const i64 n = s.dim(0);
    std::vector<double> frac(static_cast<size_t>(n));
    for (i64 i = 0; i < n; ++i) {
        double wins = 0.0;
        for (i64 j = 0; j < n; ++j) {
            if (j == i) continue;
            const double own = s.at({i, i}), other = s.at({i, j});
            if (own > other)
                wins += 1.0;
            else if (own == other)
                wins += 0.5;
        }
        frac[static_cast<size_t>(i)] = wins / static_cast<double>(n - 1);
    }
    return frac;
}

inline double two_way_from_similarity(const Tensor& s) {
    const std::vector<double> frac = two_way_per_sample(s);
    double acc = 0.0;
    for (double f : frac) acc += f;
    return acc / static_cast<double>(frac.size());
}

// Correlation similarity matrix between extracted prediction and truth
// features: s[i,j] = pearson(fx(pred_i), fx(truth_j)).
inline Tensor two_way_similarity(const std::vector<Tensor>& preds,
                                 const std::vector<Tensor>& truths,
                                 const FeatureExtractor& fx) {
    ND_CHECK(preds.size() == truths.size() && preds.size() >= 2, ConfigError,
             "two_way: needs equal-length lists with >= 2 items, got "
                 << preds.size() << " and " << truths.size());
    const i64 n = static_cast<i64>(preds.size());
    std::vector<Tensor> fp(static_cast<size_t>(n)), ft(static_cast<size_t>(n));
    for (i64 i = 0; i < n; ++i) {
        fp[static_cast<size_t>(i)] = fx.fn(preds[static_cast<size_t>(i)]);
        ft[static_cast<size_t>(i)] = fx.fn(truths[static_cast<size_t>(i)]);
    }
    Tensor s(Shape{n, n});
    parallel_for(n, [&](i64 i) {
        for (i64 j = 0; j < n; ++j)
            s.at({i, j}) = detail::corr_or_throw(fp[static_cast<size_t>(i)],
                                                 ft[static_cast<size_t>(j)], fx.name);
    });
    return s;
}

// Success fraction over all ordered (i, j != i) distractor pairs.
inline double two_way_identification(const std::vector<Tensor>& preds,
                                     const std::vector<Tensor>& truths,
                                     const FeatureExtractor& fx) {
    return two_way_from_similarity(two_way_similarity(preds, truths, fx));
}

// -------------------------------------------------------------- conv probe

// Small conv classifier trained on stimulus class labels. Its intermediate
// activations provide learned feature extractors: a shallow tap after the
// first conv block and a deep tap after the last, the desk-scale analogue of
// scoring reconstructions in early/late layers of a recognition network.
struct ConvProbeConfig {
    i64 image_size = 64;  // must be a multiple of 8 (three stride-2 stages)
    i64 n_classes = 16;
    i64 channels = 8;     // first conv width; later convs use twice this
    i64 epochs = 20;
    i64 batch = 16;
    double lr = 1e-3;
    u64 seed = 0;
};

class ConvProbe {
public:
    explicit ConvProbe(const ConvProbeConfig& cfg) : cfg_(cfg) {
        ND_CHECK(cfg.image_size >= 8 && cfg.image_size % 8 == 0, ConfigError,
                 "ConvProbe: image_size must be a positive multiple of 8, got "
                     << cfg.image_size);
        ND_CHECK(cfg.n_classes >= 2 && cfg.channels >= 1, ConfigError,
                 "ConvProbe: needs n_classes >= 2 and channels >= 1");
        Rng rng(cfg.seed);
        conv1_ = nn::Conv2dLayer(3, cfg.channels, 3, 2, 1, rng);
        conv2_ = nn::Conv2dLayer(cfg.channels, 2 * cfg.channels, 3, 2, 1, rng);
        conv3_ = nn::Conv2dLayer(2 * cfg.channels, 2 * cfg.channels, 3, 2, 1, rng);
        const i64 s8 = cfg.image_size / 8;
        fc_ = nn::Linear(2 * cfg.channels * s8 * s8, cfg.n_classes, rng);
    }

    const ConvProbeConfig& config() const { return cfg_; }

    nn::ParamList parameters() const {
        nn::ParamList out;
        conv1_.collect("conv1", out);
        conv2_.collect("conv2", out);
        conv3_.collect("conv3", out);
        fc_.collect("fc", out);
        return out;
    }

    // Activations after the requested stage; depth 1 = first conv + relu
    // (shallow tap), depth 3 = last conv + relu (deep tap).
    Tensor activations(const Tensor& batch, int depth) const {
        ND_CHECK(batch.rank() == 4 && batch.dim(1) == 3 && batch.dim(2) == cfg_.image_size &&
                     batch.dim(3) == cfg_.image_size,
                 DimensionError, "ConvProbe: expects [N,3," << cfg_.image_size << ","
                                                            << cfg_.image_size << "], got "
                                                            << shape_str(batch.shape()));
        ND_CHECK(depth >= 1 && depth <= 3, ConfigError, "ConvProbe: tap depth must be 1..3");
        Tensor h = nd::relu(conv1_.forward(batch));
        if (depth == 1) return h;
        h = nd::relu(conv2_.forward(h));
        if (depth == 2) return h;
        return nd::relu(conv3_.forward(h));
    }

    Tensor logits(const Tensor& batch) const {
        Tensor h = activations(batch, 3);
        return fc_.forward(nd::reshape(h, Shape{h.dim(0), h.numel() / h.dim(0)}));
    }

    // Minibatch Adam training on cross-entropy; returns final train accuracy.
    double train(const std::vector<Tensor>& images, const std::vector<i64>& labels) {
        ND_CHECK(images.size() == labels.size() && !images.empty(), ConfigError,
                 "ConvProbe::train: image/label count mismatch or empty");
        for (i64 lab : labels)
            ND_CHECK(lab >= 0 && lab < cfg_.n_classes, ConfigError,
                     "ConvProbe::train: label " << lab << " outside [0," << cfg_.n_classes
                                                << ")");
        const i64 n = static_cast<i64>(images.size());
        nn::Adam opt(parameters(), cfg_.lr);
        Rng shuffle_rng = Rng(cfg_.seed).child(1);
        std::vector<i64> order(static_cast<size_t>(n));
        for (i64 i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
        for (i64 epoch = 0; epoch < cfg_.epochs; ++epoch) {
            shuffle_rng.shuffle(order);
            for (i64 start = 0; start < n; start += cfg_.batch) {
                const i64 bs = std::min(cfg_.batch, n - start);
                Tensor xb = stack_batch(images, order, start, bs);
                std::vector<i64> yb(static_cast<size_t>(bs));
                for (i64 i = 0; i < bs; ++i)
                    yb[static_cast<size_t>(i)] = labels[static_cast<size_t>(
                        order[static_cast<size_t>(start + i)])];
                GradTape tape;
                {
                    TapeScope scope(tape);
                    Tensor loss = nd::cross_entropy_rows(logits(xb), yb);
                    opt.zero_grad();
                    tape.backward(loss);
                }
                opt.step();
            }
        }
        return accuracy(images, labels);
    }

    double accuracy(const std::vector<Tensor>& images, const std::vector<i64>& labels) const {
        ND_CHECK(images.size() == labels.size() && !images.empty(), ConfigError,
                 "ConvProbe::accuracy: image/label count mismatch or empty");
        i64 hits = 0;
        for (size_t i = 0; i < images.size(); ++i) {
            Tensor lg = logits(single_batch(images[i]));
            i64 best = 0;
            for (i64 c = 1; c < cfg_.n_classes; ++c)
                if (lg.at({i64(0), c}) > lg.at({i64(0), best})) best = c;
            if (best == labels[i]) ++hits;
        }
        return static_cast<double>(hits) / static_cast<double>(images.size());
    }

    FeatureExtractor shallow_extractor() const { return tap_extractor("probe-shallow", 1); }
    FeatureExtractor deep_extractor() const { return tap_extractor("probe-deep", 3); }

private:
    static Tensor stack_batch(const std::vector<Tensor>& images, const std::vector<i64>& order,
                              i64 start, i64 bs) {
        const Tensor& first = images[static_cast<size_t>(order[static_cast<size_t>(start)])];
        Tensor out(Shape{bs, first.dim(0), first.dim(1), first.dim(2)});
        const i64 stride = first.numel();
        for (i64 i = 0; i < bs; ++i) {
            const Tensor& img = images[static_cast<size_t>(order[static_cast<size_t>(start + i)])];
            ND_CHECK(img.shape() == first.shape(), DimensionError,
                     "ConvProbe: images must share one shape");
            std::copy(img.v().begin(), img.v().end(), out.v().begin() + i * stride);
        }
        return out;
    }

    Tensor single_batch(const Tensor& img) const {
        ND_CHECK(img.rank() == 3, DimensionError,
                 "ConvProbe: expects [3,H,W] images, got " << shape_str(img.shape()));
        Tensor out(Shape{1, img.dim(0), img.dim(1), img.dim(2)});
        std::copy(img.v().begin(), img.v().end(), out.v().begin());
        return out;
    }

    FeatureExtractor tap_extractor(const std::string& name, int depth) const {
        // Layers copy as shared-storage tensor handles: extractors stay in
        // sync with the trained weights without duplicating them.
        ConvProbe snapshot = *this;
        const std::string tap = depth == 1 ? "conv1-relu" : "conv3-relu";
        return {name, tap, [snapshot, depth](const Tensor& img) {
                    Tensor a = snapshot.activations(snapshot.single_batch(img), depth);
                    return nd::reshape(a, Shape{a.numel()});
                }};
    }

    ConvProbeConfig cfg_;
    nn::Conv2dLayer conv1_, conv2_, conv3_;
    nn::Linear fc_;
};

// ----------------------------------------------------------------- reports

struct MetricReport {
    std::vector<std::string> sample_ids;
    // Low-level metrics, one value per sample.
    std::vector<double> mse, mae, ssim, pixcorr;
    // Feature-space metrics, one column per extractor.
    std::vector<std::string> extractor_names;
    std::vector<std::vector<double>> two_way;  // [extractor][sample]
    std::vector<std::vector<double>> sdc;      // [extractor][sample]

    i64 n_samples() const { return static_cast<i64>(sample_ids.size()); }
};

// Evaluates every metric for paired (pred, truth) lists. Feature extractors
// contribute a two-way identification column and an SDC column each.
inline MetricReport evaluate(const std::vector<Tensor>& preds, const std::vector<Tensor>& truths,
                             const std::vector<FeatureExtractor>& extractors = {},
                             const SsimOptions& ssim_opt = {},
                             const std::vector<std::string>& sample_ids = {}) {
    ND_CHECK(preds.size() == truths.size() && !preds.empty(), ConfigError,
             "evaluate: needs equal-length non-empty lists, got " << preds.size() << " and "
                                                                  << truths.size());
    const i64 n = static_cast<i64>(preds.size());
    ND_CHECK(sample_ids.empty() || static_cast<i64>(sample_ids.size()) == n, ConfigError,
             "evaluate: sample_ids length mismatch");

    MetricReport rep;
    rep.sample_ids.resize(static_cast<size_t>(n));
    for (i64 i = 0; i < n; ++i)
        rep.sample_ids[static_cast<size_t>(i)] =
            sample_ids.empty() ? "sample" + std::to_string(i) : sample_ids[static_cast<size_t>(i)];
    rep.mse.resize(static_cast<size_t>(n));
    rep.mae.resize(static_cast<size_t>(n));
    rep.ssim.resize(static_cast<size_t>(n));
    rep.pixcorr.resize(static_cast<size_t>(n));
    parallel_for(n, [&](i64 i) {
        const Tensor& p = preds[static_cast<size_t>(i)];
        const Tensor& t = truths[static_cast<size_t>(i)];
        rep.mse[static_cast<size_t>(i)] = mse(p, t);
        rep.mae[static_cast<size_t>(i)] = mae(p, t);
        rep.ssim[static_cast<size_t>(i)] = ssim(p, t, ssim_opt);
        rep.pixcorr[static_cast<size_t>(i)] = pixcorr(p, t);
    });

    for (const FeatureExtractor& fx : extractors) {
        rep.extractor_names.push_back(fx.name);
        std::vector<double> sdc_col(static_cast<size_t>(n));
        std::vector<Tensor> fp(static_cast<size_t>(n)), ft(static_cast<size_t>(n));
        for (i64 i = 0; i < n; ++i) {
            fp[static_cast<size_t>(i)] = fx.fn(preds[static_cast<size_t>(i)]);
            ft[static_cast<size_t>(i)] = fx.fn(truths[static_cast<size_t>(i)]);
        }
        parallel_for(n, [&](i64 i) {
            sdc_col[static_cast<size_t>(i)] =
                sdc(fp[static_cast<size_t>(i)], ft[static_cast<size_t>(i)]);
        });
        rep.sdc.push_back(std::move(sdc_col));
        if (n >= 2) {
            Tensor s(Shape{n, n});
            parallel_for(n, [&](i64 i) {
                for (i64 j = 0; j < n; ++j)
                    s.at({i, j}) = detail::corr_or_throw(fp[static_cast<size_t>(i)],
                                                         ft[static_cast<size_t>(j)], fx.name);
            });
            rep.two_way.push_back(two_way_per_sample(s));
        } else {
            rep.two_way.push_back(std::vector<double>{});
        }
    }
    return rep;
}

namespace detail {

inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc / static_cast<double>(v.size());
}

}  // namespace detail

// One row per sample plus a trailing aggregate row of column means.
inline std::string report_csv(const MetricReport& rep) {
    std::ostringstream out;
    out << "sample,mse,mae,ssim,pixcorr";
    for (const std::string& name : rep.extractor_names)
        out << ",two_way_" << name << ",sdc_" << name;
    out << "\n";
    auto row = [&](const std::string& id, i64 i) {
        out << id << ',' << detail::fmt(rep.mse[static_cast<size_t>(i)]) << ','
            << detail::fmt(rep.mae[static_cast<size_t>(i)]) << ','
            << detail::fmt(rep.ssim[static_cast<size_t>(i)]) << ','
            << detail::fmt(rep.pixcorr[static_cast<size_t>(i)]);
        for (size_t e = 0; e < rep.extractor_names.size(); ++e) {
            const auto& tw = rep.two_way[e];
            out << ',' << (tw.empty() ? "nan" : detail::fmt(tw[static_cast<size_t>(i)]));
            out << ',' << detail::fmt(rep.sdc[e][static_cast<size_t>(i)]);
        }
        out << "\n";
    };
    for (i64 i = 0; i < rep.n_samples(); ++i) row(rep.sample_ids[static_cast<size_t>(i)], i);
    out << "mean," << detail::fmt(detail::mean_of(rep.mse)) << ','
        << detail::fmt(detail::mean_of(rep.mae)) << ',' << detail::fmt(detail::mean_of(rep.ssim))
        << ',' << detail::fmt(detail::mean_of(rep.pixcorr));
    for (size_t e = 0; e < rep.extractor_names.size(); ++e)
        out << ',' << detail::fmt(detail::mean_of(rep.two_way[e])) << ','
            << detail::fmt(detail::mean_of(rep.sdc[e]));
    out << "\n";
    return out.str();
}

inline nlohmann::json report_json(const MetricReport& rep) {
    nlohmann::json j;
    j["samples"] = rep.sample_ids;
    j["per_sample"] = {{"mse", rep.mse},
                       {"mae", rep.mae},
                       {"ssim", rep.ssim},
                       {"pixcorr", rep.pixcorr}};
    j["aggregate"] = {{"mse", detail::mean_of(rep.mse)},
                      {"mae", detail::mean_of(rep.mae)},
                      {"ssim", detail::mean_of(rep.ssim)},
                      {"pixcorr", detail::mean_of(rep.pixcorr)}};
    for (size_t e = 0; e < rep.extractor_names.size(); ++e) {
        const std::string& name = rep.extractor_names[e];
        j["per_sample"]["two_way_" + name] = rep.two_way[e];
        j["per_sample"]["sdc_" + name] = rep.sdc[e];
        j["aggregate"]["two_way_" + name] = detail::mean_of(rep.two_way[e]);
        j["aggregate"]["sdc_" + name] = detail::mean_of(rep.sdc[e]);
    }
    return j;
}

}  // namespace nd::metrics
