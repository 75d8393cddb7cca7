#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "nn.hpp"
#include "serialize.hpp"
#include "tensor.hpp"

// Toy hierarchical VAE. The decoder runs strictly top-down: each layer reads
// the running state, emits a diagonal-Gaussian prior over a grid of
// length-`latent_width` latent slots, obtains a latent (posterior sample,
// posterior mean, injected value, or prior sample depending on the mode),
// merges it back into the state through a 1x1 convolution, and applies a
// residual convolution stack. Externally predicted latents can therefore be
// injected for the first K layers while the remaining layers fall back to
// their conditional priors.

namespace nd::hvae {

// ----------------------------------------------------------------- config

struct HvaeConfig {
    i64 image_size = 32;
    i64 base_channels = 8;
    i64 latent_width = 16;  // values per latent slot
    // Spatial resolution of each top-down layer's latent grid, top first.
    std::vector<i64> layer_res = {1, 1, 2, 2, 4, 4, 8, 8};
    i64 injected_layers = 4;  // K: layers that accept externally predicted latents
    u64 seed = 0;

    i64 layer_count() const { return static_cast<i64>(layer_res.size()); }

    std::vector<i64> slots_per_layer() const {
        std::vector<i64> slots;
        slots.reserve(layer_res.size());
        for (i64 r : layer_res) slots.push_back(r * r);
        return slots;
    }

    i64 total_slots() const {
        i64 total = 0;
        for (i64 r : layer_res) total += r * r;
        return total;
    }

    // Flat latent length covering the first k layers (slot-major, 16 values
    // per slot at the default width).
    i64 prefix_len(i64 k) const {
        ND_CHECK(k >= 0 && k <= layer_count(), ConfigError,
                 "HvaeConfig: layer index " << k << " outside [0," << layer_count() << "]");
        i64 slots = 0;
        for (i64 l = 0; l < k; ++l) slots += layer_res[static_cast<size_t>(l)] *
                                             layer_res[static_cast<size_t>(l)];
        return latent_width * slots;
    }

    i64 latent_len() const { return prefix_len(layer_count()); }
    i64 injected_len() const { return prefix_len(injected_layers); }

    void validate() const {
        ND_CHECK(image_size >= 2 && (image_size & (image_size - 1)) == 0, ConfigError,
                 "HvaeConfig: image_size must be a power of two, got " << image_size);
        ND_CHECK(base_channels >= 1 && latent_width >= 1, ConfigError,
                 "HvaeConfig: channel and latent widths must be positive");
        ND_CHECK(!layer_res.empty(), ConfigError, "HvaeConfig: needs at least one layer");
        i64 prev = 1;
        for (i64 r : layer_res) {
            ND_CHECK(r >= 1 && (r & (r - 1)) == 0 && r <= image_size, ConfigError,
                     "HvaeConfig: layer resolution " << r
                                                     << " must be a power of two <= image_size");
            ND_CHECK(r >= prev, ConfigError,
                     "HvaeConfig: layer resolutions must be non-decreasing (top-down)");
            prev = r;
        }
        ND_CHECK(layer_res.front() == 1, ConfigError,
                 "HvaeConfig: the top layer must sit at 1x1");
        ND_CHECK(injected_layers >= 0 && injected_layers <= layer_count(), ConfigError,
                 "HvaeConfig: injected_layers K = " << injected_layers << " exceeds the "
                                                    << layer_count() << " layers");
    }

    static HvaeConfig toy() { return HvaeConfig{}; }

    // Two-layer configuration for gradient checking; latent width trimmed so
    // finite differences stay cheap.
    static HvaeConfig micro() {
        HvaeConfig c;
        c.image_size = 8;
        c.base_channels = 4;
        c.latent_width = 4;
        c.layer_res = {1, 2};
        c.injected_layers = 1;
        return c;
    }
};

// Published decoder geometry, for shape contracts only: two 1x1 layers, then
// r layers of r x r at each doubled resolution r = 4, 8, 16, 32, 64. Cutting
// after 15 layers yields 834 slots (13,344 values at width 16); after 31
// layers, 5,698 slots (91,168 values).
inline std::vector<i64> paper_slot_table(i64 layers) {
    ND_CHECK(layers >= 1, ConfigError, "paper_slot_table: needs at least one layer");
    std::vector<i64> slots;
    slots.reserve(static_cast<size_t>(layers));
    for (i64 repeat = 0; repeat < 2 && static_cast<i64>(slots.size()) < layers; ++repeat)
        slots.push_back(1);
    for (i64 r = 4; r <= 64 && static_cast<i64>(slots.size()) < layers; r *= 2)
        for (i64 repeat = 0; repeat < r && static_cast<i64>(slots.size()) < layers; ++repeat)
            slots.push_back(r * r);
    ND_CHECK(static_cast<i64>(slots.size()) == layers, ConfigError,
             "paper_slot_table: the published hierarchy has only "
                 << slots.size() << " layers, requested " << layers);
    return slots;
}

inline i64 paper_latent_len(i64 layers) {
    const auto slots = paper_slot_table(layers);
    return 16 * std::accumulate(slots.begin(), slots.end(), i64{0});
}

// ------------------------------------------------------------------ types

// Flat latent values, decoder order (top layer first); each slot's
// `latent_width` values are contiguous, slots within a layer row-major over
// the layer's spatial grid.
struct LatentVector {
    Tensor values;
};

struct EncodeResult {
    LatentVector latents;  // posterior means (same values as `mu`)
    Tensor mu;             // [latent_len]
    Tensor sigma;          // [latent_len], strictly positive
};

// Per-layer prior parameters recorded during a decode pass, before that
// layer's latent is merged back into the state; used to verify that
// injection at layer j cannot reach layers <= j.
struct TopDownTrace {
    std::vector<Tensor> prior_mu;
    std::vector<Tensor> prior_sigma;
};

struct ElboParts {
    Tensor loss;        // differentiable scalar: recon/(2*sigma_obs^2) + floored KL, per sample
    double recon_mse = 0.0;              // mean squared error per pixel
    double kl_nats = 0.0;                // floored KL per sample
    std::vector<double> layer_kl = {};   // raw KL per slot, per layer (pre-floor)
};

namespace detail {

// Elementwise KL( N(mu_q, e^{lq}) || N(mu_p, e^{lp}) ), all inputs same shape.
inline Tensor gauss_kl(const Tensor& mu_q, const Tensor& logsig_q, const Tensor& mu_p,
                       const Tensor& logsig_p) {
    ND_CHECK(mu_q.shape() == logsig_q.shape() && mu_q.shape() == mu_p.shape() &&
                 mu_q.shape() == logsig_p.shape(),
             DimensionError, "gauss_kl: mismatched shapes");
    Tensor var_q = nd::exp(nd::mul_scalar(logsig_q, 2.0));
    Tensor inv_two_var_p = nd::mul_scalar(nd::exp(nd::mul_scalar(logsig_p, -2.0)), 0.5);
    Tensor quad = nd::mul(nd::add(var_q, nd::square(nd::sub(mu_q, mu_p))), inv_two_var_p);
    return nd::add_scalar(nd::add(nd::sub(logsig_p, logsig_q), quad), -0.5);
}

}  // namespace detail

// ------------------------------------------------------------------ model

class Hvae {
public:
    Hvae() = default;

    explicit Hvae(const HvaeConfig& cfg) : cfg_(cfg) {
        cfg.validate();
        Rng rng(cfg.seed);
        const i64 c = cfg.base_channels, lw = cfg.latent_width;
        stem_ = nn::Conv2dLayer(3, c, 3, 1, 1, rng);
        for (i64 r = cfg.image_size; r > 1; r /= 2)
            down_.emplace_back(c, c, 3, /*stride=*/2, /*pad=*/1, rng);
        start_bias_ = nn::init_uniform(Shape{c}, rng, 1.0);
        // A deep top-down stack is unstable under generic init: every layer
        // feeds its latent and residual back into the state, and the
        // magnitudes compound. Start the Gaussian heads near zero (prior ==
        // posterior == N(0,1), KL ~ 0) and scale the state-writing convs by
        // depth so the stack opens near the identity.
        const double depth_scale = 0.1 / std::sqrt(static_cast<double>(cfg.layer_res.size()));
        blocks_.reserve(cfg.layer_res.size());
        for (size_t l = 0; l < cfg.layer_res.size(); ++l) {
            Block b;
            b.prior = nn::Conv2dLayer(c, 2 * lw, 1, 1, 0, rng);
            b.posterior = nn::Conv2dLayer(2 * c, 2 * lw, 1, 1, 0, rng);
            b.inject = nn::Conv2dLayer(lw, c, 1, 1, 0, rng);
            b.res_a = nn::Conv2dLayer(c, c, 3, 1, 1, rng);
            b.res_b = nn::Conv2dLayer(c, c, 3, 1, 1, rng);
            rescale(b.prior, 0.01);
            rescale(b.posterior, 0.01);
            rescale(b.inject, depth_scale);
            rescale(b.res_b, depth_scale);
            blocks_.push_back(std::move(b));
        }
        for (i64 r = cfg.layer_res.back(); r < cfg.image_size; r *= 2)
            ups_.emplace_back(c, c, 4, /*stride=*/2, /*pad=*/1, rng);
        out_ = nn::Conv2dLayer(c, 3, 3, 1, 1, rng);
    }

    const HvaeConfig& config() const { return cfg_; }
    bool trained() const { return trained_; }
    void set_trained(bool t) { trained_ = t; }

    nn::ParamList parameters() const {
        nn::ParamList out;
        stem_.collect("enc.stem", out);
        for (size_t i = 0; i < down_.size(); ++i)
            down_[i].collect("enc.down" + std::to_string(i), out);
        out.emplace_back("dec.start", start_bias_);
        for (size_t l = 0; l < blocks_.size(); ++l) {
            const std::string p = "dec.block" + std::to_string(l);
            blocks_[l].prior.collect(p + ".prior", out);
            blocks_[l].posterior.collect(p + ".posterior", out);
            blocks_[l].inject.collect(p + ".inject", out);
            blocks_[l].res_a.collect(p + ".res_a", out);
            blocks_[l].res_b.collect(p + ".res_b", out);
        }
        for (size_t i = 0; i < ups_.size(); ++i)
            ups_[i].collect("dec.up" + std::to_string(i), out);
        out_.collect("dec.out", out);
        return out;
    }

    // Training objective on a batch: per-sample Gaussian reconstruction term
    // plus the per-slot free-bits-floored KL between posterior and prior.
    ElboParts forward_elbo(const Tensor& images, Rng& rng, double obs_sigma,
                           double free_bits) const {
        check_batch(images);
        ND_CHECK(obs_sigma > 0.0 && free_bits >= 0.0, ConfigError,
                 "forward_elbo: obs_sigma > 0 and free_bits >= 0 required");
        const i64 b = images.dim(0);
        ElboParts parts;
        std::vector<Tensor> feats = encoder_features(images);
        Tensor kl_sum;  // scalar accumulator across layers (floored)
        Tensor state = start_state(b);
        for (size_t l = 0; l < blocks_.size(); ++l) {
            state = ascend(state, l);
            auto [mu_p, logsig_p] = heads(blocks_[l].prior, state);
            Tensor q_in = nd::concat(std::vector<Tensor>{state, feat_at(feats, l)}, 1);
            auto [mu_q, logsig_q] = heads(blocks_[l].posterior, q_in);
            Tensor eps = Tensor::randn(mu_q.shape(), rng);
            Tensor z = nd::add(mu_q, nd::mul(nd::exp(logsig_q), eps));

            Tensor kl = detail::gauss_kl(mu_q, logsig_q, mu_p, logsig_p);
            Tensor slot_kl = sum_channels(kl);  // [B * r * r]
            double raw = 0.0;
            for (i64 i = 0; i < slot_kl.numel(); ++i) raw += slot_kl.v()[i];
            parts.layer_kl.push_back(raw / static_cast<double>(slot_kl.numel()));
            // max(kl, free_bits) = free_bits + relu(kl - free_bits)
            Tensor floored = nd::add_scalar(nd::relu(nd::add_scalar(slot_kl, -free_bits)),
                                            free_bits);
            Tensor layer_sum = nd::sum_all(floored);
            kl_sum = kl_sum.defined() ? nd::add(kl_sum, layer_sum) : layer_sum;

            state = descend(state, l, z);
        }
        Tensor pred = readout(state);
        Tensor sq = nd::square(nd::sub(pred, images));
        Tensor recon_sum = nd::sum_all(sq);
        const double bf = static_cast<double>(b);
        Tensor recon_term = nd::mul_scalar(recon_sum, 1.0 / (2.0 * obs_sigma * obs_sigma * bf));
        Tensor kl_term = nd::mul_scalar(kl_sum, 1.0 / bf);
        parts.loss = nd::add(recon_term, kl_term);
        parts.recon_mse = recon_sum.v()[0] / static_cast<double>(images.numel());
        parts.kl_nats = kl_term.v()[0];
        return parts;
    }

    // Deterministic posterior pass: the latent targets for the predictors.
    EncodeResult encode(const Tensor& image) const {
        ND_CHECK(trained_, ConfigError,
                 "Hvae::encode: model is untrained; latent targets must come from a trained "
                 "encoder (run train_hvae or load a trained checkpoint)");
        check_image(image);
        Tensor batch = nd::reshape(image, Shape{1, 3, cfg_.image_size, cfg_.image_size});
        std::vector<Tensor> feats = encoder_features(batch);
        std::vector<Tensor> mu_parts, sigma_parts;
        Tensor state = start_state(1);
        for (size_t l = 0; l < blocks_.size(); ++l) {
            state = ascend(state, l);
            Tensor q_in = nd::concat(std::vector<Tensor>{state, feat_at(feats, l)}, 1);
            auto [mu_q, logsig_q] = heads(blocks_[l].posterior, q_in);
            mu_parts.push_back(flatten_slots(mu_q, l));
            sigma_parts.push_back(flatten_slots(nd::exp(logsig_q), l));
            state = descend(state, l, mu_q);
        }
        EncodeResult res;
        res.mu = nd::concat(mu_parts, 0);
        res.sigma = nd::concat(sigma_parts, 0);
        res.latents.values = res.mu.clone();
        return res;
    }

    // Top-down generation: layers 0..k-1 consume the given flat latents via
    // their 1x1 merge convolutions, layers k.. sample from their conditional
    // priors. k = 0 is an unconditional sample.
    Tensor decode_with_injected(const Tensor& latents, i64 k, Rng& rng,
                                TopDownTrace* trace = nullptr) const {
        ND_CHECK(k >= 0 && k <= cfg_.layer_count(), ConfigError,
                 "decode_with_injected: k = " << k << " outside [0," << cfg_.layer_count()
                                              << "]");
        const i64 need = cfg_.prefix_len(k);
        const i64 got = latents.defined() ? latents.numel() : 0;
        ND_CHECK(got == need, DimensionError,
                 "decode_with_injected: first " << k << " layers take " << need
                                                << " latent values, got " << got);
        ND_CHECK(k == 0 || latents.rank() == 1, DimensionError,
                 "decode_with_injected: latents must be a flat vector");
        Tensor state = start_state(1);
        i64 offset = 0;
        for (size_t l = 0; l < blocks_.size(); ++l) {
            state = ascend(state, l);
            auto [mu_p, logsig_p] = heads(blocks_[l].prior, state);
            Tensor sigma_p = nd::exp(logsig_p);
            if (trace) {
                trace->prior_mu.push_back(mu_p.clone());
                trace->prior_sigma.push_back(sigma_p.clone());
            }
            Tensor z;
            if (static_cast<i64>(l) < k) {
                const i64 r = cfg_.layer_res[l];
                const i64 len = cfg_.latent_width * r * r;
                z = unflatten_slots(nd::slice(latents, 0, offset, len), l);
                offset += len;
            } else {
                Tensor eps = Tensor::randn(mu_p.shape(), rng);
                z = nd::add(mu_p, nd::mul(sigma_p, eps));
            }
            state = descend(state, l, z);
        }
        Tensor img = nd::clamp(readout(state), 0.0, 1.0);
        return nd::reshape(img, Shape{3, cfg_.image_size, cfg_.image_size});
    }

    Tensor sample(Rng& rng) const { return decode_with_injected(Tensor(), 0, rng); }

private:
    struct Block {
        nn::Conv2dLayer prior, posterior, inject, res_a, res_b;
    };

    static void rescale(nn::Conv2dLayer& conv, double factor) {
        for (i64 i = 0; i < conv.w.numel(); ++i) conv.w.v()[i] *= factor;
        for (i64 i = 0; i < conv.b.numel(); ++i) conv.b.v()[i] *= factor;
    }

    void check_image(const Tensor& image) const {
        ND_CHECK(image.rank() == 3 && image.dim(0) == 3 && image.dim(1) == cfg_.image_size &&
                     image.dim(2) == cfg_.image_size,
                 DimensionError, "Hvae: expects a [3," << cfg_.image_size << ","
                                                       << cfg_.image_size << "] image, got "
                                                       << shape_str(image.shape()));
    }

    void check_batch(const Tensor& images) const {
        ND_CHECK(images.rank() == 4 && images.dim(0) >= 1 && images.dim(1) == 3 &&
                     images.dim(2) == cfg_.image_size && images.dim(3) == cfg_.image_size,
                 DimensionError, "Hvae: expects [N,3," << cfg_.image_size << ","
                                                       << cfg_.image_size << "] images, got "
                                                       << shape_str(images.shape()));
    }

    // Bottom-up features indexed by halving step: index 0 is image_size,
    // index d is image_size >> d, down to 1x1.
    std::vector<Tensor> encoder_features(const Tensor& images) const {
        std::vector<Tensor> feats;
        Tensor h = nd::relu(stem_.forward(images));
        feats.push_back(h);
        for (const auto& conv : down_) {
            h = nd::relu(conv.forward(h));
            feats.push_back(h);
        }
        return feats;
    }

    const Tensor& feat_at(const std::vector<Tensor>& feats, size_t layer) const {
        i64 steps = 0;
        for (i64 r = cfg_.image_size; r > cfg_.layer_res[layer]; r /= 2) ++steps;
        return feats[static_cast<size_t>(steps)];
    }

    Tensor start_state(i64 batch) const {
        const i64 r0 = cfg_.layer_res.front();
        Tensor zeros(Shape{batch, cfg_.base_channels, r0, r0});
        return nd::bias_nchw(zeros, start_bias_);
    }

    // Upsample the running state when the next layer lives on a finer grid.
    Tensor ascend(const Tensor& state, size_t layer) const {
        const i64 want = cfg_.layer_res[layer];
        const i64 have = state.dim(2);
        return want > have ? nd::upsample_nearest2d(state, want / have) : state;
    }

    // Merge the layer's latent into the state and refine.
    Tensor descend(const Tensor& state, size_t layer, const Tensor& z) const {
        const Block& blk = blocks_[layer];
        Tensor merged = nd::add(state, blk.inject.forward(z));
        Tensor h = nd::relu(blk.res_a.forward(nd::relu(merged)));
        return nd::add(merged, blk.res_b.forward(h));
    }

    Tensor readout(const Tensor& state) const {
        Tensor h = state;
        for (const auto& up : ups_) h = nd::relu(up.forward(h));
        return out_.forward(h);
    }

    // Split a head's output into mean and clamped log-sigma channel halves.
    std::pair<Tensor, Tensor> heads(const nn::Conv2dLayer& conv, const Tensor& x) const {
        Tensor both = conv.forward(x);
        Tensor mu = nd::slice(both, 1, 0, cfg_.latent_width);
        Tensor logsig = nd::clamp(nd::slice(both, 1, cfg_.latent_width, cfg_.latent_width),
                                  -8.0, 8.0);
        return {mu, logsig};
    }

    // [1, Lw, r, r] -> [Lw * r * r] flat, slot-major: each grid position's
    // `latent_width` values stay contiguous, positions row-major.
    Tensor flatten_slots(const Tensor& z, size_t layer) const {
        const i64 r = cfg_.layer_res[layer], lw = cfg_.latent_width;
        Tensor grid = nd::permute(z, {0, 2, 3, 1});  // [1, r, r, Lw]
        return nd::reshape(grid, Shape{r * r * lw});
    }

    Tensor unflatten_slots(const Tensor& flat, size_t layer) const {
        const i64 r = cfg_.layer_res[layer], lw = cfg_.latent_width;
        Tensor grid = nd::reshape(flat, Shape{1, r, r, lw});
        return nd::permute(grid, {0, 3, 1, 2});  // [1, Lw, r, r]
    }

    // Per-slot KL: sum the channel axis of [B, Lw, r, r] -> flat [B * r * r].
    Tensor sum_channels(const Tensor& kl) const {
        const i64 b = kl.dim(0), lw = kl.dim(1), hw = kl.dim(2) * kl.dim(3);
        Tensor rows = nd::reshape(nd::permute(kl, {0, 2, 3, 1}), Shape{b * hw, lw});
        return nd::sum_axis(rows, 1);
    }

    HvaeConfig cfg_;
    bool trained_ = false;
    nn::Conv2dLayer stem_;
    std::vector<nn::Conv2dLayer> down_;
    Tensor start_bias_;
    std::vector<Block> blocks_;
    std::vector<nn::ConvT2dLayer> ups_;
    nn::Conv2dLayer out_;
};

// --------------------------------------------------------------- training

struct HvaeTrainConfig {
    i64 epochs = 30;
    i64 batch = 16;
    double lr = 1e-3;
    double obs_sigma = 0.1;   // observation noise of the Gaussian likelihood
    double free_bits = 0.05;  // per-slot KL floor, nats
    u64 seed = 0;
};

struct HvaeEpochRow {
    i64 epoch = 0;
    double loss = 0.0;       // per-sample objective, epoch mean
    double recon_mse = 0.0;  // per-pixel, epoch mean
    double kl_nats = 0.0;    // per-sample floored KL, epoch mean
};

struct HvaeTrainReport {
    std::vector<HvaeEpochRow> rows;
    std::vector<double> final_layer_kl;  // raw KL per slot, last epoch mean
    bool kl_collapsed = false;           // every layer ended under the free-bits floor

    std::string csv() const {
        auto fmt = [](double v) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.12g", v);
            return std::string(buf);
        };
        std::string out = "epoch,loss,recon_mse,kl\n";
        for (const auto& r : rows)
            out += std::to_string(r.epoch) + "," + fmt(r.loss) + "," + fmt(r.recon_mse) + "," +
                   fmt(r.kl_nats) + "\n";
        return out;
    }
};

struct HvaeTrainResult {
    Hvae model;
    HvaeTrainReport report;
};

inline HvaeTrainResult train_hvae(Hvae model, const Tensor& images,
                                  const HvaeTrainConfig& tcfg) {
    ND_CHECK(images.rank() == 4 && images.dim(0) >= 2, ConfigError,
             "train_hvae: expects [N,3,S,S] images with N >= 2");
    ND_CHECK(tcfg.epochs >= 1 && tcfg.batch >= 1 && tcfg.lr > 0.0, ConfigError,
             "train_hvae: epochs >= 1, batch >= 1, lr > 0");
    HvaeTrainResult result;
    result.model = std::move(model);
    nn::Adam opt(result.model.parameters(), tcfg.lr);
    Rng rng(tcfg.seed);
    Rng noise_rng = rng.child(1);
    Rng batch_rng = rng.child(2);

    const i64 n = images.dim(0);
    const i64 layer_count = result.model.config().layer_count();
    std::vector<i64> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), i64{0});
    const i64 chw = images.numel() / n;

    HvaeTrainReport& report = result.report;
    for (i64 epoch = 1; epoch <= tcfg.epochs; ++epoch) {
        batch_rng.shuffle(order);
        HvaeEpochRow row;
        row.epoch = epoch;
        std::vector<double> layer_kl(static_cast<size_t>(layer_count), 0.0);
        i64 seen = 0;
        for (i64 lo = 0; lo < n; lo += tcfg.batch) {
            const i64 bs = std::min(tcfg.batch, n - lo);
            Tensor xb(Shape{bs, 3, images.dim(2), images.dim(3)});
            for (i64 r = 0; r < bs; ++r) {
                const i64 src = order[static_cast<size_t>(lo + r)];
                std::copy(images.v().begin() + src * chw, images.v().begin() + (src + 1) * chw,
                          xb.v().begin() + r * chw);
            }
            GradTape tape;
            ElboParts parts;
            {
                TapeScope scope(tape);
                parts = result.model.forward_elbo(xb, noise_rng, tcfg.obs_sigma,
                                                  tcfg.free_bits);
                ND_CHECK(std::isfinite(parts.loss.v()[0]), SolverError,
                         "train_hvae: non-finite loss at epoch " << epoch << " (lr=" << tcfg.lr
                                                                 << ")");
                opt.zero_grad();
                tape.backward(parts.loss);
            }
            opt.step();
            const double w = static_cast<double>(bs);
            row.loss += parts.loss.v()[0] * w;
            row.recon_mse += parts.recon_mse * w;
            row.kl_nats += parts.kl_nats * w;
            for (size_t l = 0; l < layer_kl.size(); ++l) layer_kl[l] += parts.layer_kl[l] * w;
            seen += bs;
        }
        const double inv = 1.0 / static_cast<double>(seen);
        row.loss *= inv;
        row.recon_mse *= inv;
        row.kl_nats *= inv;
        report.rows.push_back(row);
        if (epoch == tcfg.epochs) {
            report.final_layer_kl.assign(layer_kl.begin(), layer_kl.end());
            for (double& v : report.final_layer_kl) v *= inv;
            report.kl_collapsed = std::all_of(report.final_layer_kl.begin(),
                                              report.final_layer_kl.end(),
                                              [&](double v) { return v < tcfg.free_bits; });
        }
    }
    result.model.set_trained(true);
    return result;
}

// ------------------------------------------------------------- persistence

inline void save_hvae(const Hvae& model, const std::filesystem::path& stem) {
    TensorArchive<double> ar;
    nn::save_params(ar, model.parameters());
    ar.save(stem.string() + ".ndar");
    const HvaeConfig& c = model.config();
    nlohmann::json j;
    j["format"] = "neurodecode.hvae.v1";
    j["trained"] = model.trained();
    j["config"] = {{"image_size", c.image_size},
                   {"base_channels", c.base_channels},
                   {"latent_width", c.latent_width},
                   {"layer_res", c.layer_res},
                   {"injected_layers", c.injected_layers},
                   {"seed", c.seed}};
    std::ofstream os(stem.string() + ".json");
    ND_CHECK(os.good(), ArtifactError, "save_hvae: cannot open " << stem << ".json");
    os << j.dump(2) << "\n";
}

inline Hvae load_hvae(const std::filesystem::path& stem) {
    std::ifstream is(stem.string() + ".json");
    ND_CHECK(is.good(), ArtifactError, "load_hvae: cannot open " << stem << ".json");
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError(std::string("load_hvae: bad JSON sidecar: ") + e.what());
    }
    ND_CHECK(j.value("format", "") == "neurodecode.hvae.v1", ArtifactError,
             "load_hvae: unrecognized format tag");
    HvaeConfig c;
    bool trained = false;
    try {
        const nlohmann::json& cj = j.at("config");
        c.image_size = cj.at("image_size").get<i64>();
        c.base_channels = cj.at("base_channels").get<i64>();
        c.latent_width = cj.at("latent_width").get<i64>();
        c.layer_res = cj.at("layer_res").get<std::vector<i64>>();
        c.injected_layers = cj.at("injected_layers").get<i64>();
        c.seed = cj.at("seed").get<u64>();
        trained = j.at("trained").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError(std::string("load_hvae: incomplete sidecar: ") + e.what());
    }
    Hvae model(c);
    TensorArchive<double> ar = TensorArchive<double>::load(stem.string() + ".ndar");
    nn::ParamList params = model.parameters();
    nn::load_params(ar, params);
    model.set_trained(trained);
    return model;
}

}  // namespace nd::hvae
