#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "nn.hpp"
#include "ridge.hpp"
#include "serialize.hpp"
#include "tensor.hpp"

// First-stage nonlinear regressor: maps a flat beta vector onto the
// concatenated decoder latents. The reference architecture is the published
// bidirectional-GRU stack (BiGRU -> LayerNorm -> Dropout -> BiGRU ->
// LayerNorm -> FC -> BatchNorm -> ReLU -> Dropout -> FC); convolutional and
// transformer ablation variants swap the block between the two recurrences.

namespace nd::stage1 {

// ----------------------------------------------------------------- config

enum class Arch { gru, conv, transformer };

inline std::string arch_name(Arch a) {
    switch (a) {
        case Arch::gru: return "gru";
        case Arch::conv: return "conv";
        case Arch::transformer: return "transformer";
    }
    throw ConfigError("arch_name: unknown architecture kind");
}

inline Arch parse_arch(const std::string& name) {
    if (name == "gru") return Arch::gru;
    if (name == "conv") return Arch::conv;
    if (name == "transformer") return Arch::transformer;
    throw ConfigError("parse_arch: unknown architecture kind '" + name +
                      "' (expected gru|conv|transformer)");
}

struct RegressorConfig {
    i64 input_len = 15724;   // flat beta length
    i64 seq_chunks = 1;      // recurrence steps; the input splits into this many chunks
    i64 hidden = 100;        // GRU width per direction (bidirectional output = 2*hidden)
    i64 fc_hidden = 200;     // penultimate fully-connected width
    i64 output_len = 13344;  // concatenated latent length; divisible by 16
    double dropout_p = 0.5;
    i64 attn_heads = 2;      // transformer variant only
    u64 seed = 0;

    i64 chunk_width() const { return seq_chunks > 0 ? input_len / seq_chunks : 0; }

    void validate() const {
        ND_CHECK(input_len >= 1 && hidden >= 1 && fc_hidden >= 1 && output_len >= 1, ConfigError,
                 "RegressorConfig: dims must be positive");
        ND_CHECK(output_len % 16 == 0, ConfigError,
                 "RegressorConfig: output_len must be divisible by 16 (length-16 latents), got "
                     << output_len);
        ND_CHECK(seq_chunks >= 1 && input_len % seq_chunks == 0, ConfigError,
                 "RegressorConfig: input_len " << input_len << " not divisible into "
                                               << seq_chunks << " chunks");
        ND_CHECK(dropout_p >= 0.0 && dropout_p < 1.0, ConfigError,
                 "RegressorConfig: dropout_p must be in [0,1)");
        ND_CHECK(attn_heads >= 1 && (2 * hidden) % attn_heads == 0, ConfigError,
                 "RegressorConfig: 2*hidden must be divisible by attn_heads");
    }

    // Published geometry: one sequence step of the full 15,724-voxel vector,
    // 100 hidden units per direction, 13,344 outputs (15 decoder layers).
    static RegressorConfig paper_dims() { return RegressorConfig{}; }

    // Second published option: 31 decoder layers, 91,168 outputs.
    static RegressorConfig paper_dims_31() {
        RegressorConfig c;
        c.output_len = 91168;
        return c;
    }

    // Desk-scale defaults; chunked-sequence mode so the recurrence sees more
    // than one step.
    static RegressorConfig toy() {
        RegressorConfig c;
        c.input_len = 64;
        c.seq_chunks = 8;
        c.hidden = 8;
        c.fc_hidden = 16;
        c.output_len = 32;
        c.dropout_p = 0.1;
        return c;
    }
};

// ------------------------------------------------------------------ model

class Regressor {
public:
    Regressor() = default;

    Regressor(const RegressorConfig& cfg, Arch arch) : cfg_(cfg), arch_(arch) {
        cfg.validate();
        Rng rng(cfg.seed);
        const i64 c = cfg.chunk_width(), h2 = 2 * cfg.hidden;
        gru1_ = nn::BiGru(c, cfg.hidden, rng);
        ln1_ = nn::LayerNorm(h2);
        if (arch_ == Arch::conv) {
            conv1_ = nn::Conv1dLayer(h2, h2, 3, 1, 1, rng);
            conv2_ = nn::Conv1dLayer(h2, h2, 3, 1, 1, rng);
        } else if (arch_ == Arch::transformer) {
            attn_ = nn::MultiheadSelfAttention(h2, cfg.attn_heads, rng);
            ln_attn_ = nn::LayerNorm(h2);
        }
        gru2_ = nn::BiGru(h2, cfg.hidden, rng);
        ln2_ = nn::LayerNorm(h2);
        fc1_ = nn::Linear(h2, cfg.fc_hidden, rng);
        bn_ = nn::BatchNorm1d(cfg.fc_hidden);
        fc2_ = nn::Linear(cfg.fc_hidden, cfg.output_len, rng);
    }

    const RegressorConfig& config() const { return cfg_; }
    Arch arch() const { return arch_; }

    nn::ParamList parameters() const {
        nn::ParamList out;
        gru1_.collect("gru1", out);
        ln1_.collect("ln1", out);
        if (arch_ == Arch::conv) {
            conv1_.collect("conv1", out);
            conv2_.collect("conv2", out);
        } else if (arch_ == Arch::transformer) {
            attn_.collect("attn", out);
            ln_attn_.collect("ln_attn", out);
        }
        gru2_.collect("gru2", out);
        ln2_.collect("ln2", out);
        fc1_.collect("fc1", out);
        bn_.collect("bn", out);
        fc2_.collect("fc2", out);
        return out;
    }

    nn::ParamList buffers() const {
        nn::ParamList out;
        bn_.collect_buffers("bn", out);
        return out;
    }

    // Training-mode forward: dropout live, batch statistics in the batch
    // norm (running buffers update as a side effect).
    Tensor forward_train(const Tensor& x, Rng& rng) { return stack(x, true, &rng); }

    // Eval-mode forward: dropout off, frozen normalization statistics; a
    // pure function of the parameters and input.
    Tensor predict(const Tensor& x) const { return stack(x, false, nullptr); }

    // Single flat beta vector -> flat latent vector.
    Tensor predict_one(const Tensor& beta) const {
        ND_CHECK(beta.rank() == 1, DimensionError,
                 "Regressor: predict_one expects a flat [input_len] vector, got "
                     << shape_str(beta.shape()));
        Tensor batch = nd::reshape(beta.clone(), Shape{1, beta.numel()});
        return nd::reshape(predict(batch), Shape{cfg_.output_len});
    }

    // Post-softmax attention weights for the first sample, stacked per head
    // as [heads*T, T]; transformer variant only.
    Tensor attention_weights(const Tensor& x) const {
        ND_CHECK(arch_ == Arch::transformer, ConfigError,
                 "Regressor: attention_weights is only defined for the transformer variant");
        Tensor h = as_sequence(x);
        h = ln1_.forward(gru1_.forward(h));
        Tensor sample =
            nd::reshape(nd::slice(h, 0, 0, 1), Shape{cfg_.seq_chunks, 2 * cfg_.hidden});
        Tensor weights;
        attn_.forward(sample, &weights);
        return weights;
    }

private:
    Tensor as_sequence(const Tensor& x) const {
        ND_CHECK(x.rank() == 2 && x.dim(1) == cfg_.input_len, DimensionError,
                 "Regressor: expects [N," << cfg_.input_len << "], got "
                                          << shape_str(x.shape()));
        return nd::reshape(x, Shape{x.dim(0), cfg_.seq_chunks, cfg_.chunk_width()});
    }

    // The shared Table-1 spine; `training` toggles dropout and batch-norm
    // statistics. Tensors are shared handles, so the batch-norm running
    // buffers update through the shallow copies in training mode.
    Tensor stack(const Tensor& x, bool training, Rng* rng) const {
        Tensor h = as_sequence(x);  // [N, T, c]
        const i64 n = h.dim(0), t = cfg_.seq_chunks, h2 = 2 * cfg_.hidden;

        h = ln1_.forward(gru1_.forward(h));  // [N, T, 2H]
        h = drop(h, training, rng);

        if (arch_ == Arch::conv) {
            // conv -> ReLU -> conv -> ReLU -> max pool over the time axis
            Tensor c = nd::permute(h, {0, 2, 1});  // [N, 2H, T]
            c = nd::relu(conv1_.forward(c));
            c = nd::relu(conv2_.forward(c));
            c = nd::max_pool1d(c, t >= 2 ? 2 : 1);
            h = nd::permute(c, {0, 2, 1});  // [N, T', 2H]
        } else if (arch_ == Arch::transformer) {
            // per-sample self-attention with residual + layer norm
            std::vector<Tensor> rows;
            rows.reserve(static_cast<size_t>(n));
            for (i64 s = 0; s < n; ++s) {
                Tensor xs = nd::reshape(nd::slice(h, 0, s, 1), Shape{t, h2});
                Tensor res = ln_attn_.forward(nd::add(xs, attn_.forward(xs)));
                rows.push_back(nd::reshape(res, Shape{1, t, h2}));
            }
            h = nd::concat(rows, 0);
        }

        h = ln2_.forward(gru2_.forward(h));      // [N, T', 2H]
        h = nn::sequence_mean(h);                // [N, 2H]
        h = fc1_.forward(h);                     // [N, F]
        {
            Tensor rm = bn_.running_mean, rv = bn_.running_var;  // shared handles
            h = nd::batch_norm1d(h, bn_.gamma, bn_.beta, rm, rv, training, bn_.momentum,
                                 bn_.eps);
        }
        h = nd::relu(h);
        h = drop(h, training, rng);
        return fc2_.forward(h);  // [N, output_len]
    }

    Tensor drop(const Tensor& h, bool training, Rng* rng) const {
        if (!training || cfg_.dropout_p == 0.0) return h;
        ND_CHECK(rng != nullptr, ConfigError, "Regressor: training forward needs an Rng");
        return nd::dropout(h, cfg_.dropout_p, true, *rng);
    }

    RegressorConfig cfg_;
    Arch arch_ = Arch::gru;
    nn::BiGru gru1_, gru2_;
    nn::LayerNorm ln1_, ln2_, ln_attn_;
    nn::Conv1dLayer conv1_, conv2_;
    nn::MultiheadSelfAttention attn_;
    nn::Linear fc1_, fc2_;
    nn::BatchNorm1d bn_;
};

inline Regressor build_ablation_variant(const std::string& kind, const RegressorConfig& cfg) {
    return Regressor(cfg, parse_arch(kind));
}

inline i64 param_count(const Regressor& model) { return nn::param_count(model.parameters()); }

// Closed-form count under the documented convention (3 gates, separate
// input-side and hidden-side biases per direction; affine layer/batch norms):
//   BiGRU(c -> H):   2 * (3H*c + 3H^2 + 6H)
//   LayerNorm(2H):   4H          FC(a -> b): a*b + b      BatchNorm(F): 2F
inline i64 expected_param_count(const RegressorConfig& cfg) {
    const i64 c = cfg.chunk_width(), h = cfg.hidden, f = cfg.fc_hidden, o = cfg.output_len;
    auto bigru = [h](i64 in) { return 2 * (3 * h * in + 3 * h * h + 6 * h); };
    return bigru(c) + 4 * h + bigru(2 * h) + 4 * h + (2 * h * f + f) + 2 * f + (f * o + o);
}

// ---------------------------------------------------------------- dataset

struct Dataset {
    Tensor x_train, y_train;  // [N, input_len], [N, output_len]
    Tensor x_val, y_val;
    Tensor x_test, y_test;  // optional; used by the benchmark report

    void validate(bool need_test = false) const {
        auto check_pair = [](const Tensor& x, const Tensor& y, const char* which) {
            ND_CHECK(x.defined() && y.defined() && x.rank() == 2 && y.rank() == 2, ConfigError,
                     "Dataset: " << which << " split must hold [N,in]/[N,out] matrices");
            ND_CHECK(x.dim(0) == y.dim(0) && x.dim(0) >= 1, ConfigError,
                     "Dataset: " << which << " split is empty or row counts differ");
        };
        check_pair(x_train, y_train, "train");
        check_pair(x_val, y_val, "val");
        if (need_test) check_pair(x_test, y_test, "test");
        ND_CHECK(x_train.dim(1) == x_val.dim(1) && y_train.dim(1) == y_val.dim(1), ConfigError,
                 "Dataset: train/val widths differ");
        if (x_test.defined())
            ND_CHECK(x_test.dim(1) == x_train.dim(1) && y_test.dim(1) == y_train.dim(1),
                     ConfigError, "Dataset: test widths differ");
    }
};

struct EvalPair {
    double mse = 0.0;
    double mae = 0.0;
};

inline EvalPair eval_metrics(const Tensor& pred, const Tensor& truth) {
    ND_CHECK(pred.shape() == truth.shape(), DimensionError,
             "eval_metrics: shape mismatch " << shape_str(pred.shape()) << " vs "
                                             << shape_str(truth.shape()));
    double se = 0.0, ae = 0.0;
    for (i64 i = 0; i < pred.numel(); ++i) {
        const double d = pred.v()[i] - truth.v()[i];
        se += d * d;
        ae += std::abs(d);
    }
    const double n = static_cast<double>(pred.numel());
    return {se / n, ae / n};
}

// --------------------------------------------------------------- training

struct TrainConfig {
    i64 epochs = 200;
    i64 batch = 32;
    double lr = 1e-3;
    i64 patience = 20;  // early stop after this many epochs without val-MSE improvement
    u64 seed = 0;
};

struct EpochRow {
    i64 epoch = 0;  // 0 = pre-training evaluation
    double train_mse = 0.0, train_mae = 0.0;
    double val_mse = 0.0, val_mae = 0.0;
};

struct TrainReport {
    std::vector<EpochRow> rows;
    i64 best_epoch = 0;
    double best_val_mse = 0.0;
    bool stopped_early = false;

    std::string csv() const {
        auto fmt = [](double v) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.12g", v);
            return std::string(buf);
        };
        std::string out = "epoch,train_mse,train_mae,val_mse,val_mae\n";
        for (const auto& r : rows)
            out += std::to_string(r.epoch) + "," + fmt(r.train_mse) + "," + fmt(r.train_mae) +
                   "," + fmt(r.val_mse) + "," + fmt(r.val_mae) + "\n";
        return out;
    }
};

struct TrainResult {
    Regressor model;  // best-validation checkpoint
    TrainReport report;
};

namespace detail {

inline std::vector<std::vector<double>> snapshot(const nn::ParamList& params) {
    std::vector<std::vector<double>> out;
    out.reserve(params.size());
    for (const auto& [name, t] : params) out.emplace_back(t.v().begin(), t.v().end());
    return out;
}

inline void restore(const nn::ParamList& params, const std::vector<std::vector<double>>& snap) {
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor t = params[i].second;  // shared handle; writes reach the model
        std::copy(snap[i].begin(), snap[i].end(), t.v().begin());
    }
}

inline Tensor take_rows(const Tensor& x, const std::vector<i64>& ids, i64 lo, i64 n) {
    Tensor out(Shape{n, x.dim(1)});
    const i64 d = x.dim(1);
    for (i64 r = 0; r < n; ++r) {
        const i64 src = ids[static_cast<size_t>(lo + r)];
        std::copy(x.v().begin() + src * d, x.v().begin() + (src + 1) * d,
                  out.v().begin() + r * d);
    }
    return out;
}

}  // namespace detail

// Minibatch MSE training with early stopping on validation MSE; returns the
// best-validation checkpoint. Row 0 of the report is the pre-training
// evaluation, so zero-epoch training just echoes the initial losses. From
// epoch 1 onward the train columns are the epoch means of the minibatch
// training-mode losses (the objective actually descended); the val columns
// are always eval-mode.
inline TrainResult train_regressor(Regressor model, const Dataset& data,
                                   const TrainConfig& tcfg) {
    data.validate();
    ND_CHECK(tcfg.epochs >= 0 && tcfg.batch >= 2 && tcfg.lr > 0.0 && tcfg.patience >= 1,
             ConfigError, "train_regressor: epochs >= 0, batch >= 2, lr > 0, patience >= 1");
    ND_CHECK(data.x_train.dim(1) == model.config().input_len &&
                 data.y_train.dim(1) == model.config().output_len,
             ConfigError, "train_regressor: dataset widths do not match the model config");

    TrainResult result;
    result.model = std::move(model);
    nn::Adam opt(result.model.parameters(), tcfg.lr);
    Rng rng(tcfg.seed);
    Rng drop_rng = rng.child(1);
    Rng batch_rng = rng.child(2);

    auto evaluate = [&](i64 epoch) {
        EpochRow row;
        row.epoch = epoch;
        const EvalPair tr = eval_metrics(result.model.predict(data.x_train), data.y_train);
        const EvalPair va = eval_metrics(result.model.predict(data.x_val), data.y_val);
        row.train_mse = tr.mse;
        row.train_mae = tr.mae;
        row.val_mse = va.mse;
        row.val_mae = va.mae;
        return row;
    };

    // Checkpoints must capture the normalization buffers along with the
    // trainable parameters, or the restored model would predict with
    // end-of-training statistics.
    nn::ParamList tracked = result.model.parameters();
    {
        nn::ParamList bufs = result.model.buffers();
        tracked.insert(tracked.end(), bufs.begin(), bufs.end());
    }
    TrainReport& report = result.report;
    report.rows.push_back(evaluate(0));
    report.best_epoch = 0;
    report.best_val_mse = report.rows[0].val_mse;
    auto best = detail::snapshot(tracked);

    const i64 n = data.x_train.dim(0);
    std::vector<i64> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), i64{0});
    i64 since_best = 0;

    for (i64 epoch = 1; epoch <= tcfg.epochs; ++epoch) {
        batch_rng.shuffle(order);
        double se = 0.0, ae = 0.0;
        i64 elements = 0;
        for (i64 lo = 0, b = 0; lo < n; lo += tcfg.batch, ++b) {
            const i64 bs = std::min(tcfg.batch, n - lo);
            if (bs < 2) break;  // batch-norm training stats need >= 2 rows
            Tensor xb = detail::take_rows(data.x_train, order, lo, bs);
            Tensor yb = detail::take_rows(data.y_train, order, lo, bs);
            GradTape tape;
            double step_loss;
            {
                TapeScope scope(tape);
                Tensor pred = result.model.forward_train(xb, drop_rng);
                Tensor loss = nd::mse_loss(pred, yb);
                step_loss = loss.v()[0];
                ND_CHECK(std::isfinite(step_loss), SolverError,
                         "train_regressor: non-finite loss at epoch " << epoch << " batch " << b
                                                                      << " (lr=" << tcfg.lr << ")");
                for (i64 i = 0; i < pred.numel(); ++i)
                    ae += std::abs(pred.v()[i] - yb.v()[i]);
                opt.zero_grad();
                tape.backward(loss);
            }
            opt.step();
            se += step_loss * static_cast<double>(bs * data.y_train.dim(1));
            elements += bs * data.y_train.dim(1);
        }
        EpochRow row;
        row.epoch = epoch;
        row.train_mse = se / static_cast<double>(elements);
        row.train_mae = ae / static_cast<double>(elements);
        const EvalPair va = eval_metrics(result.model.predict(data.x_val), data.y_val);
        row.val_mse = va.mse;
        row.val_mae = va.mae;
        report.rows.push_back(row);
        if (row.val_mse < report.best_val_mse) {
            report.best_val_mse = row.val_mse;
            report.best_epoch = epoch;
            best = detail::snapshot(tracked);
            since_best = 0;
        } else if (++since_best >= tcfg.patience) {
            report.stopped_early = true;
            break;
        }
    }

    detail::restore(tracked, best);
    return result;
}

// ----------------------------------------------------------------- ridge

// Closed-form multi-output ridge on the same split, reported with the same
// metrics as train_regressor for the comparison row.
inline EvalPair ridge_baseline(const Tensor& x_train, const Tensor& y_train,
                               const Tensor& x_test, const Tensor& y_test, double alpha) {
    const ridge::RidgeModel model = ridge::fit(x_train, y_train, alpha);
    return eval_metrics(ridge::predict_batch(model, x_test), y_test);
}

// ------------------------------------------------------------- benchmark

struct BenchmarkRow {
    std::string name;
    EvalPair val;
    EvalPair test;
};

struct BenchmarkReport {
    std::vector<BenchmarkRow> rows;

    std::string csv() const {
        auto fmt = [](double v) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.12g", v);
            return std::string(buf);
        };
        std::string out = "model,val_mse,val_mae,test_mse,test_mae\n";
        for (const auto& r : rows)
            out += r.name + "," + fmt(r.val.mse) + "," + fmt(r.val.mae) + "," + fmt(r.test.mse) +
                   "," + fmt(r.test.mae) + "\n";
        return out;
    }

    const BenchmarkRow& row(const std::string& name) const {
        for (const auto& r : rows)
            if (r.name == name) return r;
        throw ConfigError("BenchmarkReport: no row named '" + name + "'");
    }
};

// Trains the three architecture variants on the same split and appends the
// closed-form ridge comparison row.
inline BenchmarkReport run_benchmark(const Dataset& data, const RegressorConfig& rcfg,
                                     const TrainConfig& tcfg, double ridge_alpha) {
    data.validate(true);
    BenchmarkReport report;
    for (Arch arch : {Arch::gru, Arch::conv, Arch::transformer}) {
        TrainResult res = train_regressor(Regressor(rcfg, arch), data, tcfg);
        BenchmarkRow row;
        row.name = arch_name(arch);
        row.val = eval_metrics(res.model.predict(data.x_val), data.y_val);
        row.test = eval_metrics(res.model.predict(data.x_test), data.y_test);
        report.rows.push_back(std::move(row));
    }
    BenchmarkRow ridge_row;
    ridge_row.name = "ridge";
    ridge_row.val = ridge_baseline(data.x_train, data.y_train, data.x_val, data.y_val,
                                   ridge_alpha);
    ridge_row.test = ridge_baseline(data.x_train, data.y_train, data.x_test, data.y_test,
                                    ridge_alpha);
    report.rows.push_back(std::move(ridge_row));
    return report;
}

// ------------------------------------------------------------- persistence

inline void save_regressor(const Regressor& model, const std::filesystem::path& stem) {
    TensorArchive<double> ar;
    nn::save_params(ar, model.parameters());
    nn::save_params(ar, model.buffers());
    ar.save(stem.string() + ".ndar");
    const RegressorConfig& c = model.config();
    nlohmann::json j;
    j["format"] = "neurodecode.regressor.v1";
    j["arch"] = arch_name(model.arch());
    j["config"] = {{"input_len", c.input_len},   {"seq_chunks", c.seq_chunks},
                   {"hidden", c.hidden},         {"fc_hidden", c.fc_hidden},
                   {"output_len", c.output_len}, {"dropout_p", c.dropout_p},
                   {"attn_heads", c.attn_heads}, {"seed", c.seed}};
    std::ofstream os(stem.string() + ".json");
    ND_CHECK(os.good(), ArtifactError, "save_regressor: cannot open " << stem << ".json");
    os << j.dump(2) << "\n";
}

inline Regressor load_regressor(const std::filesystem::path& stem) {
    std::ifstream is(stem.string() + ".json");
    ND_CHECK(is.good(), ArtifactError, "load_regressor: cannot open " << stem << ".json");
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError(std::string("load_regressor: bad JSON sidecar: ") + e.what());
    }
    ND_CHECK(j.value("format", "") == "neurodecode.regressor.v1", ArtifactError,
             "load_regressor: unrecognized format tag");
    RegressorConfig c;
    std::string arch;
    try {
        const nlohmann::json& cj = j.at("config");
        c.input_len = cj.at("input_len").get<i64>();
        c.seq_chunks = cj.at("seq_chunks").get<i64>();
        c.hidden = cj.at("hidden").get<i64>();
        c.fc_hidden = cj.at("fc_hidden").get<i64>();
        c.output_len = cj.at("output_len").get<i64>();
        c.dropout_p = cj.at("dropout_p").get<double>();
        c.attn_heads = cj.at("attn_heads").get<i64>();
        c.seed = cj.at("seed").get<u64>();
        arch = j.at("arch").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError(std::string("load_regressor: incomplete sidecar: ") + e.what());
    }
    Regressor model(c, parse_arch(arch));
    TensorArchive<double> ar = TensorArchive<double>::load(stem.string() + ".ndar");
    nn::ParamList params = model.parameters();
    nn::load_params(ar, params);
    nn::ParamList buffers = model.buffers();
    nn::load_params(ar, buffers);
    return model;
}

}  // namespace nd::stage1
