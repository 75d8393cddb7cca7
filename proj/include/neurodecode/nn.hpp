#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ops.hpp"

// Layer toolkit over the autodiff primitives. Layers are plain structs
// holding parameter tensors; `collect(prefix, out)` appends named
// parameters for optimizers, checkpoints, and gradient checks. Weight
// initialization follows the uniform fan-in convention U(-1/sqrt(fan_in),
// 1/sqrt(fan_in)) throughout.

namespace nd::nn {

using ParamList = std::vector<std::pair<std::string, Tensor>>;

inline i64 param_count(const ParamList& params) {
    i64 n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
}

inline Tensor init_uniform(Shape shape, Rng& rng, double bound) {
    Tensor t = Tensor::uniform(std::move(shape), rng, -bound, bound);
    t.set_requires_grad(true);
    return t;
}

// ------------------------------------------------------------------ layers

struct Linear {
    Tensor w, b;  // w: [in, out]

    Linear() = default;
    Linear(i64 in, i64 out, Rng& rng) {
        const double k = 1.0 / std::sqrt(static_cast<double>(in));
        w = init_uniform(Shape{in, out}, rng, k);
        b = init_uniform(Shape{out}, rng, k);
    }

    Tensor forward(const Tensor& x) const { return nd::linear(x, w, b); }

    void collect(const std::string& p, ParamList& out) const {
        out.emplace_back(p + ".w", w);
        out.emplace_back(p + ".b", b);
    }
};

struct LayerNorm {
    Tensor gamma, beta;
    double eps = 1e-5;

    LayerNorm() = default;
    explicit LayerNorm(i64 dim) {
        gamma = Tensor::ones(Shape{dim});
        gamma.set_requires_grad(true);
        beta = Tensor::zeros(Shape{dim});
        beta.set_requires_grad(true);
    }

    Tensor forward(const Tensor& x) const { return nd::layer_norm(x, gamma, beta, eps); }

    void collect(const std::string& p, ParamList& out) const {
        out.emplace_back(p + ".gamma", gamma);
        out.emplace_back(p + ".beta", beta);
    }
};

struct BatchNorm1d {
    Tensor gamma, beta;
    Tensor running_mean, running_var;  // state buffers, not trainable
    double momentum = 0.1;
    double eps = 1e-5;

    BatchNorm1d() = default;
    explicit BatchNorm1d(i64 dim) {
        gamma = Tensor::ones(Shape{dim});
        gamma.set_requires_grad(true);
        beta = Tensor::zeros(Shape{dim});
        beta.set_requires_grad(true);
        running_mean = Tensor::zeros(Shape{dim});
        running_var = Tensor::ones(Shape{dim});
    }

    Tensor forward(const Tensor& x, bool training) {
        return nd::batch_norm1d(x, gamma, beta, running_mean, running_var, training, momentum,
                                eps);
    }

    void collect(const std::string& p, ParamList& out) const {
        out.emplace_back(p + ".gamma", gamma);
        out.emplace_back(p + ".beta", beta);
    }

    void collect_buffers(const std::string& p, ParamList& out) const {
        out.emplace_back(p + ".running_mean", running_mean);
        out.emplace_back(p + ".running_var", running_var);
    }
};

// Single-direction GRU, 3 gates (reset | update | candidate) with separate
// input-side and hidden-side bias vectors: 3H(in+H) + 6H parameters. This
// two-bias convention is what reproduces the published network sizes.
struct Gru {
    i64 input = 0, hidden = 0;
    Tensor w_ih;  // [input, 3H]
    Tensor w_hh;  // [H, 3H]
    Tensor b_ih, b_hh;  // [3H]

    Gru() = default;
    Gru(i64 input_, i64 hidden_, Rng& rng) : input(input_), hidden(hidden_) {
        const double k = 1.0 / std::sqrt(static_cast<double>(hidden));
        w_ih = init_uniform(Shape{input, 3 * hidden}, rng, k);
        w_hh = init_uniform(Shape{hidden, 3 * hidden}, rng, k);
        b_ih = init_uniform(Shape{3 * hidden}, rng, k);
        b_hh = init_uniform(Shape{3 * hidden}, rng, k);
    }

    // One step: x_t [N, input], h [N, H] -> new h [N, H]
    Tensor step(const Tensor& x_t, const Tensor& h) const {
        const i64 H = hidden;
        Tensor gi = nd::linear(x_t, w_ih, b_ih);
        Tensor gh = nd::linear(h, w_hh, b_hh);
        Tensor r = nd::sigmoid(nd::add(nd::slice(gi, 1, 0, H), nd::slice(gh, 1, 0, H)));
        Tensor z = nd::sigmoid(nd::add(nd::slice(gi, 1, H, H), nd::slice(gh, 1, H, H)));
        Tensor n = nd::tanh(
            nd::add(nd::slice(gi, 1, 2 * H, H), nd::mul(r, nd::slice(gh, 1, 2 * H, H))));
        // h' = (1-z)*n + z*h = n + z*(h-n)
        return nd::add(n, nd::mul(z, nd::sub(h, n)));
    }

    // x: [N, T, input] -> outputs [N, T, H] (original time order even when
    // processing the sequence reversed)
    Tensor forward(const Tensor& x, bool reverse = false) const {
        ND_CHECK(x.rank() == 3 && x.dim(2) == input, DimensionError,
                 "Gru: expected [N,T," << input << "], got " << shape_str(x.shape()));
        const i64 n = x.dim(0), t_len = x.dim(1);
        Tensor h = Tensor::zeros(Shape{n, hidden});
        std::vector<Tensor> outs(static_cast<size_t>(t_len));
        for (i64 s = 0; s < t_len; ++s) {
            const i64 t = reverse ? t_len - 1 - s : s;
            Tensor x_t = nd::reshape(nd::slice(x, 1, t, 1), Shape{n, input});
            h = step(x_t, h);
            outs[static_cast<size_t>(t)] = nd::reshape(h, Shape{n, 1, hidden});
        }
        return nd::concat(outs, 1);
    }

    void collect(const std::string& p, ParamList& out) const {
        out.emplace_back(p + ".w_ih", w_ih);
        out.emplace_back(p + ".w_hh", w_hh);
        out.emplace_back(p + ".b_ih", b_ih);
        out.emplace_back(p + ".b_hh", b_hh);
    }
};

struct BiGru {
    Gru fwd, bwd;

    BiGru() = default;
    BiGru(i64 input, i64 hidden, Rng& rng) : fwd(input, hidden, rng), bwd(input, hidden, rng) {}

    // x: [N, T, input] -> [N, T, 2H]
    Tensor forward(const Tensor& x) const {
        return nd::concat<double>({fwd.forward(x, false), bwd.forward(x, true)}, 2);
    }

    i64 out_dim() const { return 2 * fwd.hidden; }

    void collect(const std::string& p, ParamList& out) const {
        fwd.collect(p + ".fwd", out);
        bwd.collect(p + ".bwd", out);
    }
};

struct Conv1dLayer {
    Tensor w, b;  // w: [out, in, k]
    i64 stride = 1, pad = 0;

    Conv1dLayer() = default;
    Conv1dLayer(i64 in, i64 out, i64 k, i64 stride_, i64 pad_, Rng& rng)
        : stride(stride_), pad(pad_) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in * k));
        w = init_uniform(Shape{out, in, k}, rng, bound);
        b = init_uniform(Shape{out}, rng, bound);
    }

    Tensor forward(const Tensor& x) const { return nd::conv1d(x, w, b, stride, pad); }

    void collect(const std::string& p, ParamList& out) const {
        out.emplace_back(p + ".w", w);
        out.emplace_back(p + ".b", b);
    }
};

struct Conv2dLayer {
    Tensor w, b;  // w: [out, in, k, k]
    i64 stride = 1, pad = 0;

    Conv2dLayer() = default;
    Conv2dLayer(i64 in, i64 out, i64 k, i64 stride_, i64 pad_, Rng& rng)
        : stride(stride_), pad(pad_) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in * k * k));
        w = init_uniform(Shape{out, in, k, k}, rng, bound);
        b = init_uniform(Shape{out}, rng, bound);
    }

    Tensor forward(const Tensor& x) const { return nd::conv2d(x, w, b, stride, pad); }

    void collect(const std::string& p, ParamList& out) const {
        out.emplace_back(p + ".w", w);
        out.emplace_back(p + ".b", b);
    }
};

struct ConvT2dLayer {
    Tensor w, b;  // w: [in, out, k, k]
    i64 stride = 1, pad = 0;

    ConvT2dLayer() = default;
    ConvT2dLayer(i64 in, i64 out, i64 k, i64 stride_, i64 pad_, Rng& rng)
        : stride(stride_), pad(pad_) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(out * k * k));
        w = init_uniform(Shape{in, out, k, k}, rng, bound);
        b = init_uniform(Shape{out}, rng, bound);
    }

    Tensor forward(const Tensor& x) const { return nd::conv_transpose2d(x, w, b, stride, pad); }

    void collect(const std::string& p, ParamList& out) const {
        out.emplace_back(p + ".w", w);
        out.emplace_back(p + ".b", b);
    }
};

struct Embedding {
    Tensor table;  // [V, D]

    Embedding() = default;
    Embedding(i64 vocab, i64 dim, Rng& rng) {
        table = Tensor::randn(Shape{vocab, dim}, rng);
        table.set_requires_grad(true);
    }

    Tensor forward(const std::vector<i64>& ids) const { return nd::embedding(table, ids); }

    void collect(const std::string& p, ParamList& out) const {
        out.emplace_back(p + ".table", table);
    }
};

// Multi-head self-attention over one sequence [T, D]. When `attn_out` is
// given it receives a detached copy of the post-softmax weights, stacked
// per head as [heads*T, T].
struct MultiheadSelfAttention {
    i64 dim = 0, heads = 1;
    Linear q, k, v, o;

    MultiheadSelfAttention() = default;
    MultiheadSelfAttention(i64 dim_, i64 heads_, Rng& rng)
        : dim(dim_),
          heads(heads_),
          q(dim_, dim_, rng),
          k(dim_, dim_, rng),
          v(dim_, dim_, rng),
          o(dim_, dim_, rng) {
        ND_CHECK(dim_ % heads_ == 0, ConfigError,
                 "attention dim " << dim_ << " not divisible by heads " << heads_);
    }

    Tensor forward(const Tensor& x, Tensor* attn_out = nullptr) const {
        ND_CHECK(x.rank() == 2 && x.dim(1) == dim, DimensionError,
                 "MultiheadSelfAttention: expected [T," << dim << "], got "
                                                        << shape_str(x.shape()));
        const i64 t = x.dim(0), dh = dim / heads;
        Tensor qa = q.forward(x), ka = k.forward(x), va = v.forward(x);
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<Tensor> head_outs;
        std::vector<Tensor> attns;
        for (i64 h = 0; h < heads; ++h) {
            Tensor qh = nd::slice(qa, 1, h * dh, dh);
            Tensor kh = nd::slice(ka, 1, h * dh, dh);
            Tensor vh = nd::slice(va, 1, h * dh, dh);
            Tensor scores = nd::mul_scalar(nd::matmul(qh, nd::transpose2d(kh)), scale);
            Tensor attn = nd::softmax(scores);  // [T, T]
            if (attn_out) attns.push_back(attn.clone());
            head_outs.push_back(nd::matmul(attn, vh));
        }
        if (attn_out) *attn_out = nd::concat(attns, 0);
        Tensor cat = heads == 1 ? head_outs[0] : nd::concat(head_outs, 1);
        (void)t;
        return o.forward(cat);
    }

    void collect(const std::string& p, ParamList& out) const {
        q.collect(p + ".q", out);
        k.collect(p + ".k", out);
        v.collect(p + ".v", out);
        o.collect(p + ".o", out);
    }
};

// Mean over the time axis: [N, T, D] -> [N, D]
inline Tensor sequence_mean(const Tensor& x) {
    ND_CHECK(x.rank() == 3, DimensionError, "sequence_mean: expects [N,T,D]");
    const i64 n = x.dim(0), t = x.dim(1), d = x.dim(2);
    Tensor acc = nd::reshape(nd::slice(x, 1, 0, 1), Shape{n, d});
    for (i64 s = 1; s < t; ++s)
        acc = nd::add(acc, nd::reshape(nd::slice(x, 1, s, 1), Shape{n, d}));
    return nd::mul_scalar(acc, 1.0 / static_cast<double>(t));
}

// -------------------------------------------------------------- optimizer

// Adam with bias correction; optional decoupled weight decay.
class Adam {
public:
    explicit Adam(ParamList params, double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8, double weight_decay = 0.0)
        : params_(std::move(params)),
          lr_(lr),
          beta1_(beta1),
          beta2_(beta2),
          eps_(eps),
          weight_decay_(weight_decay) {
        for (const auto& [name, p] : params_) {
            slots_.push_back({std::vector<double>(static_cast<size_t>(p.numel()), 0.0),
                              std::vector<double>(static_cast<size_t>(p.numel()), 0.0)});
        }
    }

    void zero_grad() {
        for (auto& [name, p] : params_) p.zero_grad();
    }

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    const ParamList& params() const { return params_; }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (size_t pi = 0; pi < params_.size(); ++pi) {
            Tensor& p = params_[pi].second;
            if (!p.has_grad()) continue;  // untouched by backward: true zero gradient
            auto g = p.g();
            auto v = p.v();
            auto& [m, s] = slots_[pi];
            for (size_t i = 0; i < m.size(); ++i) {
                ND_CHECK(std::isfinite(g[i]), NumericError,
                         "Adam: non-finite gradient in " << params_[pi].first);
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
                s[i] = beta2_ * s[i] + (1.0 - beta2_) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double shat = s[i] / bc2;
                v[i] -= lr_ * (mhat / (std::sqrt(shat) + eps_) + weight_decay_ * v[i]);
            }
        }
    }

private:
    ParamList params_;
    std::vector<std::pair<std::vector<double>, std::vector<double>>> slots_;
    double lr_, beta1_, beta2_, eps_, weight_decay_;
    i64 t_ = 0;
};

// ------------------------------------------------------- checkpoint glue

template <class Archive>
void save_params(Archive& ar, const ParamList& params) {
    for (const auto& [name, t] : params) ar.put(name, t);
}

template <class Archive>
void load_params(const Archive& ar, ParamList& params) {
    for (auto& [name, t] : params) {
        const auto& stored = ar.get(name);
        ND_CHECK(stored.shape() == t.shape(), ArtifactError,
                 "checkpoint shape mismatch for " << name << ": " << shape_str(stored.shape())
                                                  << " vs " << shape_str(t.shape()));
        std::copy(stored.v().begin(), stored.v().end(), t.v().begin());
    }
}

}  // namespace nd::nn
