#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "metrics.hpp"
#include "nn.hpp"
#include "serialize.hpp"
#include "synth.hpp"
#include "tensor.hpp"

// Dual-encoder image/text embedding model trained with the symmetric
// contrastive objective: matched image-caption pairs are pulled together and
// in-batch mismatches pushed apart in a shared embedding space. Supplies the
// conditioning embeddings and regression targets for the second stage.

namespace nd::contrastive {

// ------------------------------------------------------------------- loss

// Symmetric cross-entropy over similarity logits divided by the temperature,
// averaged over the image->text and text->image directions. The published
// equation's sign convention and 2N placement are nonstandard for the
// objective it cites; this is the standard symmetric form (each direction a
// mean row-wise cross-entropy against the diagonal, averaged).
inline Tensor contrastive_loss_from_similarity(const Tensor& sim, const Tensor& tau) {
    ND_CHECK(sim.rank() == 2 && sim.dim(0) == sim.dim(1), DimensionError,
             "contrastive_loss: expects a square similarity matrix, got "
                 << shape_str(sim.shape()));
    ND_CHECK(sim.dim(0) >= 2, ConfigError,
             "contrastive_loss: needs N >= 2 pairs, a single pair has no negatives");
    ND_CHECK(tau.defined() && tau.numel() == 1 && tau.v()[0] > 0.0, ConfigError,
             "contrastive_loss: temperature must be a positive scalar");
    const i64 n = sim.dim(0);
    std::vector<i64> labels(static_cast<size_t>(n));
    std::iota(labels.begin(), labels.end(), i64{0});
    Tensor inv_tau = nd::div(Tensor(Shape{1}, 1.0), tau);
    Tensor logits = nd::mul_scalar_t(sim, inv_tau);
    Tensor ce_img = nd::cross_entropy_rows(logits, labels);
    Tensor ce_txt = nd::cross_entropy_rows(nd::transpose2d(logits), labels);
    return nd::mul_scalar(nd::add(ce_img, ce_txt), 0.5);
}

// Cosine-similarity matrix between row sets; rows are L2-normalized here, so
// already-normalized inputs pass through unchanged.
inline Tensor cosine_similarity_matrix(const Tensor& a, const Tensor& b) {
    ND_CHECK(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1), DimensionError,
             "cosine_similarity_matrix: expects [N,d] and [M,d], got "
                 << shape_str(a.shape()) << " vs " << shape_str(b.shape()));
    return nd::matmul(nd::l2_normalize_rows(a), nd::transpose2d(nd::l2_normalize_rows(b)));
}

inline Tensor contrastive_loss(const Tensor& z_img, const Tensor& z_txt, const Tensor& tau) {
    ND_CHECK(z_img.shape() == z_txt.shape(), DimensionError,
             "contrastive_loss: batch shapes differ, " << shape_str(z_img.shape()) << " vs "
                                                       << shape_str(z_txt.shape()));
    return contrastive_loss_from_similarity(cosine_similarity_matrix(z_img, z_txt), tau);
}

inline Tensor contrastive_loss(const Tensor& z_img, const Tensor& z_txt, double tau) {
    return contrastive_loss(z_img, z_txt, Tensor(Shape{1}, tau));
}

// ------------------------------------------------------------------ config

struct ContrastiveConfig {
    i64 embed_dim = 64;
    i64 image_size = 64;
    i64 grid = 4;            // token grid g; vision rows = g*g + 1 (pooled row first)
    i64 text_len = 12;       // text rows; captions padded/truncated to this length
    i64 base_channels = 8;   // first conv width, doubling per downsample
    i64 epochs = 30;
    i64 batch = 32;
    double lr = 3e-3;
    i64 holdout = 32;        // stimuli reserved for the retrieval report
    i64 patience = 8;        // epochs before the divergence guard trips
    u64 seed = 0;

    i64 vision_rows() const { return grid * grid + 1; }
    i64 text_rows() const { return text_len; }

    // Published embedding geometry (77x768 text, 257x768 vision); used for
    // shape-contract checks on an untrained model.
    static ContrastiveConfig paper_dims() {
        ContrastiveConfig c;
        c.embed_dim = 768;
        c.image_size = 64;
        c.grid = 16;
        c.text_len = 77;
        c.base_channels = 16;
        return c;
    }
};

// -------------------------------------------------------------- vocabulary

// Embedder vocabulary: the caption vocabulary plus reserved <pad> and <unk>
// ids appended at the end (in that order).
inline std::vector<std::string> embed_vocabulary() {
    std::vector<std::string> v = synth::vocabulary();
    v.push_back("<pad>");
    v.push_back("<unk>");
    return v;
}

inline i64 pad_id() { return static_cast<i64>(synth::vocabulary().size()); }
inline i64 unk_id() { return pad_id() + 1; }

inline nlohmann::json vocabulary_json() {
    nlohmann::json j;
    const auto v = embed_vocabulary();
    for (size_t i = 0; i < v.size(); ++i) j[v[i]] = i;
    return j;
}

// ------------------------------------------------------------ dual encoder

class DualEncoder {
public:
    DualEncoder() = default;

    explicit DualEncoder(const ContrastiveConfig& cfg) : cfg_(cfg) {
        ND_CHECK(cfg.embed_dim >= 2 && cfg.grid >= 1 && cfg.text_len >= 1 &&
                     cfg.base_channels >= 1,
                 ConfigError, "DualEncoder: dims must be positive (embed_dim >= 2)");
        ND_CHECK(cfg.image_size >= cfg.grid && cfg.image_size % cfg.grid == 0, ConfigError,
                 "DualEncoder: image_size must be a multiple of grid");
        i64 ratio = cfg.image_size / cfg.grid;
        ND_CHECK((ratio & (ratio - 1)) == 0, ConfigError,
                 "DualEncoder: image_size/grid must be a power of two, got " << ratio);
        Rng rng(cfg.seed);
        i64 in_ch = 3, width = cfg.base_channels;
        while (ratio > 1) {
            downs_.emplace_back(in_ch, width, 3, 2, 1, rng);
            in_ch = width;
            width *= 2;
            ratio /= 2;
        }
        to_d_ = nn::Conv2dLayer(in_ch, cfg.embed_dim, 1, 1, 0, rng);
        const i64 vocab = static_cast<i64>(embed_vocabulary().size());
        tokens_ = nn::Embedding(vocab, cfg.embed_dim, rng);
        pos_ = nn::init_uniform(Shape{cfg.text_len, cfg.embed_dim}, rng,
                                1.0 / std::sqrt(static_cast<double>(cfg.embed_dim)));
        theta_ = Tensor::zeros(Shape{1});  // log-temperature; tau = exp(theta) = 1 at init
        theta_.set_requires_grad(true);
    }

    const ContrastiveConfig& config() const { return cfg_; }
    Tensor temperature() const { return nd::exp(theta_); }

    nn::ParamList parameters() const {
        nn::ParamList out;
        for (size_t i = 0; i < downs_.size(); ++i)
            downs_[i].collect("image.down" + std::to_string(i), out);
        to_d_.collect("image.to_d", out);
        tokens_.collect("text.tokens", out);
        out.emplace_back("text.pos", pos_);
        out.emplace_back("temperature.theta", theta_);
        return out;
    }

    // Token-level vision rows for a batch: [N, g*g, d], each row unit-L2.
    Tensor image_tokens(const Tensor& batch) const {
        ND_CHECK(batch.rank() == 4 && batch.dim(1) == 3 && batch.dim(2) == cfg_.image_size &&
                     batch.dim(3) == cfg_.image_size,
                 DimensionError, "DualEncoder: expects [N,3," << cfg_.image_size << ","
                                                              << cfg_.image_size << "], got "
                                                              << shape_str(batch.shape()));
        Tensor h = batch;
        for (const auto& conv : downs_) h = nd::relu(conv.forward(h));
        h = to_d_.forward(h);  // [N, d, g, g]
        const i64 n = h.dim(0), g2 = cfg_.grid * cfg_.grid;
        Tensor t = nd::permute(nd::reshape(h, Shape{n, cfg_.embed_dim, g2}), {0, 2, 1});
        Tensor rows = nd::l2_normalize_rows(nd::reshape(t, Shape{n * g2, cfg_.embed_dim}));
        return nd::reshape(rows, Shape{n, g2, cfg_.embed_dim});
    }

    // Pooled vision embedding: normalized mean over normalized token rows.
    Tensor pooled_image(const Tensor& batch) const {
        return nd::l2_normalize_rows(nn::sequence_mean(image_tokens(batch)));
    }

    // Token-level text rows for one caption: [text_len, d], each row unit-L2.
    // Captions are padded with <pad> / truncated to text_len; ids outside the
    // vocabulary map to <unk>.
    Tensor text_tokens(const std::vector<i64>& caption) const {
        const i64 vocab = static_cast<i64>(embed_vocabulary().size());
        std::vector<i64> ids(static_cast<size_t>(cfg_.text_len), pad_id());
        for (size_t i = 0; i < caption.size() && i < static_cast<size_t>(cfg_.text_len); ++i)
            ids[i] = (caption[i] >= 0 && caption[i] < vocab) ? caption[i] : unk_id();
        return nd::l2_normalize_rows(nd::add(tokens_.forward(ids), pos_));
    }

    // Pooled text embeddings for a caption batch: [N, d], rows unit-L2.
    // Pooling averages all rows; <pad> rows contribute a learned constant.
    Tensor pooled_text(const std::vector<std::vector<i64>>& captions) const {
        ND_CHECK(!captions.empty(), ConfigError, "DualEncoder: empty caption batch");
        std::vector<Tensor> rows;
        rows.reserve(captions.size());
        for (const auto& cap : captions)
            rows.push_back(
                nd::reshape(text_tokens(cap), Shape{1, cfg_.text_len, cfg_.embed_dim}));
        return nd::l2_normalize_rows(nn::sequence_mean(nd::concat(rows, 0)));
    }

private:
    ContrastiveConfig cfg_;
    std::vector<nn::Conv2dLayer> downs_;
    nn::Conv2dLayer to_d_;
    nn::Embedding tokens_;
    Tensor pos_;
    Tensor theta_;
};

// --------------------------------------------------------- embedding pairs

struct EmbeddingPair {
    Tensor vision;  // [vision_rows, d]
    Tensor text;    // [text_rows, d]
};

// Full vision embedding of one image: pooled row first, then the g*g token
// rows; every row unit-L2.
inline Tensor embed_image(const DualEncoder& model, const Tensor& image) {
    ND_CHECK(image.rank() == 3 && image.dim(0) == 3, DimensionError,
             "embed_image: expects one [3,H,W] image, got " << shape_str(image.shape()));
    Tensor batch(Shape{1, 3, image.dim(1), image.dim(2)});
    std::copy(image.v().begin(), image.v().end(), batch.v().begin());
    const i64 g2 = model.config().grid * model.config().grid, d = model.config().embed_dim;
    Tensor tokens = nd::reshape(model.image_tokens(batch), Shape{g2, d});
    Tensor pooled = nd::l2_normalize_rows(nn::sequence_mean(nd::reshape(
        tokens.clone(), Shape{1, g2, d})));
    return nd::concat(std::vector<Tensor>{pooled, tokens}, 0);
}

inline Tensor embed_text(const DualEncoder& model, const std::vector<i64>& caption) {
    return model.text_tokens(caption);
}

// ---------------------------------------------------------------- training

struct RetrievalReport {
    i64 gallery = 0;
    double chance = 0.0;                 // 1/gallery
    double top1_image_to_text = 0.0;
    double top1_text_to_image = 0.0;
    double pairwise_accuracy = 0.0;      // matched-above-mismatched fraction
    double final_loss = 0.0;
    i64 epochs_run = 0;
    std::vector<double> epoch_losses;
};

struct TrainResult {
    DualEncoder model;
    RetrievalReport report;
    std::vector<i64> holdout_ids;  // stimuli indices behind the report
};

namespace detail {

inline Tensor stack_images(const std::vector<synth::Stimulus>& stimuli,
                           const std::vector<i64>& ids, i64 image_size) {
    Tensor out(Shape{static_cast<i64>(ids.size()), 3, image_size, image_size});
    const i64 stride = 3 * image_size * image_size;
    for (size_t i = 0; i < ids.size(); ++i) {
        const Tensor& img = stimuli[static_cast<size_t>(ids[i])].image;
        ND_CHECK(img.numel() == stride, DimensionError,
                 "train_dual_encoder: stimulus image size mismatch");
        std::copy(img.v().begin(), img.v().end(),
                  out.v().begin() + static_cast<i64>(i) * stride);
    }
    return out;
}

}  // namespace detail

// Retrieval over a fixed gallery: pooled-embedding cosine ranking in both
// directions plus the ordered-pair matched-vs-mismatched success fraction.
inline RetrievalReport evaluate_retrieval(const DualEncoder& model,
                                          const std::vector<synth::Stimulus>& stimuli,
                                          const std::vector<i64>& ids) {
    ND_CHECK(ids.size() >= 2, ConfigError, "evaluate_retrieval: needs >= 2 items");
    Tensor zi = model.pooled_image(detail::stack_images(stimuli, ids, model.config().image_size));
    std::vector<std::vector<i64>> caps;
    caps.reserve(ids.size());
    for (i64 id : ids) caps.push_back(stimuli[static_cast<size_t>(id)].caption);
    Tensor zt = model.pooled_text(caps);
    Tensor sim = nd::matmul(zi, nd::transpose2d(zt));  // rows already unit-L2

    RetrievalReport rep;
    rep.gallery = static_cast<i64>(ids.size());
    rep.chance = 1.0 / static_cast<double>(rep.gallery);
    i64 hit_i2t = 0, hit_t2i = 0;
    for (i64 i = 0; i < rep.gallery; ++i) {
        i64 best_j = 0, best_i = 0;
        for (i64 j = 1; j < rep.gallery; ++j) {
            if (sim.at({i, j}) > sim.at({i, best_j})) best_j = j;
            if (sim.at({j, i}) > sim.at({best_i, i})) best_i = j;
        }
        if (best_j == i) ++hit_i2t;
        if (best_i == i) ++hit_t2i;
    }
    rep.top1_image_to_text = static_cast<double>(hit_i2t) / static_cast<double>(rep.gallery);
    rep.top1_text_to_image = static_cast<double>(hit_t2i) / static_cast<double>(rep.gallery);
    rep.pairwise_accuracy = metrics::two_way_from_similarity(sim);
    return rep;
}

inline RetrievalReport evaluate_retrieval(const DualEncoder& model,
                                          const std::vector<synth::Stimulus>& stimuli) {
    std::vector<i64> ids(stimuli.size());
    std::iota(ids.begin(), ids.end(), i64{0});
    return evaluate_retrieval(model, stimuli, ids);
}

// Minibatch contrastive training with a divergence guard; the last
// cfg.holdout stimuli (after a seeded shuffle) form the retrieval gallery.
inline TrainResult train_dual_encoder(const std::vector<synth::Stimulus>& stimuli,
                                      const ContrastiveConfig& cfg) {
    const i64 n = static_cast<i64>(stimuli.size());
    ND_CHECK(cfg.holdout >= 2 && cfg.batch >= 2 && cfg.epochs >= 1, ConfigError,
             "train_dual_encoder: holdout/batch/epochs must be >= 2/2/1");
    ND_CHECK(n >= cfg.holdout + cfg.batch, ConfigError,
             "train_dual_encoder: needs at least holdout+batch = "
                 << cfg.holdout + cfg.batch << " stimuli, got " << n);

    Rng rng(cfg.seed);
    std::vector<i64> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), i64{0});
    Rng split_rng = rng.child(1);
    split_rng.shuffle(order);
    std::vector<i64> heldout(order.end() - cfg.holdout, order.end());
    std::vector<i64> train_ids(order.begin(), order.end() - cfg.holdout);

    TrainResult result;
    result.model = DualEncoder(cfg);
    nn::Adam opt(result.model.parameters(), cfg.lr);
    Rng batch_rng = rng.child(2);
    const double ln_n = std::log(static_cast<double>(cfg.batch));

    for (i64 epoch = 0; epoch < cfg.epochs; ++epoch) {
        batch_rng.shuffle(train_ids);
        double epoch_loss = 0.0;
        i64 steps = 0;
        for (i64 start = 0; start + cfg.batch <= static_cast<i64>(train_ids.size());
             start += cfg.batch) {
            std::vector<i64> ids(train_ids.begin() + start, train_ids.begin() + start + cfg.batch);
            Tensor images = detail::stack_images(stimuli, ids, cfg.image_size);
            std::vector<std::vector<i64>> caps;
            caps.reserve(ids.size());
            for (i64 id : ids) caps.push_back(stimuli[static_cast<size_t>(id)].caption);
            GradTape tape;
            double step_loss;
            try {
                TapeScope scope(tape);
                Tensor loss = contrastive_loss(result.model.pooled_image(images),
                                               result.model.pooled_text(caps),
                                               result.model.temperature());
                step_loss = loss.v()[0];
                opt.zero_grad();
                tape.backward(loss);
            } catch (const NumericError& e) {
                // Optimizer blow-up surfaces as overflow inside the graph;
                // report it as the divergence it is, with training context.
                throw SolverError("train_dual_encoder: diverged, numeric failure at epoch " +
                                  std::to_string(epoch + 1) + " step " + std::to_string(steps + 1) +
                                  ": " + e.what());
            }
            opt.step();
            epoch_loss += step_loss;
            ++steps;
        }
        epoch_loss /= static_cast<double>(steps);
        result.report.epoch_losses.push_back(epoch_loss);
        result.report.epochs_run = epoch + 1;
        const bool blown_up = !std::isfinite(epoch_loss);
        if (blown_up || (epoch + 1 >= cfg.patience && epoch_loss > ln_n)) {
            std::string tail;
            const size_t k = result.report.epoch_losses.size();
            for (size_t i = k > 4 ? k - 4 : 0; i < k; ++i)
                tail += (tail.empty() ? "" : ", ") + std::to_string(result.report.epoch_losses[i]);
            throw SolverError("train_dual_encoder: diverged, epoch-mean loss " +
                              std::to_string(epoch_loss) +
                              (blown_up ? " is not finite"
                                        : " still above ln(batch)=" + std::to_string(ln_n)) +
                              " after " + std::to_string(epoch + 1) +
                              " epochs (recent losses: " + tail + ")");
        }
    }
    result.report.final_loss = result.report.epoch_losses.back();

    RetrievalReport retrieval = evaluate_retrieval(result.model, stimuli, heldout);
    retrieval.final_loss = result.report.final_loss;
    retrieval.epochs_run = result.report.epochs_run;
    retrieval.epoch_losses = std::move(result.report.epoch_losses);
    result.report = std::move(retrieval);
    result.holdout_ids = std::move(heldout);
    return result;
}

// ------------------------------------------------- metric-extractor bridge

// Tap on the trained image tower: pooled vision embedding as a feature
// vector for two-way identification / SDC scoring.
inline metrics::FeatureExtractor image_tower_extractor(const DualEncoder& model) {
    DualEncoder snapshot = model;  // tensor handles share trained storage
    return {"contrastive-tower", "pooled-image", [snapshot](const Tensor& image) {
                Tensor row = embed_image(snapshot, image);  // [rows, d], pooled first
                return nd::reshape(nd::slice(row, 0, 0, 1), Shape{snapshot.config().embed_dim});
            }};
}

// ------------------------------------------------------------- persistence

inline void save_encoder(const DualEncoder& model, const std::filesystem::path& stem) {
    TensorArchive<double> ar;
    nn::save_params(ar, model.parameters());
    ar.save(stem.string() + ".ndar");
    const ContrastiveConfig& c = model.config();
    nlohmann::json j;
    j["format"] = "neurodecode.dualencoder.v1";
    j["config"] = {{"embed_dim", c.embed_dim},   {"image_size", c.image_size},
                   {"grid", c.grid},             {"text_len", c.text_len},
                   {"base_channels", c.base_channels}, {"seed", c.seed}};
    j["vocabulary"] = vocabulary_json();
    std::ofstream os(stem.string() + ".json");
    ND_CHECK(os.good(), ArtifactError, "save_encoder: cannot open " << stem << ".json");
    os << j.dump(2) << "\n";
}

inline DualEncoder load_encoder(const std::filesystem::path& stem) {
    std::ifstream is(stem.string() + ".json");
    ND_CHECK(is.good(), ArtifactError, "load_encoder: cannot open " << stem << ".json");
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError(std::string("load_encoder: bad JSON sidecar: ") + e.what());
    }
    ND_CHECK(j.value("format", "") == "neurodecode.dualencoder.v1", ArtifactError,
             "load_encoder: unrecognized format tag");
    ContrastiveConfig c;
    c.embed_dim = j["config"]["embed_dim"].get<i64>();
    c.image_size = j["config"]["image_size"].get<i64>();
    c.grid = j["config"]["grid"].get<i64>();
    c.text_len = j["config"]["text_len"].get<i64>();
    c.base_channels = j["config"]["base_channels"].get<i64>();
    c.seed = j["config"]["seed"].get<u64>();
    DualEncoder model(c);
    TensorArchive<double> ar = TensorArchive<double>::load(stem.string() + ".ndar");
    nn::ParamList params = model.parameters();
    nn::load_params(ar, params);
    return model;
}

}  // namespace nd::contrastive
