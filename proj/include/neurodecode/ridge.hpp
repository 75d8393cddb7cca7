#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "linalg.hpp"
#include "ops.hpp"
#include "serialize.hpp"
#include "tensor.hpp"

// Closed-form multi-output ridge regression from beta vectors to embedding
// targets: the second-stage conditioning priors. Solved on centered data via
// the shifted normal equations, with the bias restoring the column means.

namespace nd::ridge {

constexpr double kPaperAlpha = 50000.0;

struct RidgeModel {
    Tensor weights;     // [V, D_out]
    Tensor bias;        // [D_out]
    double alpha = 0.0;
    // Target layout: predictions reshape row-major to [rows, d] with
    // rows * d == D_out (row r occupies flat slots [r*d, (r+1)*d)).
    i64 rows = 1;
    i64 d = 0;

    i64 n_features() const { return weights.defined() ? weights.dim(0) : 0; }
    i64 n_outputs() const { return weights.defined() ? weights.dim(1) : 0; }
};

namespace detail {

inline Tensor column_means(const Tensor& m) {
    const i64 n = m.dim(0), k = m.dim(1);
    Tensor mu(Shape{k});
    for (i64 i = 0; i < n; ++i)
        for (i64 j = 0; j < k; ++j) mu.v()[j] += m.at({i, j});
    for (i64 j = 0; j < k; ++j) mu.v()[j] /= static_cast<double>(n);
    return mu;
}

inline Tensor center_columns(const Tensor& m, const Tensor& mu) {
    Tensor out(m.shape());
    const i64 n = m.dim(0), k = m.dim(1);
    for (i64 i = 0; i < n; ++i)
        for (i64 j = 0; j < k; ++j) out.at({i, j}) = m.at({i, j}) - mu.v()[j];
    return out;
}

}  // namespace detail

// W = (Xc^T Xc + alpha I)^-1 Xc^T Yc on column-centered data; the bias makes
// predict(column means of X) return the column means of Y for every alpha.
inline RidgeModel fit(const Tensor& x, const Tensor& y, double alpha, i64 rows = 1, i64 d = -1) {
    la::check_mat(x, "ridge::fit");
    la::check_mat(y, "ridge::fit");
    ND_CHECK(x.dim(0) == y.dim(0), DimensionError,
             "ridge::fit: X has " << x.dim(0) << " rows but Y has " << y.dim(0));
    ND_CHECK(x.dim(0) >= 2, ConfigError, "ridge::fit: needs N >= 2 samples");
    ND_CHECK(std::isfinite(alpha) && alpha >= 0.0, ConfigError,
             "ridge::fit: alpha must be finite and >= 0");
    ND_CHECK(x.all_finite() && y.all_finite(), NumericError,
             "ridge::fit: non-finite entries in the inputs");
    const i64 v = x.dim(1), dout = y.dim(1);
    if (d < 0) {
        d = dout;
        rows = 1;
    }
    ND_CHECK(rows >= 1 && d >= 1 && rows * d == dout, ConfigError,
             "ridge::fit: layout " << rows << "x" << d << " does not flatten to " << dout
                                   << " outputs");

    const Tensor x_mean = detail::column_means(x);
    const Tensor y_mean = detail::column_means(y);
    const Tensor xc = detail::center_columns(x, x_mean);
    const Tensor yc = detail::center_columns(y, y_mean);

    if (alpha == 0.0) {
        // Unregularized: a rank-deficient design has no unique solution.
        Tensor gram = la::mat_tmul(xc, xc);
        std::vector<double> l(gram.v().begin(), gram.v().end());
        ND_CHECK(la::cholesky_factor(l, v), SolverError,
                 "ridge::fit: design is rank-deficient and alpha = 0; "
                 "supply alpha > 0 or drop dependent columns");
    }

    RidgeModel model;
    model.weights = la::ridge_normal_solve(xc, yc, alpha);
    model.alpha = alpha;
    model.rows = rows;
    model.d = d;
    ND_CHECK(model.weights.all_finite(), NumericError, "ridge::fit: non-finite weights");

    model.bias = Tensor(Shape{dout});
    for (i64 j = 0; j < dout; ++j) {
        double acc = 0.0;
        for (i64 f = 0; f < v; ++f) acc += x_mean.v()[f] * model.weights.at({f, j});
        model.bias.v()[j] = y_mean.v()[j] - acc;
    }
    return model;
}

// Flat prediction W^T beta + b; length must match the fitted feature count.
inline Tensor predict(const RidgeModel& model, const Tensor& beta) {
    ND_CHECK(model.weights.defined(), ConfigError, "ridge::predict: model is unfitted");
    ND_CHECK(beta.rank() == 1 && beta.dim(0) == model.n_features(), DimensionError,
             "ridge::predict: expected " << model.n_features() << " features, got "
                                         << shape_str(beta.shape()));
    const i64 v = model.n_features(), dout = model.n_outputs();
    Tensor out(Shape{dout});
    for (i64 j = 0; j < dout; ++j) out.v()[j] = model.bias.v()[j];
    for (i64 f = 0; f < v; ++f) {
        const double bf = beta.v()[f];
        if (bf == 0.0) continue;
        for (i64 j = 0; j < dout; ++j) out.v()[j] += bf * model.weights.at({f, j});
    }
    return out;
}

inline Tensor predict_batch(const RidgeModel& model, const Tensor& x) {
    la::check_mat(x, "ridge::predict_batch");
    ND_CHECK(x.dim(1) == model.n_features(), DimensionError,
             "ridge::predict_batch: expected " << model.n_features() << " features, got "
                                               << x.dim(1));
    Tensor out(Shape{x.dim(0), model.n_outputs()});
    for (i64 i = 0; i < x.dim(0); ++i) {
        Tensor row(Shape{x.dim(1)});
        for (i64 j = 0; j < x.dim(1); ++j) row.v()[j] = x.at({i, j});
        Tensor pred = predict(model, row);
        std::copy(pred.v().begin(), pred.v().end(), out.v().begin() + i * model.n_outputs());
    }
    return out;
}

// Embedding-shaped prediction: reshaped to the configured [rows, d] layout
// and re-normalized row-wise to unit L2 for conditioning use.
inline Tensor predict_rows(const RidgeModel& model, const Tensor& beta) {
    Tensor flat = predict(model, beta);
    return nd::l2_normalize_rows(nd::reshape(flat, Shape{model.rows, model.d}));
}

// ------------------------------------------------------------- persistence

inline void save_ridge(const RidgeModel& model, const std::filesystem::path& stem) {
    ND_CHECK(model.weights.defined(), ConfigError, "save_ridge: model is unfitted");
    TensorArchive<double> ar;
    ar.put("weights", model.weights);
    ar.put("bias", model.bias);
    ar.save(stem.string() + ".ndar");
    nlohmann::json j;
    j["format"] = "neurodecode.ridge.v1";
    j["alpha"] = model.alpha;
    j["rows"] = model.rows;
    j["d"] = model.d;
    j["n_features"] = model.n_features();
    j["n_outputs"] = model.n_outputs();
    std::ofstream os(stem.string() + ".json");
    ND_CHECK(os.good(), ArtifactError, "save_ridge: cannot open " << stem << ".json");
    os << j.dump(2) << "\n";
}

inline RidgeModel load_ridge(const std::filesystem::path& stem) {
    std::ifstream is(stem.string() + ".json");
    ND_CHECK(is.good(), ArtifactError, "load_ridge: cannot open " << stem << ".json");
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError(std::string("load_ridge: bad JSON sidecar: ") + e.what());
    }
    ND_CHECK(j.value("format", "") == "neurodecode.ridge.v1", ArtifactError,
             "load_ridge: unrecognized format tag");
    RidgeModel model;
    model.alpha = j["alpha"].get<double>();
    model.rows = j["rows"].get<i64>();
    model.d = j["d"].get<i64>();
    TensorArchive<double> ar = TensorArchive<double>::load(stem.string() + ".ndar");
    model.weights = ar.get("weights").clone();
    model.bias = ar.get("bias").clone();
    ND_CHECK(model.weights.rank() == 2 && model.bias.rank() == 1 &&
                 model.bias.dim(0) == model.weights.dim(1) &&
                 model.rows * model.d == model.weights.dim(1),
             ArtifactError, "load_ridge: inconsistent persisted shapes");
    return model;
}

}  // namespace nd::ridge
