#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ops.hpp"

// Central-difference gradient verification. A check builds the scalar loss
// twice per perturbed coordinate (f(x+h), f(x-h)) with no tape active, then
// once with a tape to obtain analytic gradients, and compares coordinatewise
// with relative error |a - n| / max(1, |a|, |n|).

namespace nd {

struct GradCheckResult {
    double max_rel_err = 0.0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::string worst_param;
    i64 worst_index = -1;
    i64 checked = 0;

    bool ok(double tol) const { return checked > 0 && max_rel_err <= tol; }
};

struct GradCheckOptions {
    double step = 1e-5;
    // Check at most this many coordinates per parameter (deterministically
    // strided); <= 0 checks all of them.
    i64 max_coords_per_param = 0;
};

// `loss_fn` must rebuild the loss from the given parameters on every call.
// Parameters are perturbed in place.
inline GradCheckResult grad_check(const std::function<Tensor()>& loss_fn,
                                  const std::vector<std::pair<std::string, Tensor>>& params,
                                  GradCheckOptions opt = {}) {
    GradCheckResult res;
    // Analytic pass.
    {
        GradTape tape;
        TapeScope scope(tape);
        Tensor loss = loss_fn();
        tape.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& [name, p_] : params) {
        Tensor p = p_;  // shallow handle copy; storage is shared
        std::vector<double> g(static_cast<size_t>(p.numel()), 0.0);
        if (p.has_grad()) {
            auto gs = p.g();
            std::copy(gs.begin(), gs.end(), g.begin());
        }
        analytic.push_back(std::move(g));
        p.zero_grad();
    }
    // Numeric pass (no tape).
    for (size_t pi = 0; pi < params.size(); ++pi) {
        const std::string& name = params[pi].first;
        Tensor p = params[pi].second;
        auto v = p.v();
        const i64 n = p.numel();
        i64 stride = 1;
        if (opt.max_coords_per_param > 0 && n > opt.max_coords_per_param)
            stride = (n + opt.max_coords_per_param - 1) / opt.max_coords_per_param;
        for (i64 i = 0; i < n; i += stride) {
            const double orig = v[i];
            v[i] = orig + opt.step;
            const double fp = loss_fn().item();
            v[i] = orig - opt.step;
            const double fm = loss_fn().item();
            v[i] = orig;
            const double num = (fp - fm) / (2.0 * opt.step);
            const double ana = analytic[pi][static_cast<size_t>(i)];
            const double rel =
                std::abs(ana - num) / std::max({1.0, std::abs(ana), std::abs(num)});
            ++res.checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_analytic = ana;
                res.worst_numeric = num;
                res.worst_param = name;
                res.worst_index = i;
            }
        }
    }
    return res;
}

}  // namespace nd
