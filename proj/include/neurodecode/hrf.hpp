#pragma once

#include <cmath>
#include <vector>

#include "tensor.hpp"

// Library of 20 candidate hemodynamic response functions: double-gamma
// curves over a 5x4 grid of peak times (4-8 s) and undershoot ratios
// (0-0.5), sampled on the TR grid out to 32 s and normalized to unit peak.

namespace nd::hrf {

inline constexpr int kLibrarySize = 20;
inline constexpr double kPeakTimes[5] = {4.0, 5.0, 6.0, 7.0, 8.0};
inline constexpr double kUndershootRatios[4] = {0.0, 0.1, 0.25, 0.5};
inline constexpr double kSupportSeconds = 32.0;

// Unnormalized gamma bump with mode at `peak` (scale fixed at 1 s).
inline double gamma_bump(double t, double peak) {
    if (t <= 0.0) return 0.0;
    const double k = peak + 1.0;  // mode of Gamma(k, 1) is k-1
    return std::exp((k - 1.0) * std::log(t) - t);
}

struct HrfLibrary {
    std::vector<Tensor> kernels;  // each [L], unit peak
    double tr;

    i64 length() const { return kernels.empty() ? 0 : kernels[0].numel(); }
};

inline HrfLibrary make_library(double tr) {
    ND_CHECK(tr > 0.0, ConfigError, "HRF library requires TR > 0");
    HrfLibrary lib;
    lib.tr = tr;
    const i64 len = static_cast<i64>(std::ceil(kSupportSeconds / tr)) + 1;
    for (double peak : kPeakTimes) {
        for (double ratio : kUndershootRatios) {
            const double upeak = 2.0 * peak;
            // peak-normalize each lobe before mixing so `ratio` is the
            // undershoot depth relative to the main peak
            const double main_max = gamma_bump(peak, peak);
            const double under_max = gamma_bump(upeak, upeak);
            Tensor k(Shape{len});
            double mx = 0.0;
            for (i64 i = 0; i < len; ++i) {
                const double t = static_cast<double>(i) * tr;
                double v = gamma_bump(t, peak) / main_max;
                if (ratio > 0.0) v -= ratio * gamma_bump(t, upeak) / under_max;
                k.v()[i] = v;
                mx = std::max(mx, v);
            }
            ND_CHECK(mx > 0.0, NumericError, "degenerate HRF kernel");
            for (i64 i = 0; i < len; ++i) k.v()[i] /= mx;
            lib.kernels.push_back(std::move(k));
        }
    }
    return lib;
}

// y[t] += amp * kernel[t - onset_tr] for the kernel support
inline void add_response(std::span<double> y, const Tensor& kernel, i64 onset_tr, double amp) {
    const i64 t_len = static_cast<i64>(y.size());
    const i64 k_len = kernel.numel();
    auto kv = kernel.v();
    for (i64 i = 0; i < k_len; ++i) {
        const i64 t = onset_tr + i;
        if (t < 0) continue;
        if (t >= t_len) break;
        y[static_cast<size_t>(t)] += amp * kv[i];
    }
}

}  // namespace nd::hrf
