#pragma once

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

#include "common.hpp"

namespace nd {

// Worker cap: NEURODECODE_THREADS env var, else hardware concurrency.
inline int max_threads() {
    if (const char* env = std::getenv("NEURODECODE_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

// Data-parallel map over [0, n). f(i) must write only to slot i of any
// shared output so the result is bitwise identical to a sequential run
// for every thread count.
template <class F>
void parallel_for(i64 n, F&& f) {
    const int threads = std::min<i64>(max_threads(), n);
    if (threads <= 1) {
        for (i64 i = 0; i < n; ++i) f(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    const i64 chunk = (n + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        const i64 lo = t * chunk;
        const i64 hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &f] {
            for (i64 i = lo; i < hi; ++i) f(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace nd
