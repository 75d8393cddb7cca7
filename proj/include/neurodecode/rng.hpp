#pragma once

#include <cmath>
#include <cstdint>

#include "common.hpp"

namespace nd {

// Deterministic PRNG: xoshiro256** seeded through splitmix64, Gaussian
// samples via the polar Box-Muller transform. The integer stream is
// bit-exact everywhere; Gaussian samples additionally depend on
// std::log/std::sqrt being correctly rounded (true on mainstream libms).
class Rng {
public:
    explicit Rng(u64 seed = 0) : seed_(seed) {
        u64 s = seed;
        for (auto& w : state_) w = splitmix64(s);
        have_spare_ = false;
        spare_ = 0.0;
    }

    u64 seed() const { return seed_; }

    u64 next_u64() {
        const u64 result = rotl(state_[1] * 5, 7) * 9;
        const u64 t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // uniform in [0,1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    u64 below(u64 n) {
        ND_CHECK(n > 0, ConfigError, "Rng::below requires n > 0");
        // rejection sampling to avoid modulo bias
        const u64 limit = ~u64(0) - (~u64(0) % n);
        u64 x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    double gauss() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        have_spare_ = true;
        return u * f;
    }

    double gauss(double mean, double sd) { return mean + sd * gauss(); }

    // Independent child stream; deterministic in (parent seed, stream id).
    Rng child(u64 stream_id) const {
        u64 s = seed_ ^ (0x9e3779b97f4a7c15ULL + stream_id * 0xbf58476d1ce4e5b9ULL);
        u64 m = s;
        return Rng(splitmix64(m) ^ stream_id);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (size_t i = v.size() - 1; i > 0; --i) {
            const size_t j = static_cast<size_t>(below(i + 1));
            std::swap(v[i], v[j]);
        }
    }

private:
    static u64 rotl(u64 x, int k) { return (x << k) | (x >> (64 - k)); }

    static u64 splitmix64(u64& x) {
        x += 0x9e3779b97f4a7c15ULL;
        u64 z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    u64 seed_;
    u64 state_[4];
    bool have_spare_;
    double spare_;
};

}  // namespace nd
