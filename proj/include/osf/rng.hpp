#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace osf {

/// Counter-based deterministic RNG (splitmix64 over a mixed key).
///
/// Streams are keyed by (seed, tag, a, b) so any consumer can derive an
/// independent, reproducible stream without threading generator state through
/// call sites. This is what makes checkpoint-resume and re-runs bit-exact.
class Rng {
public:
    Rng() : state_(0x9e3779b97f4a7c15ull) {}
    explicit Rng(uint64_t seed) : state_(mix(seed ^ 0x2545f4914f6cdd1dull)) {}

    static uint64_t hash_tag(std::string_view tag) {
        uint64_t h = 1469598103934665603ull;  // FNV-1a
        for (char c : tag) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        return h;
    }

    static Rng keyed(uint64_t seed, std::string_view tag, uint64_t a = 0, uint64_t b = 0) {
        uint64_t k = mix(seed + 0x9e3779b97f4a7c15ull);
        k = mix(k ^ hash_tag(tag));
        k = mix(k + a * 0xbf58476d1ce4e5b9ull);
        k = mix(k + b * 0x94d049bb133111ebull);
        return Rng::from_state(k);
    }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        return mix(state_);
    }

    /// Uniform in [0, 1).
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    /// Uniform integer in [0, n).
    uint64_t next_below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    /// Standard normal via Box-Muller.
    double next_gaussian() {
        double u1 = next_double(), u2 = next_double();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

private:
    static Rng from_state(uint64_t s) {
        Rng r;
        r.state_ = s;
        return r;
    }

    static uint64_t mix(uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    uint64_t state_;
};

}  // namespace osf
