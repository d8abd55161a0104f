#pragma once

// Counter-based deterministic RNG. Streams are keyed, not stateful at the
// call site, so draws do not depend on data order or worker count.

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace modmoe::rng {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t mix(uint64_t a, uint64_t b) {
    return splitmix64(a ^ splitmix64(b));
}

inline uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Sequential generator seeded from a key chain.
class Stream {
public:
    explicit Stream(uint64_t seed) : state_(splitmix64(seed)) {}
    Stream(uint64_t seed, uint64_t key) : state_(splitmix64(mix(seed, key))) {}

    uint64_t next_u64() {
        state_ = state_ * 6364136223846793005ULL + 1442695040888963407ULL;
        return splitmix64(state_);
    }

    // Uniform in [0, 1).
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [lo, hi] inclusive.
    int64_t next_int(int64_t lo, int64_t hi) {
        uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
        // Rejection sampling keeps the draw exactly uniform.
        uint64_t limit = UINT64_MAX - UINT64_MAX % range;
        uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return lo + static_cast<int64_t>(v % range);
    }

    // Standard normal via Box-Muller.
    double next_normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 1e-300) u1 = next_double();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// One-shot keyed uniform integer in [lo, hi]; used where a draw must be a
// pure function of its key (e.g. per-document pool sizes).
inline int64_t keyed_int(uint64_t seed, uint64_t key, int64_t lo, int64_t hi) {
    Stream s(seed, key);
    return s.next_int(lo, hi);
}

}  // namespace modmoe::rng
