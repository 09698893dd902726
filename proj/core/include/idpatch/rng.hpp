#ifndef IDPATCH_RNG_HPP
#define IDPATCH_RNG_HPP

#include <cmath>
#include <cstdint>

namespace idpatch {

// splitmix64, used for seeding and for deriving independent child streams.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z          = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z          = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Mixes an arbitrary list of integers into one seed. Used to derive
// per-record / per-step / per-sample streams from a single master seed
// so that results do not depend on scheduling order.
inline uint64_t mix_seed(std::initializer_list<uint64_t> parts) {
    uint64_t h = 0x243f6a8885a308d3ULL;
    for (uint64_t p : parts) {
        h ^= p + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        uint64_t s = h;
        h          = splitmix64(s);
    }
    return h;
}

// xoshiro256++ with a fixed, self-contained implementation. The standard
// library distributions are not pinned across implementations, so every
// random draw in the project goes through this class.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) {
        uint64_t sm = seed;
        for (auto& word : state_) word = splitmix64(sm);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t      = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // uniform in [0, 1)
    double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) { return next_u64() % n; }

    int range_int(int lo, int hi_inclusive) {
        return lo + static_cast<int>(below(static_cast<uint64_t>(hi_inclusive - lo + 1)));
    }

    // standard normal via Box-Muller; caches the second output
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2   = uniform();
        double r    = std::sqrt(-2.0 * std::log(u1));
        double a    = 6.283185307179586476925286766559 * u2;
        cached_     = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    Rng child(uint64_t tag) { return Rng(mix_seed({next_u64(), tag})); }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t state_[4] = {};
    bool has_cached_   = false;
    double cached_     = 0.0;
};

// FNV-1a, used for config hashes and checkpoint checksums.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; i++) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace idpatch

#endif  // IDPATCH_RNG_HPP
