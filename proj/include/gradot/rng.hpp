#pragma once

#include <cmath>
#include <cstdint>

namespace gradot {

// SplitMix64: counter-based generator, explicit seeding only. Identical
// seeds give identical streams on every platform; no environmental entropy.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n).
    std::uint64_t next_below(std::uint64_t n) {
        // Rejection sampling keeps the distribution exact.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = next_u64();
        while (v >= limit) {
            v = next_u64();
        }
        return v % n;
    }

    // Standard normal via Box-Muller with a cached spare.
    double next_gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u = 1.0 - next_double();
        const double v = next_double();
        const double r = std::sqrt(-2.0 * std::log(u));
        const double theta = 6.283185307179586476925286766559 * v;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Independent stream derived from this seed and a tag.
    Rng fork(std::uint64_t tag) const {
        Rng mix(state_ ^ (0x632be59bd9b4e019ULL * (tag + 1)));
        mix.next_u64();
        return mix;
    }

private:
    std::uint64_t state_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// FNV-1a 64-bit, used for content hashing of artifacts and sequences.
inline std::uint64_t fnv1a64(const void* bytes, std::size_t len,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace gradot
