#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace dp {

// splitmix64 finalizer. Used both as the generator step and for seed mixing.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Mix an extra word into a seed. Order-sensitive, so derive_seed(a,b) != derive_seed(b,a).
inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
    return splitmix64(seed ^ (splitmix64(salt) + 0x9e3779b97f4a7c15ULL));
}

// FNV-1a over a string, for deriving per-purpose stream seeds from names.
inline uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t derive_seed(uint64_t seed, std::string_view purpose, uint64_t index = 0) {
    return mix_seed(mix_seed(seed, fnv1a(purpose)), index);
}

// Deterministic RNG with identical output on every platform. The standard
// library distributions are implementation-defined, so uniforms and normals
// are produced here directly (Box-Muller for normals).
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1). 53-bit mantissa path.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Rejection-free modulo is fine here: n is
    // always tiny relative to 2^64 so the bias is far below visibility.
    uint64_t uniform_int(uint64_t n) { return n ? next_u64() % n : 0; }

    // Standard normal via Box-Muller. Both outputs are consumed (cached pair)
    // so the draw count per normal is deterministic.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // Guard the log: uniform() can return exactly 0.
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Fisher-Yates shuffle with this stream.
    template <typename V>
    void shuffle(V& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace dp
