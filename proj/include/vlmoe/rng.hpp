#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace vlmoe {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
    return splitmix64(a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
}

inline uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Seeded generator. Normal deviates use Box-Muller on top of mt19937_64 so
// the stream does not depend on the standard library's distribution choices.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(splitmix64(seed)), seed_(seed) {}

    uint64_t seed() const { return seed_; }

    uint64_t next_u64() { return eng_(); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    int uniform_int(int n) {
        return static_cast<int>(
            (static_cast<unsigned __int128>(next_u64()) * static_cast<uint64_t>(n)) >> 64);
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Independent substream addressed by a label and indices. Deterministic in
    // (seed, label, a, b, c) regardless of draw order on the parent.
    Rng fork(std::string_view label, uint64_t a = 0, uint64_t b = 0, uint64_t c = 0) const {
        uint64_t h = hash_combine(seed_, fnv1a(label));
        h = hash_combine(h, a);
        h = hash_combine(h, b);
        h = hash_combine(h, c);
        return Rng(h);
    }

private:
    std::mt19937_64 eng_;
    uint64_t seed_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace vlmoe
