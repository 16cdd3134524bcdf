#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace hsb {

// splitmix64 finalizer; used to derive independent streams from (seed, tag, indices).
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t seed_for(uint64_t seed, std::string_view tag, uint64_t a = 0, uint64_t b = 0) {
    uint64_t h = 0xcbf29ce484222325ULL ^ seed;
    for (char c : tag) h = (h ^ static_cast<uint8_t>(c)) * 0x100000001b3ULL;
    h = mix64(h);
    h = mix64(h ^ a);
    h = mix64(h ^ b);
    return h;
}

// Deterministic stream: uniforms via mt19937_64, gaussians via Box-Muller so the
// sequence does not depend on the standard library's distribution internals.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    double uniform() {  // [0,1)
        return (eng_() >> 11) * (1.0 / 9007199254740992.0);
    }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    int uniform_int(int lo, int hi) {  // inclusive range
        return lo + static_cast<int>(eng_() % static_cast<uint64_t>(hi - lo + 1));
    }
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 1e-300);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double th = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(th);
        have_spare_ = true;
        return r * std::cos(th);
    }
    uint64_t next_u64() { return eng_(); }

private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace hsb
