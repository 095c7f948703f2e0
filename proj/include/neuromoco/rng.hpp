#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace neuromoco {

// All randomness in the project flows from one root seed, split into named
// streams so that e.g. data generation and the two augmentation views draw
// from independent deterministic sequences. mt19937_64 output is fully
// specified by the standard, and the distributions below are hand-rolled on
// top of raw 64-bit draws, so sequences are reproducible across platforms.
class RngStream {
public:
    explicit RngStream(uint64_t seed) : engine_(mix(seed)) {}

    static uint64_t mix(uint64_t x) {
        // splitmix64 finalizer
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    static uint64_t hash_name(std::string_view name) {
        uint64_t h = 0xcbf29ce484222325ull; // FNV-1a
        for (char c : name) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        return h;
    }

    // Derive a child stream from a root seed, a component name and up to two
    // integer coordinates (epoch, sample index, ...).
    static RngStream child(uint64_t root, std::string_view name, uint64_t a = 0, uint64_t b = 0) {
        uint64_t s = mix(root ^ hash_name(name));
        s = mix(s ^ mix(a));
        s = mix(s ^ mix(b ^ 0x5851f42d4c957f2dull));
        return RngStream(s);
    }

    uint64_t next_u64() { return engine_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    uint64_t uniform_int(uint64_t n) {
        if (n == 0) return 0;
        uint64_t threshold = (~uint64_t{0} - n + 1) % n; // rejection to avoid modulo bias
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

} // namespace neuromoco
