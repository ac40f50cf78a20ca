#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace advbench {

// Deterministic splitmix64 generator. Owned implementation so that seeded
// runs produce identical streams regardless of standard library version.
class Rng {
   public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // 53-bit uniform in [0, 1)
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // 24-bit uniform in [0, 1)
    float next_float() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

    float uniform(float lo, float hi) { return lo + (hi - lo) * next_float(); }

    // Unbiased-enough bounded draw (Lemire multiply-shift).
    std::uint64_t next_below(std::uint64_t bound) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * bound) >> 64);
    }

    // Marsaglia polar method; second deviate cached.
    float normal(float sigma) {
        if (has_spare_) {
            has_spare_ = false;
            return sigma * spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * next_double() - 1.0;
            v = 2.0 * next_double() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = static_cast<float>(v * f);
        has_spare_ = true;
        return sigma * static_cast<float>(u * f);
    }

    template <typename T>
    void shuffle(T* first, std::size_t n) {
        for (std::size_t i = n; i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(next_below(i));
            T tmp = first[i - 1];
            first[i - 1] = first[j];
            first[j] = tmp;
        }
    }

    // Keyed stream derivation: children never overlap the parent stream.
    static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
        std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 0x632BE59BD9B4E019ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    static std::uint64_t derive(std::uint64_t seed, std::uint64_t index) {
        return mix(seed, index);
    }

    static std::uint64_t derive(std::uint64_t seed, std::string_view key) {
        std::uint64_t h = 0xCBF29CE484222325ULL;
        for (char c : key) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001B3ULL;
        }
        return mix(seed, h);
    }

   private:
    std::uint64_t state_;
    float spare_ = 0.f;
    bool has_spare_ = false;
};

}  // namespace advbench
