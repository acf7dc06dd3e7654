#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace ssat {

// SplitMix64. Every random draw in the project flows through this generator
// so that runs are bit-identical across platforms; std:: distributions are
// implementation-defined and never used.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; one value per call.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    // Unbiased integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) return 0;
        std::uint64_t threshold = (~n + 1) % n;  // 2^64 mod n
        for (;;) {
            std::uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent stream derived from a seed and up to three purpose keys.
    // Distinct keys give statistically unrelated streams, and the derivation
    // is pure, so parallel or reordered consumers stay deterministic.
    static Rng keyed(std::uint64_t seed, std::uint64_t k1, std::uint64_t k2 = 0,
                     std::uint64_t k3 = 0) {
        Rng mixer(seed ^ 0x6a09e667f3bcc909ULL);
        mixer.state_ ^= mixer.next_u64() + k1;
        mixer.state_ ^= mixer.next_u64() + k2;
        mixer.state_ ^= mixer.next_u64() + k3;
        mixer.next_u64();
        return mixer;
    }

  private:
    std::uint64_t state_;
};

// FNV-1a, used for stream keys from strings and for architecture hashes.
inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace ssat
