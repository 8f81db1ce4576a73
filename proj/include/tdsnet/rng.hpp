#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace tdsnet {

// Counter-based generator built on the splitmix64 output function.
// A stream is identified by (key, counter); substreams are derived by
// hashing a label into the key, so independent samplers never need to
// coordinate and any stream position can be reconstructed from scratch.
class Rng {
public:
    explicit Rng(std::uint64_t key = 0) : key_(key) {}

    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Derived generator for a labeled substream.
    Rng child(std::string_view label, std::uint64_t index = 0) const {
        std::uint64_t h = key_;
        for (char c : label) h = mix(h ^ static_cast<unsigned char>(c));
        return Rng(mix(h ^ index));
    }

    std::uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ull * ++ctr_); }

    // Uniform in [0,1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0,n).
    std::uint64_t uniform_index(std::uint64_t n) {
        if (n == 0) return 0;
        std::uint64_t bound = n * ((~std::uint64_t(0)) / n);
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= bound);
        return x % n;
    }

    // Box-Muller; consumes two uniforms per sample.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    // Partial Fisher-Yates: k distinct indices from [0,n).
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) pool[i] = i;
        std::vector<std::size_t> out(k);
        for (std::size_t i = 0; i < k; ++i) {
            std::size_t j = i + static_cast<std::size_t>(uniform_index(n - i));
            std::swap(pool[i], pool[j]);
            out[i] = pool[i];
        }
        return out;
    }

private:
    std::uint64_t key_ = 0;
    std::uint64_t ctr_ = 0;
};

} // namespace tdsnet
