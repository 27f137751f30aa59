#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace mudok {

// Counter-based deterministic RNG. Every draw is a pure function of
// (seed, counter), so streams can be snapshotted, replayed, and forked
// without shared state. Layout matches a splitmix64 sequence indexed by
// the draw counter.
struct RngStream {
    std::uint64_t seed = 0;
    std::uint64_t counter = 0;

    RngStream() = default;
    explicit RngStream(std::uint64_t s) : seed(s) {}
    RngStream(std::uint64_t s, std::uint64_t c) : seed(s), counter(c) {}

    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t next_u64() {
        ++counter;
        return mix(seed + counter * 0x9E3779B97F4A7C15ULL);
    }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller; consumes two draws.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    // Unbiased-enough integer in [0, n) via Lemire's multiply-shift.
    std::uint64_t uniform_int(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Derives an independent stream; tag picks the substream.
    RngStream fork(std::uint64_t tag) const {
        return RngStream(mix(seed ^ mix(tag + 0x517CC1B727220A95ULL)));
    }

    template <class It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            std::uint64_t j = uniform_int(i);
            std::swap(first[i - 1], first[j]);
        }
    }

    template <class T>
    std::vector<std::size_t> sample_without_replacement(std::size_t k, const std::vector<T>& pool) {
        std::vector<std::size_t> idx(pool.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        shuffle(idx.begin(), idx.end());
        idx.resize(k < idx.size() ? k : idx.size());
        return idx;
    }
};

// Seeded 64-bit string hash (FNV-1a folded through the splitmix finalizer).
inline std::uint64_t hash64(std::string_view text, std::uint64_t seed) {
    std::uint64_t h = 0xCBF29CE484222325ULL ^ RngStream::mix(seed);
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return RngStream::mix(h);
}

}  // namespace mudok
