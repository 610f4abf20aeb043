#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace tg {

/// Named substreams so that every consumer of randomness draws from its own
/// generator. Adding a consumer never shifts another consumer's sequence.
enum class Stream : std::uint64_t {
    physical = 1,
    clock = 2,
    scenario = 3,
    split = 4,
    graph = 5,
    init = 6,
    shuffle = 7,
    diag = 8,
    bootstrap = 9,
    jitter = 10,
};

/// Seeded 64-bit Mersenne twister for (seed, stream, index). `index` is
/// typically a device id.
inline std::mt19937_64 make_rng(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                      static_cast<std::uint32_t>(index >> 32)};
    return std::mt19937_64(seq);
}

/// Standard normal draw via Box-Muller on the raw engine output. Unlike
/// std::normal_distribution this has no hidden cached state, so one draw
/// consumes exactly two engine outputs.
inline double normal_draw(std::mt19937_64& rng) {
    constexpr double kTwoPi = 6.283185307179586476925286766559;
    const double u1 = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
    const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

/// Uniform draw in [0, 1).
inline double uniform_draw(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace tg
