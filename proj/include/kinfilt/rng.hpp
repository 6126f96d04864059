#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace kinfilt::rng {

// Philox4x32-10 counter-based generator. Streams are addressed purely by
// (key, counter), so any (seed, path, step, channel) tuple maps to a fixed
// random value independently of evaluation order or thread count.
struct Philox4x32 {
    static constexpr std::uint32_t kMul0 = 0xD2511F53u;
    static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
    static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
    static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

    static std::array<std::uint32_t, 4> block(std::array<std::uint32_t, 4> ctr,
                                              std::array<std::uint32_t, 2> key) {
        for (int round = 0; round < 10; ++round) {
            const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * ctr[0];
            const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * ctr[2];
            const std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
            const std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
            const std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32);
            const std::uint32_t lo1 = static_cast<std::uint32_t>(p1);
            ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
            key[0] += kWeyl0;
            key[1] += kWeyl1;
        }
        return ctr;
    }
};

/// Uniform in (0,1) built from two 32-bit words (27 + 26 = 53 mantissa bits).
inline double uniform53(std::uint32_t a, std::uint32_t b) {
    const std::uint64_t m = (static_cast<std::uint64_t>(a >> 5) << 26) | (b >> 6);
    return (static_cast<double>(m) + 0.5) * (1.0 / 9007199254740992.0);
}

/// Substream layouts. Estimators that must be independent implementations
/// use distinct layouts so no stream is shared by accident.
enum class StreamLayout : std::uint32_t {
    primary = 0,   // simulate_system / simulate_under_Q / ks_backward_estimate
    oracle = 1,    // particle_oracle
    testing = 2,   // hand-rolled property-test generators
};

/// One standard normal keyed by (seed, layout, stream, step, channel).
inline double normal(std::uint64_t seed, StreamLayout layout, std::uint64_t stream,
                     std::uint32_t step, std::uint32_t channel) {
    const std::array<std::uint32_t, 4> ctr = {
        step,
        channel ^ (static_cast<std::uint32_t>(layout) << 28),
        static_cast<std::uint32_t>(stream),
        static_cast<std::uint32_t>(stream >> 32)};
    std::array<std::uint32_t, 2> key = {static_cast<std::uint32_t>(seed),
                                        static_cast<std::uint32_t>(seed >> 32)};
    if (layout == StreamLayout::oracle) {
        // Oracle path scrambles the key as well: a different generator family,
        // not merely a shifted stream of the estimator it cross-checks.
        key = {~key[0], key[1] ^ 0x5851F42Du};
    }
    const auto w = Philox4x32::block(ctr, key);
    const double u1 = uniform53(w[0], w[1]);
    const double u2 = uniform53(w[2], w[3]);
    const double r = std::sqrt(-2.0 * std::log(u1));
    return layout == StreamLayout::oracle ? r * std::sin(6.283185307179586476925287 * u2)
                                          : r * std::cos(6.283185307179586476925287 * u2);
}

/// Uniform in [0,1) on the testing layout (property-test generators).
inline double test_uniform(std::uint64_t seed, std::uint64_t stream, std::uint32_t step,
                           std::uint32_t channel = 0) {
    const std::array<std::uint32_t, 4> ctr = {
        step, channel ^ (static_cast<std::uint32_t>(StreamLayout::testing) << 28),
        static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    const std::array<std::uint32_t, 2> key = {static_cast<std::uint32_t>(seed),
                                              static_cast<std::uint32_t>(seed >> 32)};
    const auto w = Philox4x32::block(ctr, key);
    return uniform53(w[0], w[1]);
}

}  // namespace kinfilt::rng
