#pragma once

// Counter-based deterministic RNG. A stream is (seed, stream_id); the
// i-th word of a stream is a pure function of (seed, stream_id, i), so
// replaying any prefix or jumping to an offset reproduces identical
// draws regardless of what was sampled in between. The word function is
// the splitmix64 output mix applied to key + i*GOLDEN.
//
// Draw costs are part of the format contract:
//   uniform  - 1 counter per draw
//   gumbel   - 1 counter per draw
//   gaussian - 2 counters per coordinate (Box-Muller, no caching)

#include <cmath>
#include <cstdint>

namespace gsq {

namespace detail {

constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

inline uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace detail

struct RngStream {
    uint64_t key = 0;
    uint64_t counter = 0;

    RngStream() = default;
    RngStream(uint64_t seed, uint64_t stream_id)
        : key(detail::mix64(seed + detail::kGolden * (stream_id + 1))) {}

    uint64_t next_word() { return detail::mix64(key + detail::kGolden * counter++); }

    // Uniform in [2^-32, 1 - 2^-24]: bounded away from 0 and 1 so that
    // log(-log(u)) and Box-Muller stay finite in binary32.
    double next_uniform() {
        double u = static_cast<double>(next_word() >> 11) * 0x1.0p-53;
        const double lo = 0x1.0p-32;
        const double hi = 1.0 - 0x1.0p-24;
        if (u < lo) u = lo;
        if (u > hi) u = hi;
        return u;
    }

    float next_gumbel() { return static_cast<float>(-std::log(-std::log(next_uniform()))); }

    // Standard normal via Box-Muller; always burns exactly two counters
    // and returns the cosine branch, so coordinate i of a vector draw
    // sits at counter offset 2i no matter how callers interleave.
    float next_gaussian() {
        double u1 = next_uniform();
        double u2 = next_uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        return static_cast<float>(r * std::cos(2.0 * 3.141592653589793238462643383279502884 * u2));
    }
};

// Stream ids used by the pipeline. Keeping them centralized documents
// which consumer owns which stream of a given seed.
enum class StreamId : uint64_t {
    kInitNoise = 0,   // init-time logit perturbations (epsilon)
    kTrainNoise = 1,  // per-forward Gumbel noise during training
    kShuffle = 2,     // calibration row shuffling
    kMisc = 3,
};

inline RngStream make_stream(uint64_t seed, StreamId id) {
    return RngStream(seed, static_cast<uint64_t>(id));
}

}  // namespace gsq
