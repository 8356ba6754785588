#pragma once

#include <array>
#include <cmath>
#include <cstdint>

#include "ttlab/core.hpp"

namespace ttlab {

/// Deterministic random stream: xoshiro256++ seeded through SplitMix64.
///
/// Every Monte-Carlo trial owns its own RngState derived from
/// (base_seed, stream index), so trials are independent and the result of
/// a run does not depend on how trials are scheduled across threads.
/// Gaussians come from the Marsaglia polar method (one spare cached), so
/// the draw sequence is fully defined by this class and not by any
/// standard-library distribution implementation.
class RngState {
public:
    explicit RngState(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& w : s_) w = splitmix64(x);
        if ((s_[0] | s_[1] | s_[2] | s_[3]) == 0) s_[0] = 1;
    }

    /// Independent stream for one work item of a seeded ensemble.
    static RngState for_stream(std::uint64_t base_seed, std::uint64_t stream) {
        std::uint64_t x = base_seed;
        (void)splitmix64(x);
        x ^= 0x9E3779B97F4A7C15ULL * (stream + 1);
        return RngState(splitmix64(x));
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    /// Uniform on [0, 1) with 53 random bits.
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Standard normal (polar method).
    double next_gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, q;
        do {
            u = 2.0 * next_unit() - 1.0;
            v = 2.0 * next_unit() - 1.0;
            q = u * u + v * v;
        } while (q >= 1.0 || q == 0.0);
        const double f = std::sqrt(-2.0 * std::log(q) / q);
        spare_ = v * f;
        has_spare_ = true;
        return u * f;
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    static std::uint64_t splitmix64(std::uint64_t& state) {
        std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::array<std::uint64_t, 4> s_{};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace ttlab
