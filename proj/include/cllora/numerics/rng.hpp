#pragma once

#include <cstdint>
#include <string_view>

namespace cllora {

/// PCG32 (XSH-RR variant, 64-bit state, 32-bit output).
///
/// Constants follow the reference implementation: multiplier
/// 6364136223846793005, default increment 1442695040888963407, seeding per
/// pcg32_srandom_r. Child streams are derived from the construction seed and a
/// label via SplitMix64 mixing, so `split` does not depend on how many values
/// the parent has already produced.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

    std::uint32_t next_u32();
    std::uint64_t next_u64();

    // Uniform on [0, 1) with 53 bits of resolution.
    double uniform();
    // Uniform on (0, 1); never returns 0 or 1.
    double uniform_open();
    // Uniform integer in [0, bound). bound must be > 0.
    std::uint64_t below(std::uint64_t bound);
    // Standard normal via Box-Muller; caches the paired value.
    double normal();

    Rng split(std::string_view label) const;
    Rng split(std::uint64_t label) const;
    Rng split(std::string_view label, std::uint64_t index) const;

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }

    template <typename It>
    void shuffle(It first, It last) {
        auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            std::uint64_t j = below(i);
            using std::swap;
            swap(first[i - 1], first[j]);
        }
    }

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t state_ = 0;
    std::uint64_t inc_ = 0;
    double spare_normal_ = 0.0;
    bool has_spare_ = false;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes);

} // namespace cllora
