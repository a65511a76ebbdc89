#include "cllora/numerics/rng.hpp"

#include <cmath>
#include <numbers>

#include "cllora/errors.hpp"

namespace cllora {

namespace {
constexpr std::uint64_t kPcgMultiplier = 6364136223846793005ULL;
constexpr std::uint64_t kPcgDefaultIncrement = 1442695040888963407ULL;
} // namespace

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

Rng::Rng(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {
    // pcg32_srandom_r(initstate = seed, initseq = stream ^ default increment)
    inc_ = ((stream ^ kPcgDefaultIncrement) << 1u) | 1u;
    state_ = 0;
    next_u32();
    state_ += seed;
    next_u32();
}

std::uint32_t Rng::next_u32() {
    std::uint64_t old = state_;
    state_ = old * kPcgMultiplier + inc_;
    auto xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    auto rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
}

std::uint64_t Rng::next_u64() {
    std::uint64_t hi = next_u32();
    std::uint64_t lo = next_u32();
    return (hi << 32) | lo;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform_open() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t bound) {
    if (bound == 0) {
        throw NumericError("Rng::below: bound must be positive");
    }
    // Lemire-style rejection on the 64-bit range.
    std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
        std::uint64_t r = next_u64();
        if (r >= threshold) {
            return r % bound;
        }
    }
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_normal_;
    }
    double u1 = uniform_open();
    double u2 = uniform();
    double radius = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * std::numbers::pi * u2;
    spare_normal_ = radius * std::sin(theta);
    has_spare_ = true;
    return radius * std::cos(theta);
}

Rng Rng::split(std::uint64_t label) const {
    std::uint64_t child_seed = splitmix64(seed_ ^ splitmix64(label ^ splitmix64(stream_)));
    std::uint64_t child_stream = splitmix64(child_seed ^ label);
    return Rng(child_seed, child_stream);
}

Rng Rng::split(std::string_view label) const { return split(fnv1a64(label)); }

Rng Rng::split(std::string_view label, std::uint64_t index) const {
    return split(splitmix64(fnv1a64(label)) ^ splitmix64(index + 0x632BE59BD9B4E019ULL));
}

} // namespace cllora
