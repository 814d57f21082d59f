// SPDX-License-Identifier: Apache-2.0
//
// Deterministic random streams: xoshiro256++ whose 256-bit state is filled
// from splitmix64 positions [4·counter, 4·counter + 4) of the seed's
// splitmix sequence. Distinct counters therefore start from distinct states
// (splitmix64's finalizer is a bijection), which is what `derive` relies on.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "modlora/errors.hpp"
#include "modlora/tensor.hpp"

namespace modlora {

inline constexpr std::uint64_t kSplitMixGamma = 0x9e3779b97f4a7c15ULL;

/// splitmix64 finalizer applied to `x`.
constexpr std::uint64_t splitmix64_mix(std::uint64_t x) noexcept {
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Output n (0-based) of the splitmix64 sequence started at `seed`.
constexpr std::uint64_t splitmix64_at(std::uint64_t seed, std::uint64_t n) noexcept {
    return splitmix64_mix(seed + (n + 1) * kSplitMixGamma);
}

struct RngState {
    std::uint64_t seed = 0;
    std::uint64_t counter = 0;

    /// Child stream `i`. Children of one parent share a seed and differ in
    /// counter, so their starting states never coincide.
    RngState derive(std::uint64_t i) const noexcept {
        return {splitmix64_mix(seed ^ splitmix64_mix(counter + kSplitMixGamma)), i};
    }

    friend bool operator==(const RngState&, const RngState&) = default;
};

/// A single 64-bit seed for child `i` of `seed`, for APIs that take a seed.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t i) noexcept {
    return splitmix64_mix(seed ^ splitmix64_mix(i + kSplitMixGamma));
}

class Rng {
public:
    using result_type = std::uint64_t;

    explicit Rng(RngState state) : state_(state) {
        for (std::uint64_t i = 0; i < 4; ++i) s_[i] = splitmix64_at(state.seed, 4 * state.counter + i);
    }
    explicit Rng(std::uint64_t seed, std::uint64_t counter = 0) : Rng(RngState{seed, counter}) {}

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return ~result_type{0}; }

    result_type operator()() noexcept {
        const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        ++drawn_;
        return result;
    }

    /// Uniform in (0, 1]; one output.
    double uniform_open0() noexcept { return static_cast<double>(((*this)() >> 11) + 1) * 0x1.0p-53; }

    /// Uniform in [0, 1); one output.
    double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n) by 128-bit multiply-shift; one output.
    std::uint64_t below(std::uint64_t n) noexcept {
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>((*this)()) * n) >> 64);
    }

    /// One Box-Muller pair; two outputs.
    std::array<double, 2> normal_pair() noexcept {
        const double u1 = uniform_open0();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double th = 2.0 * std::numbers::pi * u2;
        return {r * std::cos(th), r * std::sin(th)};
    }

    RngState state() const noexcept { return state_; }
    std::uint64_t outputs_drawn() const noexcept { return drawn_; }

    Rng derive(std::uint64_t i) const { return Rng(state_.derive(i)); }

private:
    static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }

    RngState state_;
    std::array<std::uint64_t, 4> s_{};
    std::uint64_t drawn_ = 0;
};

/// rows×cols i.i.d. Normal(mean, std²), filled row-major from consecutive
/// Box-Muller pairs. Consumes exactly 2·⌈rows·cols / 2⌉ outputs; the spare
/// half of an odd final pair is discarded, never carried to the next call.
inline Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols, double mean = 0.0, double std = 1.0) {
    if (!(std >= 0.0)) throw ParameterError("gaussian: std must be >= 0, got " + std::to_string(std));
    Matrix out(rows, cols);
    auto v = out.values();
    for (std::size_t i = 0; i < v.size(); i += 2) {
        const auto z = rng.normal_pair();
        v[i] = mean + std * z[0];
        if (i + 1 < v.size()) v[i + 1] = mean + std * z[1];
    }
    return out;
}

}  // namespace modlora
