#pragma once

#include <cmath>
#include <cstdint>
#include <limits>

namespace turnwise {

/// SplitMix64 finalizer. Bijective 64-bit mixing function.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept
{
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

/**
 * Counter-based splittable generator.
 *
 * Output n of a stream is a pure function of (key, n), so a stream can be
 * re-derived anywhere from its key alone. `split(id)` derives an independent
 * child key; run -> group -> trajectory -> turn streams are built by chaining
 * splits, which makes results independent of execution order.
 *
 * Satisfies UniformRandomBitGenerator.
 */
class CounterRng
{
  public:
    using result_type = std::uint64_t;

    constexpr explicit CounterRng(std::uint64_t key = 0) noexcept : key_(mix64(key ^ kKeySalt)) {}

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

    constexpr result_type operator()() noexcept
    {
        ++counter_;
        return mix64(mix64(key_ + counter_ * kGolden) ^ key_);
    }

    /// Child stream; does not advance this stream.
    [[nodiscard]] constexpr CounterRng split(std::uint64_t id) const noexcept
    {
        CounterRng child;
        child.key_ = mix64(key_ ^ mix64(id + kGolden) ^ kSplitSalt);
        return child;
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n). Multiply-shift; bias is below 2^-32 for n < 2^32.
    std::uint64_t below(std::uint64_t n) noexcept
    {
        const auto hi = static_cast<unsigned __int128>((*this)()) * n;
        return static_cast<std::uint64_t>(hi >> 64);
    }

    /// Unit-rate exponential draw.
    double exponential() noexcept { return -std::log1p(-uniform()); }

    [[nodiscard]] constexpr std::uint64_t key() const noexcept { return key_; }
    [[nodiscard]] constexpr std::uint64_t counter() const noexcept { return counter_; }

  private:
    static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ull;
    static constexpr std::uint64_t kKeySalt = 0x243f6a8885a308d3ull;
    static constexpr std::uint64_t kSplitSalt = 0x13198a2e03707344ull;

    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

} // namespace turnwise
