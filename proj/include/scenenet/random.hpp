#pragma once

#include <cstdint>
#include <limits>

namespace scenenet {

/// PCG-XSH-RR 64/32 (O'Neill). Satisfies UniformRandomBitGenerator.
class Pcg32 {
 public:
  using result_type = std::uint32_t;

  explicit Pcg32(std::uint64_t seed = 0x853c49e6748fea9bULL,
                 std::uint64_t stream = 0xda3e39cb94b95bdbULL)
      : inc_((stream << 1U) | 1U) {
    (*this)();
    state_ += seed;
    (*this)();
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    const std::uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    const auto xorshifted = static_cast<std::uint32_t>(((old >> 18U) ^ old) >> 27U);
    const auto rot = static_cast<std::uint32_t>(old >> 59U);
    return (xorshifted >> rot) | (xorshifted << ((32U - rot) & 31U));
  }

  /// Uniform double in [0, 1) from 53 random bits.
  double uniform() {
    const std::uint64_t hi = (*this)() >> 5U;
    const std::uint64_t lo = (*this)() >> 6U;
    return static_cast<double>(hi * 67108864ULL + lo) / 9007199254740992.0;
  }

  /// Uniform integer in [0, bound) without modulo bias.
  std::uint32_t below(std::uint32_t bound) {
    const std::uint32_t threshold = (0U - bound) % bound;
    for (;;) {
      const std::uint32_t r = (*this)();
      if (r >= threshold) return r % bound;
    }
  }

 private:
  std::uint64_t state_ = 0;
  std::uint64_t inc_;
};

}  // namespace scenenet
