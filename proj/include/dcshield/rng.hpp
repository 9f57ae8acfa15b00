#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>

namespace dcshield {

/// Philox4x32-10 block function (counter-based; no hidden state).
inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t kM0 = 0xD2511F53u;
  constexpr std::uint32_t kM1 = 0xCD9E8D57u;
  constexpr std::uint32_t kW0 = 0x9E3779B9u;
  constexpr std::uint32_t kW1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kM0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kM1) * ctr[2];
    ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<std::uint32_t>(p1),
           static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<std::uint32_t>(p0)};
    key[0] += kW0;
    key[1] += kW1;
  }
  return ctr;
}

/// Sequential draws from one Philox stream: key = 64-bit seed, counter = (block index, stream id).
/// Distinct stream ids under one seed never overlap.
class RandomStream {
 public:
  using result_type = std::uint32_t;

  RandomStream(std::uint64_t seed, std::uint32_t stream)
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)}, stream_(stream) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    if (used_ == 4) {
      block_ = philox4x32({static_cast<std::uint32_t>(index_), static_cast<std::uint32_t>(index_ >> 32), stream_, 0},
                          key_);
      ++index_;
      used_ = 0;
    }
    return block_[used_++];
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() {
    const std::uint64_t hi = (*this)();
    const std::uint64_t lo = (*this)();
    return static_cast<double>(((hi << 32) | lo) >> 11) * 0x1.0p-53;
  }

  /// Index drawn by inverse CDF over weights in order (the last positive entry absorbs rounding).
  template <class Weights, class Get>
  std::size_t categorical(const Weights& w, Get get) {
    const double u = uniform();
    double acc = 0.0;
    std::size_t last = 0;
    bool any = false;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double p = get(w[i]);
      if (p <= 0.0) continue;
      any = true;
      last = i;
      acc += p;
      if (u < acc) return i;
    }
    if (!any) throw std::invalid_argument("categorical draw from an empty distribution");
    return last;
  }

  std::size_t categorical(std::span<const double> w) {
    return categorical(w, [](double p) { return p; });
  }

  std::uint64_t blocks_used() const { return index_; }

 private:
  std::array<std::uint32_t, 2> key_;
  std::uint32_t stream_;
  std::uint64_t index_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int used_ = 4;
};

}  // namespace dcshield
