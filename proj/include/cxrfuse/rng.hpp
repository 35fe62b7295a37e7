#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace cxrfuse {

/// Counter-based 64-bit generator. Draw n of a stream is
///   mix64(key + (n + 1) * 0x9E3779B97F4A7C15)
/// where mix64 is the SplitMix64 finaliser (multipliers 0xBF58476D1CE4E5B9 and
/// 0x94D049BB133111EB, shifts 30/27/31). Streams are addressed by a key derived
/// from the seed and a tuple of integers, so results do not depend on the
/// order in which streams are consumed.
class CounterRng {
 public:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

  explicit CounterRng(std::uint64_t key) : key_(key) {}
  CounterRng(std::uint64_t seed, std::initializer_list<std::uint64_t> parts)
      : key_(stream_key(seed, parts)) {}

  static std::uint64_t mix64(std::uint64_t z);
  static std::uint64_t stream_key(std::uint64_t seed, std::initializer_list<std::uint64_t> parts);

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller (cosine branch only; two draws per call).
  double normal();
  double normal(double mean, double sd) { return mean + sd * normal(); }
  bool bernoulli(double p) { return uniform() < p; }
  /// Integer in [0, n).
  std::size_t below(std::size_t n);

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// FNV-1a 64-bit hash, used to turn string ids into stream keys.
std::uint64_t fnv1a64(std::string_view s);

/// Stream purposes used as the second key component throughout the library.
enum class Stream : std::uint64_t {
  demographics = 1,
  label = 2,
  ambiguity = 3,
  state = 4,
  noise = 5,
  view = 6,
  shuffle = 7,
  split = 8,
  init = 9,
  sweep = 10,
};

inline std::uint64_t key_of(Stream s) { return static_cast<std::uint64_t>(s); }

}  // namespace cxrfuse
