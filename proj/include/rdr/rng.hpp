#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

namespace rdr {

namespace detail {

// splitmix64 finalizer.
inline std::uint64_t mix64(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xbf58476d1ce4e5b9ULL;
  z ^= z >> 27;
  z *= 0x94d049bb133111ebULL;
  z ^= z >> 31;
  return z;
}

}  // namespace detail

// Counter-based random stream: draw i is a pure function of (key, i).
// Streams forked for different concerns never interfere, so enabling or
// disabling one consumer does not shift the draws seen by another.
class Rng {
 public:
  explicit Rng(std::uint64_t seed)
      : key_(detail::mix64(seed + 0x9e3779b97f4a7c15ULL)) {}

  // Independent stream derived from this one's key. Does not consume draws.
  Rng fork(std::uint64_t stream_id) const {
    return Rng(key_ ^ detail::mix64(stream_id * 0xd1342543de82ef95ULL +
                                    0x2545f4914f6cdd1dULL),
               ForkTag{});
  }

  std::uint64_t next_u64() {
    return detail::mix64(key_ + (++counter_) * 0x9e3779b97f4a7c15ULL);
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Standard normal via Box-Muller. Always two draws per call so the
  // counter layout stays stable.
  double normal() {
    double u1 = next_double();
    double u2 = next_double();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(6.283185307179586476925287 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[next_u64() % i]);
    }
  }

  std::uint64_t counter() const { return counter_; }

 private:
  struct ForkTag {};
  Rng(std::uint64_t key, ForkTag) : key_(detail::mix64(key)) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace rdr
