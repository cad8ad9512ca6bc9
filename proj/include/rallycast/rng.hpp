#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <utility>

namespace rallycast {

// Counter-based generator: the n-th draw of a stream is a pure function of
// (key, n), so streams can be split by name without sharing state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  // Independent child streams. Splitting does not advance this stream.
  Rng substream(std::string_view name) const;
  Rng substream(std::uint64_t index) const;

  std::uint64_t next_u64();
  // Uniform on [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  double normal();
  // Uniform integer on [0, n).
  std::size_t below(std::size_t n);
  bool bernoulli(double p) { return uniform() < p; }

  template <typename RandomIt>
  void shuffle(RandomIt first, RandomIt last) {
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
      const auto j = below(i);
      using std::swap;
      swap(first[i - 1], first[j]);
    }
  }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  Rng(std::uint64_t key, std::uint64_t counter) : key_(key), counter_(counter) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace rallycast
