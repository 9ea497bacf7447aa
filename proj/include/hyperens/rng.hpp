#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

namespace hyperens {

/// Counter-based generator (Philox4x32-10). A stream is identified by
/// (seed, stream_key); the sequence does not depend on which thread draws it.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream_key = 0);

  /// Stream key for a (trial id, purpose) pair.
  static std::uint64_t stream_key(std::uint64_t trial_id, std::string_view purpose);

  /// Independent child stream; the parent is left untouched.
  Rng derive(std::string_view purpose) const;
  Rng derive(std::uint64_t index, std::string_view purpose) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal(double mean = 0.0, double stddev = 1.0);
  bool bernoulli(double p) { return uniform() < p; }
  /// Uniform integer on [0, n).
  std::size_t below(std::size_t n);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  void refill();

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  std::array<std::uint64_t, 2> buffer_{};
  int buffered_ = 0;
};

std::uint64_t mix64(std::uint64_t x);

}  // namespace hyperens
