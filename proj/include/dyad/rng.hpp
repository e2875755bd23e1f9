#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace dyad {

/// Seeded random stream. Identical seeds give identical draw sequences; the
/// full engine state can be captured and restored so training resumes
/// reproducibly.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  double uniform();                       // [0, 1)
  double uniform(double lo, double hi);
  double normal();                        // standard normal
  bool bernoulli(double p);
  std::size_t index(std::size_t n);       // uniform in [0, n)

  /// Independent child stream keyed by (this seed, tag).
  RngStream fork(std::uint64_t tag) const;
  RngStream fork(std::string_view tag) const;

  std::string save_state() const;
  void restore_state(const std::string& state);

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  std::mt19937_64 engine_;
};

/// Stable 64-bit FNV-1a hash of a string (used for split assignment and
/// per-session seeds).
std::uint64_t stable_hash(std::string_view text);
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace dyad
