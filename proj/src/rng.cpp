#include "dyad/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "dyad/errors.hpp"

namespace dyad {

RngStream::RngStream(std::uint64_t seed) : seed_(seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    0x9e3779b9u};
  engine_.seed(seq);
}

std::uint64_t RngStream::next_u64() {
  ++counter_;
  return engine_();
}

double RngStream::uniform() {
  // 53 random mantissa bits.
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double RngStream::normal() {
  // Box-Muller without caching, so the stream state is just the engine.
  double u1 = uniform();
  const double u2 = uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

bool RngStream::bernoulli(double p) { return uniform() < p; }

std::size_t RngStream::index(std::size_t n) {
  if (n == 0) throw ValidationError("RngStream::index with n = 0");
  return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
}

RngStream RngStream::fork(std::uint64_t tag) const { return RngStream(mix_seed(seed_, tag)); }

RngStream RngStream::fork(std::string_view tag) const { return fork(stable_hash(tag)); }

std::string RngStream::save_state() const {
  std::ostringstream os;
  os << seed_ << ' ' << counter_ << ' ' << engine_;
  return os.str();
}

void RngStream::restore_state(const std::string& state) {
  std::istringstream is(state);
  is >> seed_ >> counter_ >> engine_;
  if (!is) throw FormatError("malformed rng state");
}

std::uint64_t stable_hash(std::string_view text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace dyad
