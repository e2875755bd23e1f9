#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace dyad::diff {

/// Explicit boolean attention table; allowed(i, j) means query i may read key j.
class AttentionMask {
 public:
  AttentionMask() = default;
  explicit AttentionMask(std::size_t n, bool fill = false) : n_(n), allowed_(n * n, fill) {}

  /// Lower-triangular mask over token order.
  static AttentionMask causal(std::size_t n);
  static AttentionMask full(std::size_t n) { return AttentionMask(n, true); }

  std::size_t size() const { return n_; }
  bool allowed(std::size_t i, std::size_t j) const { return allowed_[i * n_ + j] != 0; }
  void set(std::size_t i, std::size_t j, bool v = true) { allowed_[i * n_ + j] = v ? 1 : 0; }

  /// Throws InvalidMaskError if any row allows nothing.
  void validate() const;
  bool diagonal_allowed() const;
  /// True if every allowed pair reads from a key whose temporal index does not
  /// exceed the query's.
  bool respects_time(std::span<const int> temporal_index) const;

  /// Allowed key indices per query row, ascending.
  std::vector<std::vector<std::uint32_t>> key_lists() const;

 private:
  std::size_t n_ = 0;
  std::vector<std::uint8_t> allowed_;
};

}  // namespace dyad::diff
