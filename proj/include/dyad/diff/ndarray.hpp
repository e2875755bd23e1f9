#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dyad/errors.hpp"

namespace dyad::diff {

/// Dense row-major array. Rank 2 (rows x cols) is the working shape for every
/// op; vectors are 1 x n.
template <typename T>
class NdArray {
 public:
  using value_type = T;

  NdArray() = default;
  NdArray(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  NdArray(std::size_t rows, std::size_t cols, std::vector<T> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::vector<std::size_t> shape() const { return {rows_, cols_}; }
  bool same_shape(const NdArray& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T* row(std::size_t r) { return data_.data() + r * cols_; }
  const T* row(std::size_t r) const { return data_.data() + r * cols_; }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  void fill(T v);
  NdArray& operator+=(const NdArray& o);

  /// Rows [r0, r0 + n).
  NdArray slice_rows(std::size_t r0, std::size_t n) const;

  bool all_finite() const;

  template <typename U>
  NdArray<U> cast() const {
    NdArray<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const NdArray&, const NdArray&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

/// Throws ShapeError with `what` when `ok` is false.
void require_shape(bool ok, const char* what);

}  // namespace dyad::diff
