#include "dyad/diff/ndarray.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace dyad::diff {

void require_shape(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}

template <typename T>
NdArray<T>::NdArray(std::size_t rows, std::size_t cols, std::vector<T> values)
    : rows_(rows), cols_(cols), data_(std::move(values)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("NdArray: " + std::to_string(data_.size()) + " values for shape " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
}

template <typename T>
void NdArray<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
NdArray<T>& NdArray<T>::operator+=(const NdArray& o) {
  require_shape(same_shape(o), "NdArray +=: shape mismatch");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

template <typename T>
NdArray<T> NdArray<T>::slice_rows(std::size_t r0, std::size_t n) const {
  require_shape(r0 + n <= rows_, "NdArray::slice_rows out of range");
  NdArray out(n, cols_);
  std::copy(data_.begin() + static_cast<std::ptrdiff_t>(r0 * cols_),
            data_.begin() + static_cast<std::ptrdiff_t>((r0 + n) * cols_), out.data_.begin());
  return out;
}

template <typename T>
bool NdArray<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template class NdArray<float>;
template class NdArray<double>;

}  // namespace dyad::diff
