#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>

#include "dyad/diff/ndarray.hpp"

namespace dyad::diff {

/// Trainable tensor with its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  NdArray<T> value;
  NdArray<T> grad;

  Parameter(std::string n, NdArray<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}
  void zero_grad() { grad.fill(T(0)); }
};

/// Handle to a node recorded on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

/// Operation tape scoped to a single forward pass. With `record == false` no
/// backward closures are kept and the tape is a plain forward evaluator.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const NdArray<T>& out_grad)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(NdArray<T> value);
  /// Leaf whose gradient is retained and readable via grad().
  Var input(NdArray<T> value);
  /// Leaf bound to a parameter; backward() accumulates into `p.grad`.
  Var param(Parameter<T>& p);
  Var param(const Parameter<T>& p);

  /// Appends an op result. `backward` is dropped when nothing upstream needs a
  /// gradient.
  Var record(NdArray<T> value, bool needs_grad, Backward backward);

  const NdArray<T>& value(Var v) const;
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  bool needs_grad(std::initializer_list<Var> vs) const;

  /// Gradient buffer, allocated zeroed on first access.
  NdArray<T>& grad(Var v);
  void accumulate(Var v, const NdArray<T>& g);

  /// Reverse sweep from a 1x1 output.
  void backward(Var root, T seed = T(1));

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    NdArray<T> value;
    const NdArray<T>* external = nullptr;
    NdArray<T> grad;
    bool needs_grad = false;
    Backward backward;
    Parameter<T>* param = nullptr;
  };

  bool record_;
  std::deque<Node> nodes_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace dyad::diff
