#include "dyad/diff/tape.hpp"

namespace dyad::diff {

template <typename T>
Var Tape<T>::constant(NdArray<T> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::input(NdArray<T> value) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = record_;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::param(Parameter<T>& p) {
  Node n;
  n.external = &p.value;
  n.needs_grad = record_;
  n.param = record_ ? &p : nullptr;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::param(const Parameter<T>& p) {
  Node n;
  n.external = &p.value;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::record(NdArray<T> value, bool needs_grad, Backward backward) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = record_ && needs_grad;
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
const NdArray<T>& Tape<T>::value(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.external ? *n.external : n.value;
}

template <typename T>
bool Tape<T>::needs_grad(std::initializer_list<Var> vs) const {
  for (Var v : vs)
    if (nodes_.at(v.id).needs_grad) return true;
  return false;
}

template <typename T>
NdArray<T>& Tape<T>::grad(Var v) {
  Node& n = nodes_.at(v.id);
  if (n.grad.empty()) {
    const NdArray<T>& val = n.external ? *n.external : n.value;
    n.grad = NdArray<T>(val.rows(), val.cols());
  }
  return n.grad;
}

template <typename T>
void Tape<T>::accumulate(Var v, const NdArray<T>& g) {
  if (!nodes_.at(v.id).needs_grad) return;
  grad(v) += g;
}

template <typename T>
void Tape<T>::backward(Var root, T seed) {
  require_shape(value(root).size() == 1, "Tape::backward: root must be 1x1");
  if (!record_) return;
  grad(root)[0] += seed;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, n.grad);
  }
  for (Node& n : nodes_)
    if (n.param && !n.grad.empty()) n.param->grad += n.grad;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace dyad::diff
