#include "dyad/diff/layers.hpp"

#include <cmath>

namespace dyad::diff {

template <typename T>
Parameter<T>& ParamStore<T>::create(const std::string& name, NdArray<T> init) {
  if (find(name)) throw ValidationError("duplicate parameter name: " + name);
  params_.push_back(std::make_unique<Parameter<T>>(name, std::move(init)));
  return *params_.back();
}

template <typename T>
Parameter<T>* ParamStore<T>::find(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

template <typename T>
const Parameter<T>* ParamStore<T>::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

template <typename T>
std::size_t ParamStore<T>::count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

template <typename T>
NdArray<T> xavier(std::size_t in, std::size_t out, RngStream& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  NdArray<T> w(in, out);
  for (auto& v : w.values()) v = static_cast<T>(rng.uniform(-a, a));
  return w;
}

template <typename T>
NdArray<T> normal_init(std::size_t rows, std::size_t cols, double stddev, RngStream& rng) {
  NdArray<T> w(rows, cols);
  for (auto& v : w.values()) v = static_cast<T>(stddev * rng.normal());
  return w;
}

template <typename T>
Linear<T>::Linear(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                  RngStream& rng, bool zero_init)
    : in_(in), out_(out) {
  weight_ = &store.create(name + ".weight", zero_init ? NdArray<T>(in, out) : xavier<T>(in, out, rng));
  bias_ = &store.create(name + ".bias", NdArray<T>(1, out));
}

template <typename T>
Var Linear<T>::operator()(Tape<T>& t, Var x) const {
  return add_row(t, matmul(t, x, t.param(*weight_)), t.param(*bias_));
}

template <typename T>
LayerNorm<T>::LayerNorm(ParamStore<T>& store, const std::string& name, std::size_t dim) {
  gamma_ = &store.create(name + ".gamma", NdArray<T>(1, dim, T(1)));
  beta_ = &store.create(name + ".beta", NdArray<T>(1, dim));
}

template <typename T>
Var layer_norm(Tape<T>& t, Var x, Var gamma, Var beta) {
  return add_row(t, mul_row(t, normalize_rows(t, x), gamma), beta);
}

template <typename T>
Var LayerNorm<T>::operator()(Tape<T>& t, Var x) const {
  return layer_norm(t, x, t.param(*gamma_), t.param(*beta_));
}

template <typename T>
Var modulate(Tape<T>& t, Var x_norm, Var shift, Var scale) {
  return add_row(t, mul_row(t, x_norm, add_scalar(t, scale, T(1))), shift);
}

template <typename T>
Mlp<T>::Mlp(ParamStore<T>& store, const std::string& name, std::size_t dim, RngStream& rng, std::size_t ratio)
    : fc1_(store, name + ".fc1", dim, dim * ratio, rng), fc2_(store, name + ".fc2", dim * ratio, dim, rng) {}

template <typename T>
Var Mlp<T>::operator()(Tape<T>& t, Var x) const {
  return fc2_(t, gelu(t, fc1_(t, x)));
}

template <typename T>
SelfAttention<T>::SelfAttention(ParamStore<T>& store, const std::string& name, std::size_t dim,
                                std::size_t heads, RngStream& rng)
    : q_(store, name + ".q", dim, dim, rng),
      k_(store, name + ".k", dim, dim, rng),
      v_(store, name + ".v", dim, dim, rng),
      out_(store, name + ".out", dim, dim, rng),
      heads_(heads) {
  if (heads == 0 || dim % heads != 0) throw ShapeError(name + ": dim not divisible by heads");
}

template <typename T>
Var SelfAttention<T>::operator()(Tape<T>& t, Var x, const AttentionMask& mask,
                                 std::span<const int> positions) const {
  Var q = q_(t, x);
  Var k = k_(t, x);
  if (!positions.empty()) {
    q = rope(t, q, positions, heads_);
    k = rope(t, k, positions, heads_);
  }
  return out_(t, attention(t, q, k, v_(t, x), mask, heads_));
}

template <typename T>
Var masked_self_attention(Tape<T>& t, Var x, const AttentionMask& mask, std::size_t heads,
                          const SelfAttention<T>& layer, std::span<const int> positions) {
  if (layer.heads() != heads) throw ShapeError("masked_self_attention: head count mismatch");
  return layer(t, x, mask, positions);
}

template <typename T>
TransformerBlock<T>::TransformerBlock(ParamStore<T>& store, const std::string& name, std::size_t dim,
                                      std::size_t heads, RngStream& rng)
    : ln1_(store, name + ".ln1", dim),
      ln2_(store, name + ".ln2", dim),
      attn_(store, name + ".attn", dim, heads, rng),
      mlp_(store, name + ".mlp", dim, rng) {}

template <typename T>
Var TransformerBlock<T>::operator()(Tape<T>& t, Var x, const AttentionMask& mask,
                                    std::span<const int> positions) const {
  x = add(t, x, attn_(t, ln1_(t, x), mask, positions));
  return add(t, x, mlp_(t, ln2_(t, x)));
}

template <typename T>
AdaLnZeroBlock<T>::AdaLnZeroBlock(ParamStore<T>& store, const std::string& name, std::size_t dim,
                                  std::size_t heads, std::size_t cond_dim, RngStream& rng)
    : attn_(store, name + ".attn", dim, heads, rng),
      mlp_(store, name + ".mlp", dim, rng),
      modulation_(store, name + ".modulation", cond_dim, 6 * dim, rng, /*zero_init=*/true),
      dim_(dim) {}

template <typename T>
Var AdaLnZeroBlock<T>::operator()(Tape<T>& t, Var x, Var cond, const AttentionMask& mask,
                                  std::span<const int> positions) const {
  Var mod = modulation_(t, cond);
  auto chunk = [&](std::size_t i) { return slice_cols(t, mod, i * dim_, dim_); };
  Var h = attn_(t, modulate(t, normalize_rows(t, x), chunk(0), chunk(1)), mask, positions);
  x = add(t, x, mul_row(t, h, chunk(2)));
  h = mlp_(t, modulate(t, normalize_rows(t, x), chunk(3), chunk(4)));
  return add(t, x, mul_row(t, h, chunk(5)));
}

template <typename T>
Var ada_ln_zero(Tape<T>& t, Var x, Var cond, const AdaLnZeroBlock<T>& block, const AttentionMask& mask,
                std::span<const int> positions) {
  return block(t, x, cond, mask, positions);
}

template <typename T>
TimestepEmbedding<T>::TimestepEmbedding(ParamStore<T>& store, const std::string& name, std::size_t out_dim,
                                        RngStream& rng, std::size_t freq_dim)
    : fc1_(store, name + ".fc1", freq_dim, out_dim, rng),
      fc2_(store, name + ".fc2", out_dim, out_dim, rng),
      freq_dim_(freq_dim) {}

template <typename T>
NdArray<T> TimestepEmbedding<T>::sinusoid(T tau, std::size_t dim) {
  // Flow time is scaled to [0, 1000] before the usual geometric frequency ladder.
  NdArray<T> e(1, dim);
  const std::size_t half = dim / 2;
  const double x = 1000.0 * static_cast<double>(tau);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    e[i] = static_cast<T>(std::cos(x * freq));
    e[half + i] = static_cast<T>(std::sin(x * freq));
  }
  return e;
}

template <typename T>
Var TimestepEmbedding<T>::operator()(Tape<T>& t, T tau) const {
  Var e = t.constant(sinusoid(tau, freq_dim_));
  return fc2_(t, silu(t, fc1_(t, e)));
}

template <typename T>
LearnedEncoding<T>::LearnedEncoding(ParamStore<T>& store, const std::string& name, std::size_t length,
                                    std::size_t width, RngStream& rng) {
  table_ = &store.create(name, normal_init<T>(length, width, 0.02, rng));
}

template <typename T>
Var LearnedEncoding<T>::operator()(Tape<T>& t, std::size_t length) const {
  if (length > table_->value.rows()) throw ShapeError(table_->name + ": requested length exceeds table");
  Var table = t.param(*table_);
  if (length == table_->value.rows()) return table;
  return slice_rows(t, table, 0, length);
}

#define DYAD_INSTANTIATE_LAYERS(T)                                                                   \
  template class ParamStore<T>;                                                                      \
  template NdArray<T> xavier<T>(std::size_t, std::size_t, RngStream&);                               \
  template NdArray<T> normal_init<T>(std::size_t, std::size_t, double, RngStream&);                  \
  template class Linear<T>;                                                                          \
  template class LayerNorm<T>;                                                                       \
  template Var layer_norm<T>(Tape<T>&, Var, Var, Var);                                               \
  template Var modulate<T>(Tape<T>&, Var, Var, Var);                                                 \
  template class Mlp<T>;                                                                             \
  template class SelfAttention<T>;                                                                   \
  template Var masked_self_attention<T>(Tape<T>&, Var, const AttentionMask&, std::size_t,            \
                                        const SelfAttention<T>&, std::span<const int>);              \
  template class TransformerBlock<T>;                                                                \
  template class AdaLnZeroBlock<T>;                                                                  \
  template Var ada_ln_zero<T>(Tape<T>&, Var, Var, const AdaLnZeroBlock<T>&, const AttentionMask&,    \
                              std::span<const int>);                                                 \
  template class TimestepEmbedding<T>;                                                               \
  template class LearnedEncoding<T>;

DYAD_INSTANTIATE_LAYERS(float)
DYAD_INSTANTIATE_LAYERS(double)

}  // namespace dyad::diff
