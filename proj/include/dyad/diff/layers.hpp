#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dyad/diff/mask.hpp"
#include "dyad/diff/ops.hpp"
#include "dyad/diff/tape.hpp"
#include "dyad/rng.hpp"

namespace dyad::diff {

/// Owns every parameter of a model under stable addresses, keyed by name path.
template <typename T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  Parameter<T>& create(const std::string& name, NdArray<T> init);
  Parameter<T>* find(const std::string& name);
  const Parameter<T>* find(const std::string& name) const;

  std::span<const std::unique_ptr<Parameter<T>>> all() const { return params_; }
  std::size_t count() const;  // total scalar count
  void zero_grad();

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
};

/// Glorot-uniform (in x out) matrix.
template <typename T>
NdArray<T> xavier(std::size_t in, std::size_t out, RngStream& rng);
template <typename T>
NdArray<T> normal_init(std::size_t rows, std::size_t cols, double stddev, RngStream& rng);

/// y = x W + b with W stored as (in x out).
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, RngStream& rng,
         bool zero_init = false);
  Var operator()(Tape<T>& t, Var x) const;
  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }

 private:
  Parameter<T>* weight_ = nullptr;
  Parameter<T>* bias_ = nullptr;
  std::size_t in_ = 0, out_ = 0;
};

/// Row-wise layer norm with learned gamma/beta, eps 1e-5.
template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore<T>& store, const std::string& name, std::size_t dim);
  Var operator()(Tape<T>& t, Var x) const;

 private:
  Parameter<T>* gamma_ = nullptr;
  Parameter<T>* beta_ = nullptr;
};

template <typename T>
Var layer_norm(Tape<T>& t, Var x, Var gamma, Var beta);

/// x_norm * (1 + scale) + shift, scale/shift are 1 x dim rows.
template <typename T>
Var modulate(Tape<T>& t, Var x_norm, Var shift, Var scale);

/// Two-layer GELU MLP with expansion ratio 4.
template <typename T>
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore<T>& store, const std::string& name, std::size_t dim, RngStream& rng, std::size_t ratio = 4);
  Var operator()(Tape<T>& t, Var x) const;

 private:
  Linear<T> fc1_, fc2_;
};

/// Multi-head self-attention with optional rotary positions on q and k.
template <typename T>
class SelfAttention {
 public:
  SelfAttention() = default;
  SelfAttention(ParamStore<T>& store, const std::string& name, std::size_t dim, std::size_t heads,
                RngStream& rng);
  Var operator()(Tape<T>& t, Var x, const AttentionMask& mask, std::span<const int> positions) const;
  std::size_t heads() const { return heads_; }

 private:
  Linear<T> q_, k_, v_, out_;
  std::size_t heads_ = 1;
};

template <typename T>
Var masked_self_attention(Tape<T>& t, Var x, const AttentionMask& mask, std::size_t heads,
                          const SelfAttention<T>& layer, std::span<const int> positions);

/// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
template <typename T>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParamStore<T>& store, const std::string& name, std::size_t dim, std::size_t heads,
                   RngStream& rng);
  Var operator()(Tape<T>& t, Var x, const AttentionMask& mask, std::span<const int> positions) const;

 private:
  LayerNorm<T> ln1_, ln2_;
  SelfAttention<T> attn_;
  Mlp<T> mlp_;
};

/// Transformer block conditioned through AdaLN-Zero: shift/scale/gate for
/// both sub-layers are regressed from the conditioning row by a
/// zero-initialized projection, so a fresh block is the identity.
template <typename T>
class AdaLnZeroBlock {
 public:
  AdaLnZeroBlock() = default;
  AdaLnZeroBlock(ParamStore<T>& store, const std::string& name, std::size_t dim, std::size_t heads,
                 std::size_t cond_dim, RngStream& rng);
  /// `cond` is 1 x cond_dim (already passed through SiLU).
  Var operator()(Tape<T>& t, Var x, Var cond, const AttentionMask& mask, std::span<const int> positions) const;

 private:
  SelfAttention<T> attn_;
  Mlp<T> mlp_;
  Linear<T> modulation_;
  std::size_t dim_ = 0;
};

template <typename T>
Var ada_ln_zero(Tape<T>& t, Var x, Var cond, const AdaLnZeroBlock<T>& block, const AttentionMask& mask,
                std::span<const int> positions);

/// Sinusoidal encoding of a scalar flow time followed by Linear-SiLU-Linear.
template <typename T>
class TimestepEmbedding {
 public:
  TimestepEmbedding() = default;
  TimestepEmbedding(ParamStore<T>& store, const std::string& name, std::size_t out_dim, RngStream& rng,
                    std::size_t freq_dim = 64);
  Var operator()(Tape<T>& t, T tau) const;
  static NdArray<T> sinusoid(T tau, std::size_t dim);

 private:
  Linear<T> fc1_, fc2_;
  std::size_t freq_dim_ = 64;
};

/// Trainable table of `length` x `width`; one per named modality.
template <typename T>
class LearnedEncoding {
 public:
  LearnedEncoding() = default;
  LearnedEncoding(ParamStore<T>& store, const std::string& name, std::size_t length, std::size_t width,
                  RngStream& rng);
  /// First `length` rows of the table.
  Var operator()(Tape<T>& t, std::size_t length) const;
  const std::string& name() const { return table_->name; }

 private:
  Parameter<T>* table_ = nullptr;
};

}  // namespace dyad::diff
