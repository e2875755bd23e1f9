#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "dyad/diff/layers.hpp"
#include "dyad/diff/mask.hpp"

namespace dyad::vae {

using diff::AttentionMask;
using diff::NdArray;
using diff::Tape;
using diff::Var;

struct VaeConfig {
  std::size_t stride = 4;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t hidden = 64;
  std::size_t latent_dim = 32;
  std::size_t frame_dim = 216;
  double beta = 1e-4;
  /// Weight of the frame-difference reconstruction term (0 disables it).
  double velocity_weight = 0.0;
  /// Latent blocks visible to a decoded frame (its own plus earlier ones).
  /// Streaming decodes over exactly this many blocks.
  std::size_t decoder_context = 2;

  /// Full-size configuration: 9 layers, 4 heads, width 256, 256-dim latents.
  static VaeConfig paper_scale();
  void validate() const;
};

enum class SlotKind : std::uint8_t { kFrame, kMu, kSigma, kLatent };

/// Token order of one interleaved sequence. Temporal indices are 1-based
/// frame numbers.
struct TokenLayout {
  std::vector<SlotKind> kind;
  std::vector<int> temporal;
  std::vector<std::size_t> block;        // 0-based block of the token
  std::vector<std::size_t> frame_slots;  // token index of frame 0..T-1
  std::vector<std::size_t> mu_slots, sigma_slots, latent_slots;

  std::size_t size() const { return kind.size(); }
};

/// [x_1..x_s, mu_1, sigma_1, x_{s+1}..x_{2s}, mu_2, sigma_2, ...]
/// mu_k and sigma_k carry temporal index k*s.
TokenLayout interleave(std::size_t frames, std::size_t stride);
/// [z_1, x_1..x_s, z_2, x_{s+1}..x_{2s}, ...]; z_k carries the temporal index
/// of the first frame of its block. `first_block` offsets every index.
TokenLayout decoder_layout(std::size_t frames, std::size_t stride, std::size_t first_block = 0);

/// Frames read frames at or before themselves; mu_k/sigma_k read frames up to
/// k*s, every latent slot of earlier blocks and themselves; sigma_k also reads
/// mu_k. Frames never read latent slots.
AttentionMask encoder_mask(std::size_t frames, std::size_t stride);
/// Frame i of block k reads frames at or before i and z_j for j <= k, limited
/// to the last `context` blocks; z_k reads z_j over the same band.
AttentionMask decoder_mask(std::size_t frames, std::size_t stride, std::size_t context);

template <typename T>
class CausalVae {
 public:
  CausalVae(const VaeConfig& config, std::uint64_t seed);
  CausalVae(const CausalVae&) = delete;
  CausalVae& operator=(const CausalVae&) = delete;

  struct Encoded {
    Var mu;       // K x D_z
    Var log_var;  // K x D_z
  };

  /// `frames` is T x D_x with T a multiple of the stride.
  Encoded encode(Tape<T>& t, Var frames) const;
  /// `z` is K x D_z; returns (K*s) x D_x. `first_block` is the absolute block
  /// index of z's first row, used only for rotary positions.
  Var decode(Tape<T>& t, Var z, std::size_t first_block = 0) const;

  const VaeConfig& config() const { return config_; }
  diff::ParamStore<T>& params() { return store_; }
  const diff::ParamStore<T>& params() const { return store_; }

 private:
  Var run_stack(Tape<T>& t, Var x, const AttentionMask& mask, const std::vector<int>& positions,
                const std::vector<diff::TransformerBlock<T>>& blocks, const diff::LayerNorm<T>& ln) const;

  VaeConfig config_;
  diff::ParamStore<T> store_;
  // Encoder.
  diff::Linear<T> enc_in_;
  diff::LearnedEncoding<T> enc_phase_, mu_query_, sigma_query_;
  std::vector<diff::TransformerBlock<T>> enc_blocks_;
  diff::LayerNorm<T> enc_ln_;
  diff::Linear<T> mu_head_, logvar_head_;
  // Decoder.
  diff::Linear<T> dec_latent_in_;
  diff::LearnedEncoding<T> frame_query_, dec_phase_;
  std::vector<diff::TransformerBlock<T>> dec_blocks_;
  diff::LayerNorm<T> dec_ln_;
  diff::Linear<T> dec_out_;
};

/// z = mu + exp(log_var / 2) * eps with eps drawn from `rng`.
template <typename T>
Var reparameterize(Tape<T>& t, Var mu, Var log_var, RngStream& rng);

struct VaeLossTerms {
  Var total, recon, kl, velocity;
};

/// recon: mean squared error over all entries; kl: summed over latent dims,
/// averaged over blocks; velocity: mean squared error of consecutive-frame
/// differences; total = recon + velocity_weight * velocity + beta * kl.
template <typename T>
VaeLossTerms vae_loss(Tape<T>& t, const CausalVae<T>& model, Var frames, RngStream& rng);

/// Deterministic encode (mu) of a T x D_x array, no tape kept.
template <typename T>
NdArray<T> encode_mean(const CausalVae<T>& model, const NdArray<T>& frames);
template <typename T>
NdArray<T> decode_latents(const CausalVae<T>& model, const NdArray<T>& z, std::size_t first_block = 0);

}  // namespace dyad::vae
