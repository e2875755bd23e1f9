#include "dyad/vae.hpp"

#include <numeric>

#include "dyad/errors.hpp"

namespace dyad::vae {

VaeConfig VaeConfig::paper_scale() {
  VaeConfig c;
  c.layers = 9;
  c.heads = 4;
  c.hidden = 256;
  c.latent_dim = 256;
  return c;
}

void VaeConfig::validate() const {
  if (stride == 0) throw ConfigError("vae.stride must be positive");
  if (heads == 0 || hidden % heads != 0 || (hidden / heads) % 2 != 0)
    throw ConfigError("vae.hidden must split into even-width heads");
  if (latent_dim == 0 || frame_dim == 0 || layers == 0) throw ConfigError("vae dimensions must be positive");
  if (decoder_context == 0) throw ConfigError("vae.decoder_context must be at least 1");
  if (beta < 0) throw ConfigError("vae.beta must be non-negative");
  if (velocity_weight < 0) throw ConfigError("vae.velocity_weight must be non-negative");
}

namespace {

void require_blocks(std::size_t frames, std::size_t stride) {
  if (stride == 0 || frames == 0 || frames % stride != 0)
    throw ShapeError("sequence length " + std::to_string(frames) + " is not a positive multiple of stride " +
                     std::to_string(stride));
}

}  // namespace

TokenLayout interleave(std::size_t frames, std::size_t stride) {
  require_blocks(frames, stride);
  TokenLayout l;
  const std::size_t blocks = frames / stride;
  l.frame_slots.resize(frames);
  for (std::size_t k = 0; k < blocks; ++k) {
    for (std::size_t i = 0; i < stride; ++i) {
      const std::size_t f = k * stride + i;
      l.frame_slots[f] = l.size();
      l.kind.push_back(SlotKind::kFrame);
      l.temporal.push_back(static_cast<int>(f + 1));
      l.block.push_back(k);
    }
    const int idx = static_cast<int>((k + 1) * stride);
    l.mu_slots.push_back(l.size());
    l.kind.push_back(SlotKind::kMu);
    l.temporal.push_back(idx);
    l.block.push_back(k);
    l.sigma_slots.push_back(l.size());
    l.kind.push_back(SlotKind::kSigma);
    l.temporal.push_back(idx);
    l.block.push_back(k);
  }
  return l;
}

TokenLayout decoder_layout(std::size_t frames, std::size_t stride, std::size_t first_block) {
  require_blocks(frames, stride);
  TokenLayout l;
  const std::size_t blocks = frames / stride;
  const std::size_t offset = first_block * stride;
  l.frame_slots.resize(frames);
  for (std::size_t k = 0; k < blocks; ++k) {
    l.latent_slots.push_back(l.size());
    l.kind.push_back(SlotKind::kLatent);
    l.temporal.push_back(static_cast<int>(offset + k * stride + 1));
    l.block.push_back(k);
    for (std::size_t i = 0; i < stride; ++i) {
      const std::size_t f = k * stride + i;
      l.frame_slots[f] = l.size();
      l.kind.push_back(SlotKind::kFrame);
      l.temporal.push_back(static_cast<int>(offset + f + 1));
      l.block.push_back(k);
    }
  }
  return l;
}

AttentionMask encoder_mask(std::size_t frames, std::size_t stride) {
  const TokenLayout l = interleave(frames, stride);
  AttentionMask m(l.size());
  for (std::size_t q = 0; q < l.size(); ++q) {
    for (std::size_t k = 0; k < l.size(); ++k) {
      bool ok = false;
      if (l.kind[q] == SlotKind::kFrame) {
        ok = l.kind[k] == SlotKind::kFrame && l.temporal[k] <= l.temporal[q];
      } else if (l.kind[k] == SlotKind::kFrame) {
        ok = l.temporal[k] <= l.temporal[q];
      } else if (l.block[k] < l.block[q]) {
        ok = true;
      } else if (l.block[k] == l.block[q]) {
        ok = k == q || (l.kind[q] == SlotKind::kSigma && l.kind[k] == SlotKind::kMu);
      }
      m.set(q, k, ok);
    }
  }
  return m;
}

AttentionMask decoder_mask(std::size_t frames, std::size_t stride, std::size_t context) {
  if (context == 0) throw ValidationError("decoder_mask: context must be at least 1");
  const TokenLayout l = decoder_layout(frames, stride);
  AttentionMask m(l.size());
  for (std::size_t q = 0; q < l.size(); ++q) {
    const std::size_t lo = l.block[q] + 1 >= context ? l.block[q] + 1 - context : 0;
    for (std::size_t k = 0; k < l.size(); ++k) {
      if (l.block[k] < lo || l.block[k] > l.block[q]) continue;
      bool ok = false;
      if (l.kind[k] == SlotKind::kLatent) {
        ok = true;
      } else if (l.kind[q] == SlotKind::kFrame) {
        ok = l.temporal[k] <= l.temporal[q];
      }
      m.set(q, k, ok);
    }
  }
  return m;
}

template <typename T>
CausalVae<T>::CausalVae(const VaeConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  RngStream rng(seed);
  const std::size_t h = config_.hidden;
  enc_in_ = diff::Linear<T>(store_, "vae.enc.in", config_.frame_dim, h, rng);
  enc_phase_ = diff::LearnedEncoding<T>(store_, "vae.enc.phase", config_.stride, h, rng);
  mu_query_ = diff::LearnedEncoding<T>(store_, "vae.enc.mu_query", 1, h, rng);
  sigma_query_ = diff::LearnedEncoding<T>(store_, "vae.enc.sigma_query", 1, h, rng);
  for (std::size_t i = 0; i < config_.layers; ++i)
    enc_blocks_.emplace_back(store_, "vae.enc.block" + std::to_string(i), h, config_.heads, rng);
  enc_ln_ = diff::LayerNorm<T>(store_, "vae.enc.ln", h);
  mu_head_ = diff::Linear<T>(store_, "vae.enc.mu_head", h, config_.latent_dim, rng);
  logvar_head_ = diff::Linear<T>(store_, "vae.enc.logvar_head", h, config_.latent_dim, rng);

  dec_latent_in_ = diff::Linear<T>(store_, "vae.dec.latent_in", config_.latent_dim, h, rng);
  frame_query_ = diff::LearnedEncoding<T>(store_, "vae.dec.frame_query", 1, h, rng);
  dec_phase_ = diff::LearnedEncoding<T>(store_, "vae.dec.phase", config_.stride, h, rng);
  for (std::size_t i = 0; i < config_.layers; ++i)
    dec_blocks_.emplace_back(store_, "vae.dec.block" + std::to_string(i), h, config_.heads, rng);
  dec_ln_ = diff::LayerNorm<T>(store_, "vae.dec.ln", h);
  dec_out_ = diff::Linear<T>(store_, "vae.dec.out", h, config_.frame_dim, rng);
}

template <typename T>
Var CausalVae<T>::run_stack(Tape<T>& t, Var x, const AttentionMask& mask, const std::vector<int>& positions,
                            const std::vector<diff::TransformerBlock<T>>& blocks,
                            const diff::LayerNorm<T>& ln) const {
  for (const auto& b : blocks) x = b(t, x, mask, positions);
  return ln(t, x);
}

template <typename T>
typename CausalVae<T>::Encoded CausalVae<T>::encode(Tape<T>& t, Var frames) const {
  const auto& xv = t.value(frames);
  if (xv.cols() != config_.frame_dim) throw ShapeError("encode: frame width does not match the model");
  const std::size_t n = xv.rows(), s = config_.stride;
  const TokenLayout l = interleave(n, s);
  const std::size_t blocks = n / s;

  std::vector<std::size_t> phase(n), zeros(blocks, 0);
  for (std::size_t i = 0; i < n; ++i) phase[i] = i % s;
  Var fr = diff::add(t, enc_in_(t, frames), diff::gather_rows(t, enc_phase_(t, s), phase));
  Var mus = diff::gather_rows(t, mu_query_(t, 1), zeros);
  Var sigmas = diff::gather_rows(t, sigma_query_(t, 1), zeros);

  std::vector<std::size_t> order(l.size());
  for (std::size_t f = 0; f < n; ++f) order[l.frame_slots[f]] = f;
  for (std::size_t k = 0; k < blocks; ++k) {
    order[l.mu_slots[k]] = n + k;
    order[l.sigma_slots[k]] = n + blocks + k;
  }
  Var tokens = diff::gather_rows(t, diff::concat_rows<T>(t, {fr, mus, sigmas}), order);
  Var h = run_stack(t, tokens, encoder_mask(n, s), l.temporal, enc_blocks_, enc_ln_);
  return {mu_head_(t, diff::gather_rows(t, h, l.mu_slots)), logvar_head_(t, diff::gather_rows(t, h, l.sigma_slots))};
}

template <typename T>
Var CausalVae<T>::decode(Tape<T>& t, Var z, std::size_t first_block) const {
  const auto& zv = t.value(z);
  if (zv.cols() != config_.latent_dim) throw ShapeError("decode: latent width does not match the model");
  if (zv.rows() == 0) throw ShapeError("decode: no latent tokens");
  const std::size_t blocks = zv.rows(), s = config_.stride, n = blocks * s;
  const TokenLayout l = decoder_layout(n, s, first_block);

  std::vector<std::size_t> phase(n), zeros(n, 0);
  for (std::size_t i = 0; i < n; ++i) phase[i] = i % s;
  Var fr = diff::add(t, diff::gather_rows(t, frame_query_(t, 1), zeros),
                     diff::gather_rows(t, dec_phase_(t, s), phase));
  Var lat = dec_latent_in_(t, z);

  std::vector<std::size_t> order(l.size());
  for (std::size_t f = 0; f < n; ++f) order[l.frame_slots[f]] = f;
  for (std::size_t k = 0; k < blocks; ++k) order[l.latent_slots[k]] = n + k;
  Var tokens = diff::gather_rows(t, diff::concat_rows<T>(t, {fr, lat}), order);
  Var h = run_stack(t, tokens, decoder_mask(n, s, config_.decoder_context), l.temporal, dec_blocks_, dec_ln_);
  return dec_out_(t, diff::gather_rows(t, h, l.frame_slots));
}

template <typename T>
Var reparameterize(Tape<T>& t, Var mu, Var log_var, RngStream& rng) {
  const auto& m = t.value(mu);
  NdArray<T> eps(m.rows(), m.cols());
  for (auto& v : eps.values()) v = static_cast<T>(rng.normal());
  Var sigma = diff::exp(t, diff::scale(t, log_var, T(0.5)));
  return diff::add(t, mu, diff::mul(t, sigma, t.constant(std::move(eps))));
}

template <typename T>
VaeLossTerms vae_loss(Tape<T>& t, const CausalVae<T>& model, Var frames, RngStream& rng) {
  const auto enc = model.encode(t, frames);
  Var z = reparameterize(t, enc.mu, enc.log_var, rng);
  Var out = model.decode(t, z);
  Var recon = diff::mse(t, out, frames);
  Var kl = diff::gaussian_kl(t, enc.mu, enc.log_var);
  Var total = diff::add(t, recon, diff::scale(t, kl, static_cast<T>(model.config().beta)));
  Var velocity = t.constant(NdArray<T>(1, 1));
  const std::size_t n = t.value(frames).rows();
  if (n >= 2) {
    auto diff_rows = [&](Var x) { return diff::sub(t, diff::slice_rows(t, x, 1, n - 1), diff::slice_rows(t, x, 0, n - 1)); };
    velocity = diff::mse(t, diff_rows(out), diff_rows(frames));
    if (model.config().velocity_weight > 0)
      total = diff::add(t, total, diff::scale(t, velocity, static_cast<T>(model.config().velocity_weight)));
  }
  return {total, recon, kl, velocity};
}

template <typename T>
NdArray<T> encode_mean(const CausalVae<T>& model, const NdArray<T>& frames) {
  Tape<T> t(false);
  return t.value(model.encode(t, t.constant(frames)).mu);
}

template <typename T>
NdArray<T> decode_latents(const CausalVae<T>& model, const NdArray<T>& z, std::size_t first_block) {
  Tape<T> t(false);
  return t.value(model.decode(t, t.constant(z), first_block));
}

#define DYAD_INSTANTIATE_VAE(T)                                                              \
  template class CausalVae<T>;                                                               \
  template Var reparameterize<T>(Tape<T>&, Var, Var, RngStream&);                            \
  template VaeLossTerms vae_loss<T>(Tape<T>&, const CausalVae<T>&, Var, RngStream&);         \
  template NdArray<T> encode_mean<T>(const CausalVae<T>&, const NdArray<T>&);                \
  template NdArray<T> decode_latents<T>(const CausalVae<T>&, const NdArray<T>&, std::size_t);

DYAD_INSTANTIATE_VAE(float)
DYAD_INSTANTIATE_VAE(double)

}  // namespace dyad::vae
