#pragma once

#include <memory>

#include "dyad/model.hpp"
#include "dyad/rng.hpp"

namespace dyad::testing {

using diff::NdArray;

/// Randomly initialized bundle. The zero-initialized output modulation is
/// perturbed so the conditioning actually reaches the output.
inline std::shared_ptr<ModelBundle> random_model(vae::VaeConfig vc, flow::GenConfig fc, std::uint64_t seed = 1) {
  auto b = std::make_shared<ModelBundle>();
  vc.frame_dim = b->skeleton->flat_dim();
  b->vae = std::make_unique<vae::CausalVae<float>>(vc, seed);
  b->flow = std::make_unique<flow::FlowGenerator<float>>(fc, seed + 1);
  RngStream rng(seed + 2);
  for (const auto& p : b->flow->params().all())
    for (auto& v : p->value.values()) v += static_cast<float>(0.05 * rng.normal());
  b->frames = Standardizer::identity(vc.frame_dim);
  b->latents = Standardizer::identity(vc.latent_dim);
  for (std::size_t i = 0; i < vc.frame_dim; ++i) {
    b->frames.mean[i] = static_cast<float>(0.1 * rng.normal());
    b->frames.scale[i] = static_cast<float>(0.5 + rng.uniform());
  }
  for (std::size_t i = 0; i < vc.latent_dim; ++i) b->latents.scale[i] = 1.5f;
  return b;
}

inline std::shared_ptr<ModelBundle> tiny_bundle(std::uint64_t seed = 1) {
  vae::VaeConfig vc;
  vc.layers = 2;
  vc.heads = 2;
  vc.hidden = 16;
  vc.latent_dim = 6;
  flow::GenConfig fc;
  fc.layers = 2;
  fc.heads = 2;
  fc.hidden = 16;
  fc.latent_dim = 6;
  fc.audio_dim = 3;
  fc.time_freq_dim = 8;
  return random_model(vc, fc, seed);
}

inline flow::ConditioningBundle random_bundle(std::size_t frames, std::uint64_t seed, std::size_t da = 3) {
  RngStream rng(seed);
  flow::ConditioningBundle b;
  b.frames = frames;
  b.user_pos = NdArray<float>(frames, 2);
  b.audio_agent = NdArray<float>(frames, da);
  b.audio_user = NdArray<float>(frames, da);
  for (auto* a : {&b.user_pos, &b.audio_agent, &b.audio_user})
    for (auto& v : a->values()) v = static_cast<float>(rng.normal());
  return b;
}

}  // namespace dyad::testing
