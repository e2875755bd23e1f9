#pragma once

#include <filesystem>
#include <memory>
#include <vector>

#include "json.hpp"

#include "dyad/diff/checkpoint.hpp"
#include "dyad/flow.hpp"
#include "dyad/geometry.hpp"
#include "dyad/vae.hpp"

namespace dyad {

/// Per-column affine standardization: y = (x - mean) / scale.
struct Standardizer {
  std::vector<float> mean, scale;

  std::size_t dim() const { return mean.size(); }
  bool empty() const { return mean.empty(); }
  /// Identity transform of width d.
  static Standardizer identity(std::size_t d);
  /// Column statistics over all rows of all arrays; scales are floored at
  /// `min_scale` so constant columns stay finite.
  static Standardizer fit(const std::vector<const diff::NdArray<float>*>& arrays, float min_scale = 1e-3f);

  diff::NdArray<float> forward(const diff::NdArray<float>& x) const;
  diff::NdArray<float> inverse(const diff::NdArray<float>& y) const;

  void save(diff::Checkpoint& ckpt, const std::string& name) const;
  static Standardizer load(const diff::Checkpoint& ckpt, const std::string& name);
};

nlohmann::json to_json(const vae::VaeConfig& c);
nlohmann::json to_json(const flow::GenConfig& c);
vae::VaeConfig vae_config_from_json(const nlohmann::json& j);
flow::GenConfig gen_config_from_json(const nlohmann::json& j);

/// Everything the runtime needs: both networks plus their data transforms.
struct ModelBundle {
  std::shared_ptr<const geom::Skeleton> skeleton = geom::Skeleton::toy();
  double fps = 30.0;
  /// Frames per encoder window when encoding long sequences (the VAE's
  /// training crop length).
  std::size_t encode_window = 32;
  std::unique_ptr<vae::CausalVae<float>> vae;
  std::unique_ptr<flow::FlowGenerator<float>> flow;
  Standardizer frames;   // D_x, applied before encoding and inverted after decoding
  Standardizer latents;  // D_z, applied to encoder means before flow training

  std::size_t stride() const { return vae->config().stride; }
  /// Latent blocks the decoder must see so a windowed decode reproduces the
  /// full-sequence decode of its last block exactly.
  std::size_t decode_window() const;
  void validate() const;

  /// Writes vae.ckpt and flow.ckpt (flow optional) into `dir`.
  void save(const std::filesystem::path& dir) const;
  /// DependencyError when a required checkpoint is missing.
  /// ConfigError when flow.ckpt was trained against a different VAE.
  static std::unique_ptr<ModelBundle> load(const std::filesystem::path& dir, bool require_flow = true);
};

/// Hash of <dir>/vae.ckpt, recorded by the flow checkpoint.
std::uint64_t vae_fingerprint(const std::filesystem::path& dir);

}  // namespace dyad
