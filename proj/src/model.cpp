#include "dyad/model.hpp"

#include <algorithm>
#include <cmath>

#include "dyad/binio.hpp"
#include "dyad/errors.hpp"
#include "dyad/rng.hpp"

namespace dyad {

using diff::NdArray;

Standardizer Standardizer::identity(std::size_t d) { return Standardizer{std::vector<float>(d, 0.0f), std::vector<float>(d, 1.0f)}; }

Standardizer Standardizer::fit(const std::vector<const NdArray<float>*>& arrays, float min_scale) {
  if (arrays.empty()) throw ValidationError("no data to fit a standardizer");
  const std::size_t d = arrays.front()->cols();
  std::vector<double> sum(d, 0.0), sq(d, 0.0);
  std::size_t n = 0;
  for (const auto* a : arrays) {
    if (a->cols() != d) throw ShapeError("standardizer inputs differ in width");
    for (std::size_t r = 0; r < a->rows(); ++r) {
      const float* row = a->row(r);
      for (std::size_t c = 0; c < d; ++c) sum[c] += row[c];
    }
    n += a->rows();
  }
  if (n < 2) throw ValidationError("standardizer needs at least two rows");
  std::vector<double> mean(d);
  for (std::size_t c = 0; c < d; ++c) mean[c] = sum[c] / static_cast<double>(n);
  for (const auto* a : arrays)
    for (std::size_t r = 0; r < a->rows(); ++r) {
      const float* row = a->row(r);
      for (std::size_t c = 0; c < d; ++c) sq[c] += (row[c] - mean[c]) * (row[c] - mean[c]);
    }
  Standardizer s;
  s.mean.resize(d);
  s.scale.resize(d);
  for (std::size_t c = 0; c < d; ++c) {
    s.mean[c] = static_cast<float>(mean[c]);
    s.scale[c] = std::max(min_scale, static_cast<float>(std::sqrt(sq[c] / static_cast<double>(n - 1))));
  }
  return s;
}

NdArray<float> Standardizer::forward(const NdArray<float>& x) const {
  if (x.cols() != dim()) throw ShapeError("standardizer width mismatch");
  NdArray<float> y(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) y(r, c) = (x(r, c) - mean[c]) / scale[c];
  return y;
}

NdArray<float> Standardizer::inverse(const NdArray<float>& y) const {
  if (y.cols() != dim()) throw ShapeError("standardizer width mismatch");
  NdArray<float> x(y.rows(), y.cols());
  for (std::size_t r = 0; r < y.rows(); ++r)
    for (std::size_t c = 0; c < y.cols(); ++c) x(r, c) = y(r, c) * scale[c] + mean[c];
  return x;
}

void Standardizer::save(diff::Checkpoint& ckpt, const std::string& name) const {
  ckpt.put(diff::to_record(name + ".mean", NdArray<float>(1, dim(), mean)));
  ckpt.put(diff::to_record(name + ".scale", NdArray<float>(1, dim(), scale)));
}

Standardizer Standardizer::load(const diff::Checkpoint& ckpt, const std::string& name) {
  const auto* m = ckpt.find(name + ".mean");
  const auto* s = ckpt.find(name + ".scale");
  if (!m || !s) throw FormatError("checkpoint lacks standardizer " + name);
  Standardizer out{m->data, s->data};
  if (out.mean.size() != out.scale.size()) throw ShapeError("standardizer " + name + " is inconsistent");
  return out;
}

nlohmann::json to_json(const vae::VaeConfig& c) {
  return {{"stride", c.stride}, {"layers", c.layers},         {"heads", c.heads},
          {"hidden", c.hidden}, {"latent_dim", c.latent_dim}, {"frame_dim", c.frame_dim},
          {"beta", c.beta},     {"decoder_context", c.decoder_context}, {"velocity_weight", c.velocity_weight}};
}

nlohmann::json to_json(const flow::GenConfig& c) {
  return {{"layers", c.layers},
          {"heads", c.heads},
          {"hidden", c.hidden},
          {"latent_dim", c.latent_dim},
          {"stride", c.stride},
          {"audio_dim", c.audio_dim},
          {"attention_window", c.attention_window},
          {"cfg_scale", c.cfg_scale},
          {"modality_dropout", c.modality_dropout},
          {"time_freq_dim", c.time_freq_dim}};
}

vae::VaeConfig vae_config_from_json(const nlohmann::json& j) {
  vae::VaeConfig c;
  c.stride = j.at("stride");
  c.layers = j.at("layers");
  c.heads = j.at("heads");
  c.hidden = j.at("hidden");
  c.latent_dim = j.at("latent_dim");
  c.frame_dim = j.at("frame_dim");
  c.beta = j.at("beta");
  c.decoder_context = j.at("decoder_context");
  c.velocity_weight = j.value("velocity_weight", 0.0);
  c.validate();
  return c;
}

flow::GenConfig gen_config_from_json(const nlohmann::json& j) {
  flow::GenConfig c;
  c.layers = j.at("layers");
  c.heads = j.at("heads");
  c.hidden = j.at("hidden");
  c.latent_dim = j.at("latent_dim");
  c.stride = j.at("stride");
  c.audio_dim = j.at("audio_dim");
  c.attention_window = j.at("attention_window");
  c.cfg_scale = j.at("cfg_scale");
  c.modality_dropout = j.at("modality_dropout");
  c.time_freq_dim = j.at("time_freq_dim");
  c.validate();
  return c;
}

std::size_t ModelBundle::decode_window() const {
  const auto& c = vae->config();
  return c.layers * (c.decoder_context - 1) + 1;
}

void ModelBundle::validate() const {
  if (!vae) throw DependencyError("VAE is not loaded");
  const auto& vc = vae->config();
  if (vc.frame_dim != skeleton->flat_dim()) throw ConfigError("VAE frame_dim does not match the skeleton");
  if (frames.dim() != vc.frame_dim) throw ConfigError("frame standardizer width mismatch");
  if (flow) {
    const auto& fc = flow->config();
    if (fc.latent_dim != vc.latent_dim) throw ConfigError("flow latent_dim differs from the VAE");
    if (fc.stride != vc.stride) throw ConfigError("flow stride differs from the VAE");
    if (latents.dim() != vc.latent_dim) throw ConfigError("latent standardizer width mismatch");
  }
}

void ModelBundle::save(const std::filesystem::path& dir) const {
  validate();
  std::filesystem::create_directories(dir);
  diff::Checkpoint v;
  v.meta = {{"kind", "vae"}, {"config", to_json(vae->config())}, {"fps", fps}, {"joints", skeleton->joints},
            {"encode_window", encode_window}};
  diff::export_params(vae->params(), v);
  frames.save(v, "stats.frames");
  diff::write_checkpoint(dir / "vae.ckpt", v);
  if (flow) {
    diff::Checkpoint f;
    f.meta = {{"kind", "flow"}, {"config", to_json(flow->config())}, {"vae_fingerprint", vae_fingerprint(dir)}};
    diff::export_params(flow->params(), f);
    latents.save(f, "stats.latents");
    diff::write_checkpoint(dir / "flow.ckpt", f);
  }
}

std::unique_ptr<ModelBundle> ModelBundle::load(const std::filesystem::path& dir, bool require_flow) {
  if (!std::filesystem::exists(dir / "vae.ckpt")) throw DependencyError("no VAE checkpoint in " + dir.string());
  auto b = std::make_unique<ModelBundle>();
  const auto v = diff::read_checkpoint(dir / "vae.ckpt");
  try {
    b->fps = v.meta.at("fps");
    b->encode_window = v.meta.value("encode_window", std::size_t{32});
    b->skeleton = geom::Skeleton::from_names(v.meta.at("joints").get<std::vector<std::string>>());
    b->vae = std::make_unique<vae::CausalVae<float>>(vae_config_from_json(v.meta.at("config")), 0);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("VAE checkpoint metadata: " + std::string(e.what()));
  }
  diff::import_params(v, b->vae->params());
  b->frames = Standardizer::load(v, "stats.frames");
  if (std::filesystem::exists(dir / "flow.ckpt")) {
    const auto f = diff::read_checkpoint(dir / "flow.ckpt");
    if (f.meta.contains("vae_fingerprint") && f.meta["vae_fingerprint"].get<std::uint64_t>() != vae_fingerprint(dir))
      throw ConfigError("flow checkpoint in " + dir.string() + " was trained against a different VAE");
    try {
      b->flow = std::make_unique<flow::FlowGenerator<float>>(gen_config_from_json(f.meta.at("config")), 0);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("flow checkpoint metadata: " + std::string(e.what()));
    }
    diff::import_params(f, b->flow->params());
    b->latents = Standardizer::load(f, "stats.latents");
  } else if (require_flow) {
    throw DependencyError("no flow checkpoint in " + dir.string());
  }
  b->validate();
  return b;
}

std::uint64_t vae_fingerprint(const std::filesystem::path& dir) {
  const auto bytes = binio::read_file(dir / "vae.ckpt");
  return stable_hash(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

}  // namespace dyad
