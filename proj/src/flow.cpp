#include "dyad/flow.hpp"

#include <cmath>

#include "dyad/errors.hpp"

namespace dyad::flow {

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::kUserPos: return "user_pos";
    case Modality::kAudioAgent: return "audio_agent";
    case Modality::kAudioUser: return "audio_user";
    case Modality::kGaze: return "gaze";
  }
  return "?";
}

Modality modality_from_name(const std::string& name) {
  for (std::size_t i = 0; i < kModalityCount; ++i)
    if (name == modality_name(static_cast<Modality>(i))) return static_cast<Modality>(i);
  throw ValidationError("unknown modality: " + name);
}

GenConfig GenConfig::paper_scale() {
  GenConfig c;
  c.layers = 4;
  c.heads = 4;
  c.hidden = 1024;
  c.latent_dim = 256;
  return c;
}

void GenConfig::validate() const {
  if (heads == 0 || hidden % heads != 0 || (hidden / heads) % 2 != 0)
    throw ConfigError("flow.hidden must split into even-width heads");
  if (layers == 0 || latent_dim == 0 || stride == 0 || audio_dim == 0)
    throw ConfigError("flow dimensions must be positive");
  if (attention_window == 0) throw ConfigError("flow.attention_window must be at least 1");
  if (!(cfg_scale >= 0)) throw ConfigError("flow.cfg_scale must be non-negative");
  if (!(modality_dropout >= 0 && modality_dropout < 1)) throw ConfigError("flow.modality_dropout must be in [0, 1)");
  if (time_freq_dim < 2 || time_freq_dim % 2 != 0) throw ConfigError("flow.time_freq_dim must be even");
}

std::size_t GenConfig::modality_width(Modality m) const {
  switch (m) {
    case Modality::kUserPos: return 2;
    case Modality::kAudioAgent:
    case Modality::kAudioUser: return audio_dim;
    case Modality::kGaze: return 1;
  }
  return 0;
}

std::size_t GenConfig::condition_width() const {
  std::size_t w = 0;
  for (std::size_t i = 0; i < kModalityCount; ++i) w += stride * modality_width(static_cast<Modality>(i));
  return w;
}

const NdArray<float>& ConditioningBundle::stream(Modality m) const {
  switch (m) {
    case Modality::kUserPos: return user_pos;
    case Modality::kAudioAgent: return audio_agent;
    case Modality::kAudioUser: return audio_user;
    case Modality::kGaze: return gaze;
  }
  throw ValidationError("bad modality");
}

NdArray<float>& ConditioningBundle::stream(Modality m) {
  return const_cast<NdArray<float>&>(static_cast<const ConditioningBundle&>(*this).stream(m));
}

void ConditioningBundle::validate(std::size_t audio_dim) const {
  const std::array<std::size_t, kModalityCount> widths{2, audio_dim, audio_dim, 1};
  for (std::size_t i = 0; i < kModalityCount; ++i) {
    if (!present[i]) continue;
    const auto& s = stream(static_cast<Modality>(i));
    if (s.rows() != frames)
      throw LengthError(std::string(modality_name(static_cast<Modality>(i))) + " stream length " +
                        std::to_string(s.rows()) + " != " + std::to_string(frames));
    if (s.cols() != widths[i])
      throw ShapeError(std::string(modality_name(static_cast<Modality>(i))) + " stream has the wrong width");
    if (!s.all_finite()) throw ValidationError("conditioning contains non-finite values");
  }
  if (present[static_cast<std::size_t>(Modality::kGaze)])
    for (float g : gaze.values())
      if (g < -1.0f || g > 1.0f) throw ValidationError("gaze entries must lie in [-1, 1]");
  if (!frame_valid.empty() && frame_valid.size() != frames) throw LengthError("frame_valid length mismatch");
}

ConditioningBundle ConditioningBundle::slice(std::size_t f0, std::size_t n) const {
  if (f0 + n > frames) throw LengthError("conditioning slice out of range");
  ConditioningBundle out;
  out.frames = n;
  out.present = present;
  for (std::size_t i = 0; i < kModalityCount; ++i)
    if (present[i]) out.stream(static_cast<Modality>(i)) = stream(static_cast<Modality>(i)).slice_rows(f0, n);
  if (!frame_valid.empty())
    out.frame_valid.assign(frame_valid.begin() + static_cast<std::ptrdiff_t>(f0),
                           frame_valid.begin() + static_cast<std::ptrdiff_t>(f0 + n));
  return out;
}

ConditioningBundle ConditioningBundle::unconditional() const {
  ConditioningBundle out;
  out.frames = frames;
  out.present.fill(false);
  return out;
}

void ConditioningBundle::set_gaze_target(std::optional<double> g) {
  auto& p = present[static_cast<std::size_t>(Modality::kGaze)];
  if (!g) {
    p = false;
    gaze = NdArray<float>();
    return;
  }
  if (*g < -1.0 || *g > 1.0) throw ValidationError("gaze target must lie in [-1, 1]");
  gaze = NdArray<float>(frames, 1, static_cast<float>(*g));
  p = true;
}

ConditioningBundle dropout_modalities(const ConditioningBundle& bundle, RngStream& rng, double p) {
  ConditioningBundle out = bundle;
  for (std::size_t i = 0; i < kModalityCount; ++i) {
    // Draw for every modality so the stream advances identically whatever is present.
    const bool drop = rng.bernoulli(p);
    if (drop) out.present[i] = false;
  }
  return out;
}

template <typename T>
NdArray<T> interpolate(const NdArray<T>& z, const NdArray<T>& eps, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ValidationError("interpolate: tau outside [0, 1]");
  if (!z.same_shape(eps)) throw ShapeError("interpolate: shape mismatch");
  NdArray<T> out(z.rows(), z.cols());
  const T a = static_cast<T>(tau), b = static_cast<T>(1.0 - tau);
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = a * z[i] + b * eps[i];
  return out;
}

template <typename T>
NdArray<T> x1_to_velocity(const NdArray<T>& z_hat, const NdArray<T>& z_tau, double tau) {
  if (!(tau < 1.0)) throw NumericError("x1_to_velocity: tau must be below 1");
  if (!z_hat.same_shape(z_tau)) throw ShapeError("x1_to_velocity: shape mismatch");
  NdArray<T> v(z_hat.rows(), z_hat.cols());
  const T inv = static_cast<T>(1.0 / (1.0 - tau));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (z_hat[i] - z_tau[i]) * inv;
  return v;
}

template <typename T>
NdArray<T> cfg_combine(const NdArray<T>& cond, const NdArray<T>& uncond, double w) {
  if (!cond.same_shape(uncond)) throw ShapeError("cfg_combine: shape mismatch");
  NdArray<T> out(cond.rows(), cond.cols());
  const T a = static_cast<T>(1.0 - w), b = static_cast<T>(w);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * uncond[i] + b * cond[i];
  return out;
}

template <typename T>
FlowGenerator<T>::FlowGenerator(const GenConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  RngStream rng(seed);
  const std::size_t h = config_.hidden;
  for (std::size_t i = 0; i < kModalityCount; ++i) {
    const auto m = static_cast<Modality>(i);
    const std::size_t w = config_.stride * config_.modality_width(m);
    encodings_[i] = diff::LearnedEncoding<T>(store_, std::string("flow.enc.") + modality_name(m), 1, w, rng);
    nulls_[i] = diff::LearnedEncoding<T>(store_, std::string("flow.null.") + modality_name(m), 1, w, rng);
  }
  in_proj_ = diff::Linear<T>(store_, "flow.in", config_.latent_dim + config_.condition_width(), h, rng);
  time_embed_ = diff::TimestepEmbedding<T>(store_, "flow.time", h, rng, config_.time_freq_dim);
  for (std::size_t i = 0; i < config_.layers; ++i)
    blocks_.emplace_back(store_, "flow.block" + std::to_string(i), h, config_.heads, h, rng);
  final_mod_ = diff::Linear<T>(store_, "flow.final.modulation", h, 2 * h, rng, /*zero_init=*/true);
  out_ = diff::Linear<T>(store_, "flow.out", h, config_.latent_dim, rng);
}

template <typename T>
Var FlowGenerator<T>::condition_tokens(Tape<T>& t, const ConditioningBundle& bundle) const {
  const std::size_t s = config_.stride;
  if (bundle.frames == 0 || bundle.frames % s != 0)
    throw LengthError("conditioning length " + std::to_string(bundle.frames) + " is not a multiple of the stride");
  bundle.validate(config_.audio_dim);
  const std::size_t k_tokens = bundle.frames / s;

  std::vector<bool> padded(k_tokens, false);
  if (!bundle.frame_valid.empty())
    for (std::size_t f = 0; f < bundle.frames; ++f)
      if (!bundle.frame_valid[f]) padded[f / s] = true;

  std::vector<Var> parts;
  for (std::size_t i = 0; i < kModalityCount; ++i) {
    const auto m = static_cast<Modality>(i);
    const std::size_t w = config_.modality_width(m);
    Var null_row = nulls_[i](t, 1);
    if (!bundle.has(m)) {
      parts.push_back(diff::gather_rows(t, null_row, std::vector<std::size_t>(k_tokens, 0)));
      continue;
    }
    const auto& src = bundle.stream(m);
    NdArray<T> folded(k_tokens, s * w);
    for (std::size_t k = 0; k < k_tokens; ++k)
      for (std::size_t j = 0; j < s; ++j)
        for (std::size_t c = 0; c < w; ++c) folded(k, j * w + c) = static_cast<T>(src(k * s + j, c));
    Var real = diff::add_row(t, t.constant(std::move(folded)), encodings_[i](t, 1));
    bool any_padded = false;
    std::vector<std::size_t> pick(k_tokens);
    for (std::size_t k = 0; k < k_tokens; ++k) {
      pick[k] = padded[k] ? k_tokens : k;
      any_padded = any_padded || padded[k];
    }
    parts.push_back(any_padded ? diff::gather_rows(t, diff::concat_rows<T>(t, {real, null_row}), pick) : real);
  }
  return diff::concat_cols<T>(t, parts);
}

template <typename T>
Var FlowGenerator<T>::predict_x1(Tape<T>& t, Var z_tau, T tau, Var cond, std::size_t first_token) const {
  const auto& zv = t.value(z_tau);
  const auto& cv = t.value(cond);
  if (zv.cols() != config_.latent_dim || cv.cols() != config_.condition_width() || zv.rows() != cv.rows())
    throw ShapeError("predict_x1: latent/conditioning shapes do not match the model");
  const std::size_t k_tokens = zv.rows();

  diff::AttentionMask mask(k_tokens);
  for (std::size_t q = 0; q < k_tokens; ++q)
    for (std::size_t k = q + 1 >= config_.attention_window ? q + 1 - config_.attention_window : 0; k <= q; ++k)
      mask.set(q, k);
  std::vector<int> positions(k_tokens);
  for (std::size_t k = 0; k < k_tokens; ++k) positions[k] = static_cast<int>(first_token + k);

  Var c = diff::silu(t, time_embed_(t, tau));
  Var h = in_proj_(t, diff::concat_cols<T>(t, {z_tau, cond}));
  for (const auto& b : blocks_) h = b(t, h, c, mask, positions);
  Var mod = final_mod_(t, c);
  const std::size_t hd = config_.hidden;
  h = diff::modulate(t, diff::normalize_rows(t, h), diff::slice_cols(t, mod, 0, hd), diff::slice_cols(t, mod, hd, hd));
  return out_(t, h);
}

template <typename T>
NdArray<T> FlowGenerator<T>::predict_x1(const NdArray<T>& z_tau, double tau, const ConditioningBundle& bundle,
                                        std::size_t first_token) const {
  Tape<T> t(false);
  Var cond = condition_tokens(t, bundle);
  return t.value(predict_x1(t, t.constant(z_tau), static_cast<T>(tau), cond, first_token));
}

template <typename T>
Var flow_loss(Tape<T>& t, const FlowGenerator<T>& model, const NdArray<T>& z, const ConditioningBundle& bundle,
              RngStream& rng, std::size_t first_token) {
  const double tau = rng.uniform();
  NdArray<T> eps(z.rows(), z.cols());
  for (auto& v : eps.values()) v = static_cast<T>(rng.normal());
  const ConditioningBundle dropped = dropout_modalities(bundle, rng, model.config().modality_dropout);
  Var cond = model.condition_tokens(t, dropped);
  Var pred = model.predict_x1(t, t.constant(interpolate(z, eps, tau)), static_cast<T>(tau), cond, first_token);
  return diff::mse(t, pred, t.constant(z));
}

template <typename T>
NdArray<T> cfg_predict(const FlowGenerator<T>& model, const NdArray<T>& z_tau, double tau,
                       const ConditioningBundle& bundle, double w, std::size_t first_token) {
  const NdArray<T> cond = model.predict_x1(z_tau, tau, bundle, first_token);
  const NdArray<T> uncond = model.predict_x1(z_tau, tau, bundle.unconditional(), first_token);
  return cfg_combine(cond, uncond, w);
}

SampleResult sample(const Denoiser& denoiser, std::size_t tokens, std::size_t latent_dim, std::size_t steps,
                    double w, RngStream& rng, const Imputation* imputation) {
  if (steps == 0) throw ValidationError("sample: steps must be at least 1");
  if (tokens == 0) throw ValidationError("sample: no tokens");
  if (imputation) {
    const auto& imp = *imputation;
    if (imp.values.rows() != imp.positions.size() || imp.noise.rows() != imp.positions.size() ||
        (!imp.positions.empty() && (imp.values.cols() != latent_dim || imp.noise.cols() != latent_dim)))
      throw ShapeError("sample: imputation values/noise do not match positions");
    for (std::size_t p : imp.positions)
      if (p >= tokens) throw ValidationError("sample: imputation position out of range");
  }

  SampleResult res;
  res.noise = NdArray<float>(tokens, latent_dim);
  for (auto& v : res.noise.values()) v = static_cast<float>(rng.normal());
  if (imputation)
    for (std::size_t i = 0; i < imputation->positions.size(); ++i)
      std::copy_n(imputation->noise.row(i), latent_dim, res.noise.row(imputation->positions[i]));

  auto impute = [&](NdArray<float>& z, double tau) {
    if (!imputation) return;
    const float a = static_cast<float>(tau), b = static_cast<float>(1.0 - tau);
    for (std::size_t i = 0; i < imputation->positions.size(); ++i) {
      float* row = z.row(imputation->positions[i]);
      for (std::size_t c = 0; c < latent_dim; ++c)
        row[c] = a * imputation->values(i, c) + b * imputation->noise(i, c);
    }
  };
  auto guided = [&](const NdArray<float>& z, double tau) {
    if (w == 1.0) {
      ++res.evaluations;
      return denoiser(z, tau, true);
    }
    if (w == 0.0) {
      ++res.evaluations;
      return denoiser(z, tau, false);
    }
    res.evaluations += 2;
    return cfg_combine(denoiser(z, tau, true), denoiser(z, tau, false), w);
  };

  NdArray<float> z = res.noise;
  for (std::size_t i = 0; i < steps; ++i) {
    const double t0 = static_cast<double>(i) / static_cast<double>(steps);
    const double t1 = static_cast<double>(i + 1) / static_cast<double>(steps);
    const double h = t1 - t0, tm = t0 + 0.5 * h;
    impute(z, t0);
    const NdArray<float> v0 = x1_to_velocity(guided(z, t0), z, t0);
    NdArray<float> zm(tokens, latent_dim);
    for (std::size_t j = 0; j < zm.size(); ++j) zm[j] = z[j] + static_cast<float>(0.5 * h) * v0[j];
    impute(zm, tm);
    const NdArray<float> vm = x1_to_velocity(guided(zm, tm), zm, tm);
    for (std::size_t j = 0; j < z.size(); ++j) z[j] += static_cast<float>(h) * vm[j];
  }
  impute(z, 1.0);
  res.latents = std::move(z);
  return res;
}

Denoiser model_denoiser(const FlowGenerator<float>& model, const ConditioningBundle& bundle,
                        std::size_t first_token) {
  NdArray<float> cond, uncond;
  {
    Tape<float> t(false);
    cond = t.value(model.condition_tokens(t, bundle));
    uncond = t.value(model.condition_tokens(t, bundle.unconditional()));
  }
  return [&model, cond = std::move(cond), uncond = std::move(uncond), first_token](
             const NdArray<float>& z_tau, double tau, bool conditional) {
    Tape<float> t(false);
    Var c = t.constant(conditional ? cond : uncond);
    return t.value(model.predict_x1(t, t.constant(z_tau), static_cast<float>(tau), c, first_token));
  };
}

#define DYAD_INSTANTIATE_FLOW(T)                                                                                \
  template NdArray<T> interpolate<T>(const NdArray<T>&, const NdArray<T>&, double);                             \
  template NdArray<T> x1_to_velocity<T>(const NdArray<T>&, const NdArray<T>&, double);                          \
  template NdArray<T> cfg_combine<T>(const NdArray<T>&, const NdArray<T>&, double);                             \
  template class FlowGenerator<T>;                                                                              \
  template Var flow_loss<T>(Tape<T>&, const FlowGenerator<T>&, const NdArray<T>&, const ConditioningBundle&,    \
                            RngStream&, std::size_t);                                                           \
  template NdArray<T> cfg_predict<T>(const FlowGenerator<T>&, const NdArray<T>&, double,                        \
                                     const ConditioningBundle&, double, std::size_t);

DYAD_INSTANTIATE_FLOW(float)
DYAD_INSTANTIATE_FLOW(double)

}  // namespace dyad::flow
