#include "dyad/stream.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "dyad/errors.hpp"

namespace dyad::stream {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Decodes standardized latents for blocks [first_block, first_block + K) to
/// world-unit frames.
NdArray<float> decode_world(const ModelBundle& m, const NdArray<float>& z_std, std::size_t first_block) {
  return m.frames.inverse(vae::decode_latents(*m.vae, m.latents.inverse(z_std), first_block));
}

}  // namespace

std::vector<geom::Pose> StreamChunk::poses(std::shared_ptr<const geom::Skeleton> skeleton) const {
  std::vector<geom::Pose> out;
  for (std::size_t r = 0; r < frames.rows(); ++r)
    out.push_back(geom::unflatten(std::span<const float>(frames.row(r), frames.cols()), skeleton));
  return out;
}

StreamState::StreamState(std::shared_ptr<const ModelBundle> model, StreamOptions options)
    : model_(std::move(model)), options_(options), rng_(options.seed) {
  if (!model_ || !model_->vae || !model_->flow) throw DependencyError("stream needs a loaded VAE and flow model");
  model_->validate();
  stride_ = model_->stride();
  audio_dim_ = model_->flow->config().audio_dim;
  if (options_.window_tokens == 0) throw ConfigError("stream.window_tokens must be positive");
  if (options_.steps == 0) throw ConfigError("stream.steps must be positive");
  if (options_.capacity < options_.window_tokens * stride_ || options_.capacity % stride_ != 0)
    throw ConfigError("stream.capacity must be a stride multiple covering the sampler window");
}

double StreamState::cfg_scale() const {
  return options_.cfg_scale >= 0 ? options_.cfg_scale : model_->flow->config().cfg_scale;
}

void StreamState::push_frame(const geom::Vec2& user_pos, std::span<const float> audio_agent,
                             std::span<const float> audio_user, std::optional<double> gaze_target) {
  if (audio_agent.size() != audio_dim_ || audio_user.size() != audio_dim_)
    throw ValidationError("audio frame width " + std::to_string(audio_agent.size()) + "/" +
                          std::to_string(audio_user.size()) + " != " + std::to_string(audio_dim_));
  auto finite = [](std::span<const float> s) {
    return std::all_of(s.begin(), s.end(), [](float v) { return std::isfinite(v); });
  };
  if (!user_pos.allFinite() || !finite(audio_agent) || !finite(audio_user))
    throw ValidationError("conditioning frame contains non-finite values");
  if (gaze_target && !(*gaze_target >= -1.0 && *gaze_target <= 1.0))
    throw ValidationError("gaze target must lie in [-1, 1]");
  Frame f;
  f.user[0] = static_cast<float>(user_pos.x());
  f.user[1] = static_cast<float>(user_pos.y());
  f.audio_agent.assign(audio_agent.begin(), audio_agent.end());
  f.audio_user.assign(audio_user.begin(), audio_user.end());
  f.gaze = gaze_target;
  window_.push_back(std::move(f));
  if (window_.size() > options_.capacity) window_.pop_front();
  ++pushed_;
}

const StreamState::Frame& StreamState::frame_at(std::size_t index) const {
  const std::size_t first = pushed_ - window_.size();
  if (index < first) throw StreamError("conditioning frame " + std::to_string(index) + " was already evicted");
  if (index >= pushed_) throw StreamError("conditioning frame " + std::to_string(index) + " not pushed yet");
  return window_[index - first];
}

flow::ConditioningBundle StreamState::bundle_for(std::size_t first_frame, std::size_t frames) const {
  flow::ConditioningBundle b;
  b.frames = frames;
  b.user_pos = NdArray<float>(frames, 2);
  b.audio_agent = NdArray<float>(frames, audio_dim_);
  b.audio_user = NdArray<float>(frames, audio_dim_);
  // Gaze steering follows the newest frame; older frames without a target
  // inherit it so one window never mixes present and absent gaze.
  const auto latest = frame_at(first_frame + frames - 1).gaze;
  if (latest) b.gaze = NdArray<float>(frames, 1);
  for (std::size_t i = 0; i < frames; ++i) {
    const Frame& f = frame_at(first_frame + i);
    b.user_pos(i, 0) = f.user[0];
    b.user_pos(i, 1) = f.user[1];
    std::copy(f.audio_agent.begin(), f.audio_agent.end(), b.audio_agent.row(i));
    std::copy(f.audio_user.begin(), f.audio_user.end(), b.audio_user.row(i));
    if (latest) b.gaze(i, 0) = static_cast<float>(f.gaze.value_or(*latest));
  }
  b.present = {true, true, true, latest.has_value()};
  return b;
}

flow::ConditioningBundle StreamState::causal_feature_window() const {
  if (pushed_ < stride_) throw StreamError("fewer than one block of conditioning pushed");
  const std::size_t cap = options_.capacity;
  const std::size_t real = std::min(pushed_, cap);
  const auto recent = bundle_for(pushed_ - real, real);
  flow::ConditioningBundle b;
  b.frames = cap;
  b.present = recent.present;
  b.frame_valid.assign(cap, 0);
  for (std::size_t i = 0; i < flow::kModalityCount; ++i) {
    const auto m = static_cast<flow::Modality>(i);
    if (!b.present[i]) continue;
    const auto& src = recent.stream(m);
    NdArray<float> dst(cap, src.cols());
    std::copy(src.values().begin(), src.values().end(), dst.row(cap - real));
    b.stream(m) = std::move(dst);
  }
  std::fill(b.frame_valid.begin() + static_cast<std::ptrdiff_t>(cap - real), b.frame_valid.end(), 1);
  return b;
}

StreamChunk StreamState::generate_chunk() {
  if (!chunk_ready()) throw StreamError("conditioning starvation: next block not fully pushed");
  const auto t0 = Clock::now();
  const ModelBundle& m = *model_;
  const std::size_t s = stride_, dz = m.vae->config().latent_dim;
  const std::size_t k = emitted_ / s;
  const std::size_t k0 = k + 1 >= options_.window_tokens ? k + 1 - options_.window_tokens : 0;
  const std::size_t n_tok = k - k0 + 1;

  const auto bundle = bundle_for(k0 * s, n_tok * s);
  flow::Imputation imp;
  imp.values = NdArray<float>(n_tok - 1, dz);
  imp.noise = NdArray<float>(n_tok - 1, dz);
  for (std::size_t j = 0; j + 1 < n_tok; ++j) {
    const Token& h = history_.at(k0 + j - history_first_);
    imp.positions.push_back(j);
    std::copy(h.latent.begin(), h.latent.end(), imp.values.row(j));
    std::copy(h.noise.begin(), h.noise.end(), imp.noise.row(j));
  }
  const auto denoiser = flow::model_denoiser(*m.flow, bundle, k0);
  const auto res = flow::sample(denoiser, n_tok, dz, options_.steps, cfg_scale(), rng_, n_tok > 1 ? &imp : nullptr);
  double drift = 0;
  for (std::size_t j = 0; j + 1 < n_tok; ++j)
    for (std::size_t c = 0; c < dz; ++c)
      drift = std::max(drift, static_cast<double>(std::abs(res.latents(j, c) - imp.values(j, c))));
  Token fresh;
  fresh.latent.assign(res.latents.row(n_tok - 1), res.latents.row(n_tok - 1) + dz);
  fresh.noise.assign(res.noise.row(n_tok - 1), res.noise.row(n_tok - 1) + dz);
  if (history_.empty()) history_first_ = k;
  std::vector<float> latent = fresh.latent;
  history_.push_back(std::move(fresh));

  const std::size_t dw = m.decode_window();
  const std::size_t kd0 = k + 1 >= dw ? k + 1 - dw : 0;
  NdArray<float> z(k - kd0 + 1, dz);
  for (std::size_t j = kd0; j <= k; ++j) {
    const Token& h = history_.at(j - history_first_);
    std::copy(h.latent.begin(), h.latent.end(), z.row(j - kd0));
  }
  const auto decoded = decode_world(m, z, kd0);

  const std::size_t keep = std::max(options_.window_tokens - 1, dw - 1);
  while (history_.size() > keep) {
    history_.pop_front();
    ++history_first_;
  }

  StreamChunk chunk;
  chunk.first_frame = emitted_;
  chunk.frames = decoded.slice_rows(decoded.rows() - s, s);
  chunk.latent = std::move(latent);
  chunk.history_drift = drift;
  emitted_ += s;
  chunk.latency_ms = ms_since(t0);
  return chunk;
}

void StreamState::reset(std::optional<std::uint64_t> seed) {
  if (seed) options_.seed = *seed;
  rng_ = RngStream(options_.seed);
  window_.clear();
  history_.clear();
  history_first_ = 0;
  pushed_ = emitted_ = 0;
}

NdArray<float> run_offline(std::shared_ptr<const ModelBundle> model, const flow::ConditioningBundle& bundle,
                           const StreamOptions& options) {
  StreamState state(model, options);
  const std::size_t s = state.model().stride();
  if (bundle.frames % s != 0) throw LengthError("bundle length is not a multiple of the stride");
  const std::size_t da = state.model().flow->config().audio_dim;
  bundle.validate(da);
  const std::vector<float> zeros(da, 0.0f);
  NdArray<float> out(bundle.frames, state.model().skeleton->flat_dim());
  const bool gaze = bundle.has(flow::Modality::kGaze);
  for (std::size_t f = 0; f < bundle.frames; ++f) {
    auto row = [&](flow::Modality m) {
      return bundle.has(m) ? std::span<const float>(bundle.stream(m).row(f), da) : std::span<const float>(zeros);
    };
    const geom::Vec2 u = bundle.has(flow::Modality::kUserPos)
                             ? geom::Vec2(bundle.user_pos(f, 0), bundle.user_pos(f, 1))
                             : geom::Vec2::Zero();
    state.push_frame(u, row(flow::Modality::kAudioAgent), row(flow::Modality::kAudioUser),
                     gaze ? std::optional<double>(bundle.gaze(f, 0)) : std::nullopt);
    if (state.chunk_ready()) {
      const auto c = state.generate_chunk();
      std::copy(c.frames.values().begin(), c.frames.values().end(), out.row(c.first_frame));
    }
  }
  return out;
}

NdArray<float> generate_batch(const ModelBundle& model, const flow::ConditioningBundle& bundle,
                              const StreamOptions& options) {
  if (!model.vae || !model.flow) throw DependencyError("generation needs a loaded VAE and flow model");
  const std::size_t s = model.stride();
  if (bundle.frames == 0 || bundle.frames % s != 0) throw LengthError("bundle length is not a multiple of the stride");
  RngStream rng(options.seed);
  const double w = options.cfg_scale >= 0 ? options.cfg_scale : model.flow->config().cfg_scale;
  const auto den = flow::model_denoiser(*model.flow, bundle, 0);
  const auto res = flow::sample(den, bundle.frames / s, model.vae->config().latent_dim, options.steps, w, rng);
  return decode_world(model, res.latents, 0);
}

nlohmann::json BenchReport::to_json() const {
  return {{"schema_version", 1},
          {"frames", frames},
          {"batch", {{"fps", batch_fps}}},
          {"streaming",
           {{"fps", streaming_fps},
            {"chunks", chunks},
            {"latency_ms",
             {{"mean", latency_mean_ms},
              {"p50", latency_p50_ms},
              {"p90", latency_p90_ms},
              {"p95", latency_p95_ms},
              {"p99", latency_p99_ms},
              {"max", latency_max_ms}}}}},
          {"settings", {{"steps", steps}, {"stride", stride}, {"cfg_scale", cfg_scale}}}};
}

BenchReport bench(std::shared_ptr<const ModelBundle> model, const flow::ConditioningBundle& bundle,
                  const StreamOptions& options) {
  BenchReport r;
  r.frames = bundle.frames;
  r.steps = options.steps;
  r.stride = model->stride();
  r.cfg_scale = options.cfg_scale >= 0 ? options.cfg_scale : model->flow->config().cfg_scale;

  generate_batch(*model, bundle, options);  // warm-up
  const auto t0 = Clock::now();
  generate_batch(*model, bundle, options);
  r.batch_fps = static_cast<double>(bundle.frames) / (ms_since(t0) / 1000.0);

  StreamState state(model, options);
  const std::size_t da = model->flow->config().audio_dim;
  std::vector<double> lat;
  for (std::size_t f = 0; f < bundle.frames; ++f) {
    state.push_frame(geom::Vec2(bundle.user_pos(f, 0), bundle.user_pos(f, 1)),
                     std::span<const float>(bundle.audio_agent.row(f), da),
                     std::span<const float>(bundle.audio_user.row(f), da));
    if (state.chunk_ready()) lat.push_back(state.generate_chunk().latency_ms);
  }
  // Steady state: the first chunk runs with a shorter window.
  if (lat.size() > 1) lat.erase(lat.begin());
  double total = 0;
  for (double l : lat) total += l;
  r.chunks = lat.size();
  r.latency_mean_ms = lat.empty() ? 0 : total / static_cast<double>(lat.size());
  r.streaming_fps = total > 0 ? static_cast<double>(lat.size() * r.stride) / (total / 1000.0) : 0;
  r.latency_p50_ms = percentile(lat, 0.5);
  r.latency_p90_ms = percentile(lat, 0.9);
  r.latency_p95_ms = percentile(lat, 0.95);
  r.latency_p99_ms = percentile(lat, 0.99);
  r.latency_max_ms = lat.empty() ? 0 : *std::max_element(lat.begin(), lat.end());
  return r;
}

}  // namespace dyad::stream
