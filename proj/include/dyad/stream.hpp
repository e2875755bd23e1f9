#pragma once

#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"

#include "dyad/flow.hpp"
#include "dyad/model.hpp"
#include "dyad/rng.hpp"

namespace dyad::stream {

using diff::NdArray;

struct StreamOptions {
  std::uint64_t seed = 0;
  std::size_t steps = 4;
  /// Guidance weight; negative means "use the model's configured cfg_scale".
  double cfg_scale = -1.0;
  /// Conditioning frames retained for causal_feature_window.
  std::size_t capacity = 400;
  /// Tokens in the sampler window: history tokens imputed, the last one free.
  std::size_t window_tokens = 2;
};

struct StreamChunk {
  std::size_t first_frame = 0;
  NdArray<float> frames;  // s x D_x, world units
  std::vector<float> latent;  // the block's standardized latent
  double latency_ms = 0;
  /// Max |sampled - stored| over the imputed history tokens (0 without history).
  double history_drift = 0;

  std::vector<geom::Pose> poses(std::shared_ptr<const geom::Skeleton> skeleton) const;
};

/// Per-session autoregressive generator. Single owner; the model bundle is
/// shared read-only and may serve many streams.
class StreamState {
 public:
  StreamState(std::shared_ptr<const ModelBundle> model, StreamOptions options);

  /// Appends one 30 fps frame of conditioning. ValidationError for non-finite
  /// values or wrong audio widths.
  void push_frame(const geom::Vec2& user_pos, std::span<const float> audio_agent, std::span<const float> audio_user,
                  std::optional<double> gaze_target = std::nullopt);

  std::size_t frames_pushed() const { return pushed_; }
  /// Frames emitted so far.
  std::size_t frame_clock() const { return emitted_; }
  bool chunk_ready() const { return pushed_ >= emitted_ + stride_; }
  /// Latents emitted so far, in standardized units.
  std::size_t history_size() const { return history_.size(); }

  /// The most recent min(pushed, capacity) frames, left-padded to `capacity`
  /// with frames marked invalid. StreamError before one block is pushed.
  flow::ConditioningBundle causal_feature_window() const;

  /// Generates and decodes the next block. StreamError when the next block of
  /// conditioning has not been fully pushed.
  StreamChunk generate_chunk();

  void reset(std::optional<std::uint64_t> seed = std::nullopt);

  const ModelBundle& model() const { return *model_; }
  const StreamOptions& options() const { return options_; }
  double cfg_scale() const;

 private:
  struct Frame {
    float user[2];
    std::vector<float> audio_agent, audio_user;
    std::optional<double> gaze;
  };
  struct Token {
    std::vector<float> latent, noise;  // standardized latent and its frozen noise
  };

  flow::ConditioningBundle bundle_for(std::size_t first_frame, std::size_t frames) const;
  const Frame& frame_at(std::size_t index) const;

  std::shared_ptr<const ModelBundle> model_;
  StreamOptions options_;
  std::size_t stride_, audio_dim_;
  RngStream rng_;
  std::deque<Frame> window_;
  std::size_t pushed_ = 0, emitted_ = 0;
  std::deque<Token> history_;
  std::size_t history_first_ = 0;  // token index of history_.front()
};

/// Feeds a whole bundle through a fresh stream; output is T x D_x.
NdArray<float> run_offline(std::shared_ptr<const ModelBundle> model, const flow::ConditioningBundle& bundle,
                           const StreamOptions& options);

/// One-shot generation: all tokens sampled jointly, then decoded at once.
NdArray<float> generate_batch(const ModelBundle& model, const flow::ConditioningBundle& bundle,
                              const StreamOptions& options);

struct BenchReport {
  std::size_t frames = 0;
  double batch_fps = 0, streaming_fps = 0;
  double latency_mean_ms = 0, latency_p50_ms = 0, latency_p90_ms = 0, latency_p95_ms = 0, latency_p99_ms = 0, latency_max_ms = 0;
  std::size_t chunks = 0, steps = 0, stride = 0;
  double cfg_scale = 0;

  nlohmann::json to_json() const;
};

/// Runs both protocols on `bundle` after one warm-up pass.
BenchReport bench(std::shared_ptr<const ModelBundle> model, const flow::ConditioningBundle& bundle,
                  const StreamOptions& options);

}  // namespace dyad::stream
