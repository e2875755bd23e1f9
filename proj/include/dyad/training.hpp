#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"

#include "dyad/dataset.hpp"
#include "dyad/diff/optim.hpp"
#include "dyad/model.hpp"

namespace dyad::train {

using diff::NdArray;

/// Clips of the train and validation splits, held in memory.
struct TrainData {
  std::shared_ptr<const geom::Skeleton> skeleton = geom::Skeleton::toy();
  double fps = 30.0;
  std::size_t audio_dim = 0;
  std::vector<synth::DyadicClip> train, val;
};

TrainData load_train_data(const data::Manifest& manifest);

/// Conditioning streams of a clip. With `measured_gaze` the per-frame gaze
/// score of the agent is attached as the gaze stream.
flow::ConditioningBundle clip_conditioning(const synth::DyadicClip& clip, bool measured_gaze);

/// Encoder means of standardized frames, encoded in consecutive windows of
/// `window` frames (a multiple of the stride; a trailing partial block is
/// dropped). Returns K x D_z.
NdArray<float> encode_windows(const vae::CausalVae<float>& vae, const NdArray<float>& standardized,
                              std::size_t window);

/// Raw frames -> encode (windowed, mu) -> decode -> raw frames.
NdArray<float> reconstruct(const ModelBundle& model, const NdArray<float>& frames);

struct LoopOptions {
  std::size_t steps = 2000;
  std::size_t batch = 4;
  diff::AdamWConfig adam{1e-3, 0.9, 0.999, 1e-8, 1e-4, 200};
  double grad_clip = 1.0;
  std::size_t log_every = 50;
  std::size_t val_every = 500;
  std::size_t checkpoint_every = 500;
  std::uint64_t seed = 0;
  /// Continue from a saved training state when one exists.
  bool resume = true;
  /// Polled once per step; returning true saves the state and stops.
  std::function<bool()> stop;
  /// Receives every log record as it is written.
  std::function<void(const nlohmann::json&)> on_record;
};

struct VaeTrainOptions {
  vae::VaeConfig model;
  LoopOptions loop;
  std::size_t crop_frames = 32;
  /// Validation clips used for the reconstruction score (0 = all).
  std::size_t val_clips = 0;
};

struct FlowTrainOptions {
  flow::GenConfig model;
  LoopOptions loop;
  std::size_t crop_tokens = 2;
  /// Fixed validation crops scored with a fixed noise seed.
  std::size_t val_crops = 256;
};

struct ValPoint {
  std::size_t step = 0;
  double value = 0;
};

struct TrainSummary {
  std::size_t step = 0;
  bool completed = false;
  /// Validation curve: raw-unit reconstruction MSE for the VAE, flow loss
  /// for the generator.
  std::vector<ValPoint> validation;
  /// Mean-pose predictor MSE on the same validation frames (VAE only).
  double baseline = 0;
  double seconds = 0;
};

/// Writes <dir>/vae.ckpt, <dir>/vae.state and appends to <dir>/vae_log.jsonl.
TrainSummary train_vae(const TrainData& data, const VaeTrainOptions& options, const std::filesystem::path& dir);

/// Needs <dir>/vae.ckpt (DependencyError otherwise). Writes flow.ckpt,
/// flow.state and flow_log.jsonl next to it.
TrainSummary train_flow(const TrainData& data, const FlowTrainOptions& options, const std::filesystem::path& dir);

/// VAE reconstruction MSE and mean-pose baseline MSE, both in raw units.
std::pair<double, double> vae_validation(const ModelBundle& model, std::span<const synth::DyadicClip> clips);

}  // namespace dyad::train
