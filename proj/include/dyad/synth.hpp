#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dyad/diff/ndarray.hpp"
#include "dyad/geometry.hpp"
#include "dyad/rng.hpp"

namespace dyad::synth {

using diff::NdArray;

struct ScenarioConfig {
  std::uint64_t seed = 1;
  std::size_t frames = 400;
  double fps = 30.0;
  std::size_t stride = 4;
  std::size_t audio_dim = 8;
  double room_half_extent = 3.5;
  double max_user_speed = 1.5;
  double gaze_bias_min = -0.3;
  double gaze_bias_max = 1.0;
  double mean_turn_seconds = 3.0;
  double overlap_probability = 0.1;
  /// Probability that a clip is dominated by the agent's speech.
  double agent_dominant_probability = 0.5;

  void validate() const;
};

enum class TrajectoryPattern { kStand, kArc, kApproachRetreat, kOrbit };
inline constexpr int kPatternCount = 4;

/// T x 2 floor positions (x, z) in world meters.
NdArray<float> gen_user_trajectory(const ScenarioConfig& config, RngStream& rng,
                                   std::optional<TrajectoryPattern> pattern = std::nullopt);

/// Mean channel-0 level during speech; clip-level classification thresholds
/// sit halfway between speech-dominated and silence-dominated clips.
inline constexpr double kSpeechLevel = 0.68;
/// Per-frame envelope level above which a frame counts as speaking.
inline constexpr double kFrameSpeakingThreshold = 0.2;

struct AudioFeatures {
  NdArray<float> agent;  // T x D_a; channel 0 is the energy envelope
  NdArray<float> user;
  std::vector<std::uint8_t> agent_mask;  // envelope above the frame threshold
  std::vector<std::uint8_t> user_mask;
  /// Raw turn state before smoothing.
  std::vector<std::uint8_t> agent_turn, user_turn;
};

AudioFeatures gen_audio_features(const ScenarioConfig& config, RngStream& rng);

/// World-frame agent motion: head yaw chases the bearing to the user with a
/// per-clip offset so the mean gaze score is near `gaze_bias`; wrist motion
/// grows with the agent's speech energy; feet only move while lifted.
geom::MotionSequence gen_agent_motion(const ScenarioConfig& config, const NdArray<float>& user_floor,
                                      const AudioFeatures& audio, double gaze_bias, RngStream& rng);

/// One normalized clip: agent frames in the agent's first-frame frame and the
/// user trajectory mapped into it. All values are float-exact.
struct DyadicClip {
  std::string id;
  std::shared_ptr<const geom::Skeleton> skeleton = geom::Skeleton::toy();
  double fps = 30.0;
  NdArray<float> agent;  // T x D_x, flattened joint-major
  NdArray<float> user_floor;
  NdArray<float> audio_agent;
  NdArray<float> audio_user;
  std::vector<std::uint8_t> speaking_mask_agent;
  float gaze_bias = 0.0f;

  std::size_t frames() const { return agent.rows(); }
  geom::MotionSequence motion() const;
  geom::Pose pose(std::size_t t) const;
  /// Per-frame gaze score of the agent toward the user.
  std::vector<double> gaze_series() const;
  void validate() const;
};

DyadicClip clip_from_motion(const std::string& id, const geom::MotionSequence& agent, const NdArray<float>& user_floor,
                            const AudioFeatures& audio, double gaze_bias);

/// Full pipeline for clip `index`: trajectory, audio, motion, normalization.
DyadicClip make_clip(const ScenarioConfig& config, std::size_t index);
double draw_gaze_bias(const ScenarioConfig& config, RngStream& rng);

}  // namespace dyad::synth
