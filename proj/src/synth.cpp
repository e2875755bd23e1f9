#include "dyad/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "dyad/errors.hpp"

namespace dyad::synth {

namespace {

using geom::Mat3;
using geom::Vec2;
using geom::Vec3;

constexpr double kPi = std::numbers::pi;

double smoothstep(double u) {
  u = std::clamp(u, 0.0, 1.0);
  return u * u * (3.0 - 2.0 * u);
}

double wrap_near(double angle, double reference) {
  return angle - 2.0 * kPi * std::round((angle - reference) / (2.0 * kPi));
}

/// Smooth bounded noise: a few sinusoids with random phase and frequency.
struct Wander {
  std::array<double, 3> freq{}, phase{}, weight{};
  Wander(RngStream& rng, double f_lo, double f_hi) {
    double total = 0;
    for (int i = 0; i < 3; ++i) {
      freq[i] = rng.uniform(f_lo, f_hi);
      phase[i] = rng.uniform(0.0, 2.0 * kPi);
      weight[i] = rng.uniform(0.5, 1.0);
      total += weight[i];
    }
    for (auto& w : weight) w /= total;
  }
  /// Values in [-1, 1].
  double operator()(double t) const {
    double v = 0;
    for (int i = 0; i < 3; ++i) v += weight[i] * std::sin(2.0 * kPi * freq[i] * t + phase[i]);
    return v;
  }
};

Mat3 pitch_rotation(double angle) { return geom::axis_angle(Vec3::UnitX(), angle); }

}  // namespace

void ScenarioConfig::validate() const {
  if (frames == 0) throw ValidationError("frames must be positive");
  if (!(fps > 0)) throw ValidationError("fps must be positive");
  if (stride == 0) throw ValidationError("stride must be positive");
  if (frames % stride != 0) throw ValidationError("clip length must be a multiple of the stride");
  if (audio_dim == 0) throw ValidationError("audio_dim must be positive");
  if (!(room_half_extent > 1.5)) throw ValidationError("room too small");
  if (!(gaze_bias_min >= -1.0 && gaze_bias_max <= 1.0 && gaze_bias_min <= gaze_bias_max))
    throw ValidationError("gaze bias range must lie in [-1, 1]");
  if (!(overlap_probability >= 0 && overlap_probability <= 1)) throw ValidationError("overlap_probability");
  if (!(mean_turn_seconds > 0.5)) throw ValidationError("mean_turn_seconds");
}

NdArray<float> gen_user_trajectory(const ScenarioConfig& config, RngStream& rng,
                                   std::optional<TrajectoryPattern> pattern) {
  config.validate();
  const auto kind = pattern ? *pattern : static_cast<TrajectoryPattern>(rng.index(kPatternCount));
  const double max_radius = std::min(2.8, config.room_half_extent - 0.7);
  const double speed_cap = std::min(1.2, config.max_user_speed * 0.8);
  const double r0 = rng.uniform(1.0, std::min(2.5, max_radius));
  const double theta0 = rng.uniform(-kPi, kPi);
  const Wander sway_x(rng, 0.05, 0.2), sway_z(rng, 0.05, 0.2);
  const double sway = kind == TrajectoryPattern::kStand ? 0.0 : 0.03;

  double amp = 0, omega = 0;
  switch (kind) {
    case TrajectoryPattern::kStand:
      break;
    case TrajectoryPattern::kArc:
      amp = rng.uniform(0.3, 1.2);
      omega = rng.uniform(0.2, 0.8);
      omega = std::min(omega, speed_cap / (r0 * amp));
      break;
    case TrajectoryPattern::kApproachRetreat:
      amp = std::min({rng.uniform(0.2, 0.7), r0 - 0.9, max_radius - r0});
      amp = std::max(amp, 0.0);
      omega = rng.uniform(0.3, 1.0);
      if (amp > 0) omega = std::min(omega, speed_cap / amp);
      break;
    case TrajectoryPattern::kOrbit:
      omega = rng.uniform(0.15, 0.5) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
      if (std::abs(omega) * r0 > speed_cap) omega = std::copysign(speed_cap / r0, omega);
      break;
  }

  NdArray<float> out(config.frames, 2);
  for (std::size_t f = 0; f < config.frames; ++f) {
    const double t = static_cast<double>(f) / config.fps;
    double r = r0, theta = theta0;
    if (kind == TrajectoryPattern::kArc) theta = theta0 + amp * std::sin(omega * t);
    if (kind == TrajectoryPattern::kApproachRetreat) r = r0 + amp * std::sin(omega * t);
    if (kind == TrajectoryPattern::kOrbit) theta = theta0 + omega * t;
    out(f, 0) = static_cast<float>(r * std::sin(theta) + sway * sway_x(t));
    out(f, 1) = static_cast<float>(r * std::cos(theta) + sway * sway_z(t));
  }
  return out;
}

AudioFeatures gen_audio_features(const ScenarioConfig& config, RngStream& rng) {
  config.validate();
  const std::size_t n = config.frames;
  const double fps = config.fps;
  AudioFeatures a;
  a.agent_turn.assign(n, 0);
  a.user_turn.assign(n, 0);

  // Alternating turns; the dominant speaker holds the floor longer.
  const bool agent_dominant = rng.bernoulli(config.agent_dominant_probability);
  const double long_turn = config.mean_turn_seconds * 1.4;
  const double short_turn = config.mean_turn_seconds * 0.5;
  auto turn_length = [&](bool agent) {
    const double mean = (agent == agent_dominant) ? long_turn : short_turn;
    const double secs = std::max(0.6, -mean * std::log(1.0 - rng.uniform()));
    return static_cast<std::size_t>(secs * fps);
  };
  bool agent_speaks = rng.bernoulli(agent_dominant ? 0.7 : 0.3);
  std::size_t f = 0;
  while (f < n) {
    const std::size_t len = turn_length(agent_speaks);
    auto& turn = agent_speaks ? a.agent_turn : a.user_turn;
    for (std::size_t i = f; i < std::min(n, f + len); ++i) turn[i] = 1;
    f += len;
    if (f >= n) break;
    if (rng.bernoulli(config.overlap_probability)) {
      // The current speaker keeps talking briefly into the next turn.
      const auto extra = static_cast<std::size_t>(rng.uniform(0.2, 0.6) * fps);
      for (std::size_t i = f; i < std::min(n, f + extra); ++i) turn[i] = 1;
    } else if (rng.bernoulli(0.5)) {
      f += static_cast<std::size_t>(rng.uniform(0.2, 0.8) * fps);
    }
    agent_speaks = !agent_speaks;
  }

  auto render = [&](const std::vector<std::uint8_t>& turn, NdArray<float>& feat, std::vector<std::uint8_t>& mask) {
    const std::size_t d = config.audio_dim;
    feat = NdArray<float>(n, d);
    mask.assign(n, 0);
    const double alpha = 1.0 - std::exp(-1.0 / (fps * 0.05));
    const double syllable_rate = rng.uniform(3.0, 5.0);
    const double syllable_phase = rng.uniform(0.0, 2.0 * kPi);
    std::vector<double> rho(d), state(d, 0.0);
    for (std::size_t c = 1; c < d; ++c) rho[c] = 0.3 + 0.6 * static_cast<double>(c - 1) / std::max<std::size_t>(1, d - 2);
    double env = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double t = static_cast<double>(i) / fps;
      const double target =
          turn[i] ? 0.8 * (0.6 + 0.4 * std::abs(std::sin(kPi * syllable_rate * t + syllable_phase))) : 0.0;
      env += alpha * (target - env);
      const double level = env + 0.01 * std::abs(rng.normal());
      feat(i, 0) = static_cast<float>(level);
      mask[i] = level > kFrameSpeakingThreshold;
      for (std::size_t c = 1; c < d; ++c) {
        state[c] = rho[c] * state[c] + std::sqrt(1.0 - rho[c] * rho[c]) * rng.normal();
        feat(i, c) = static_cast<float>(level * state[c]);
      }
    }
  };
  render(a.agent_turn, a.agent, a.agent_mask);
  render(a.user_turn, a.user, a.user_mask);
  return a;
}

geom::MotionSequence gen_agent_motion(const ScenarioConfig& config, const NdArray<float>& user_floor,
                                      const AudioFeatures& audio, double gaze_bias, RngStream& rng) {
  config.validate();
  const std::size_t n = config.frames;
  if (user_floor.rows() != n || user_floor.cols() != 2) throw LengthError("user trajectory length mismatch");
  if (audio.agent.rows() != n) throw LengthError("audio length mismatch");
  if (!(gaze_bias >= -1.0 && gaze_bias <= 1.0)) throw ValidationError("gaze bias outside [-1, 1]");
  const auto skel = geom::Skeleton::toy();
  const double fps = config.fps, dt = 1.0 / fps;

  const Vec2 p0(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3));
  const Wander drift_x(rng, 0.02, 0.08), drift_z(rng, 0.02, 0.08), bob(rng, 0.2, 0.5);
  const double drift_amp = rng.uniform(0.0, 0.15);
  const double offset = std::acos(gaze_bias) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
  const Wander yaw_wander(rng, 0.05, 0.3), nod(rng, 0.8, 1.5);
  std::array<Wander, 6> gesture = {Wander(rng, 1.2, 2.2), Wander(rng, 1.2, 2.2), Wander(rng, 1.2, 2.2),
                                   Wander(rng, 1.2, 2.2), Wander(rng, 1.2, 2.2), Wander(rng, 1.2, 2.2)};
  const double head_alpha = 1.0 - std::exp(-dt / 0.3);
  const double body_alpha = 1.0 - std::exp(-dt / 1.5);
  const double gesture_alpha = 1.0 - std::exp(-dt / 0.2);

  constexpr double kPelvisHeight = 0.95, kFootRest = 0.03, kFootLift = 0.10;
  const Vec3 head_offset(0.0, 0.62, 0.03);
  const std::array<Vec3, 2> wrist_rest = {Vec3(0.22, -0.02, 0.12), Vec3(-0.22, -0.02, 0.12)};
  const std::array<double, 2> foot_side = {0.12, -0.12};
  constexpr std::size_t kLiftFrames = 4, kSwingFrames = 7, kLowerFrames = 4;
  constexpr std::size_t kStepFrames = kLiftFrames + kSwingFrames + kLowerFrames;

  auto pelvis_floor = [&](double t) {
    return Vec2(p0.x() + drift_amp * drift_x(t), p0.y() + drift_amp * drift_z(t));
  };
  auto bearing_from = [&](const Vec2& from, std::size_t f) {
    return geom::heading_of(Vec2(user_floor(f, 0) - from.x(), user_floor(f, 1) - from.y()));
  };

  // Start in steady state: facing the user with the clip's offset.
  double body_yaw = 0, head_yaw = 0;
  {
    const Vec2 pf = pelvis_floor(0.0);
    head_yaw = body_yaw = bearing_from(pf, 0) + offset;
  }
  struct Foot {
    Vec2 planted;
    double yaw;
    Vec2 from, to;
    double yaw_from = 0, yaw_to = 0;
    std::size_t phase = 0;  // 0 when planted, else frames into the step
  };
  std::array<Foot, 2> feet;
  auto foot_target = [&](const Vec2& pf, double yaw, int side) {
    const Vec3 off = geom::yaw_rotation(yaw) * Vec3(foot_side[side], 0.0, 0.02);
    return Vec2(pf.x() + off.x(), pf.y() + off.z());
  };
  for (int s = 0; s < 2; ++s) {
    feet[s].planted = foot_target(pelvis_floor(0.0), body_yaw, s);
    feet[s].yaw = body_yaw;
  }
  double gesture_amp = 0.015;

  geom::MotionSequence seq;
  seq.skeleton = skel;
  seq.fps = fps;
  seq.frames.reserve(n);
  for (std::size_t f = 0; f < n; ++f) {
    const double t = static_cast<double>(f) * dt;
    const Vec2 pf = pelvis_floor(t);
    const double energy = std::max(0.0f, audio.agent(f, 0));

    // Head chases the offset bearing; the body follows the head slowly.
    const Mat3 body_rot_prev = geom::yaw_rotation(body_yaw);
    const Vec3 head_pos_est = Vec3(pf.x(), kPelvisHeight, pf.y()) + body_rot_prev * head_offset;
    const double target = wrap_near(bearing_from(Vec2(head_pos_est.x(), head_pos_est.z()), f) + offset +
                                        0.1 * yaw_wander(t),
                                    head_yaw);
    if (f > 0) head_yaw += head_alpha * (target - head_yaw);
    if (f > 0) body_yaw += body_alpha * (head_yaw - body_yaw);
    const Mat3 body_rot = geom::yaw_rotation(body_yaw);

    std::vector<geom::RigidTransform> tf(skel->joint_count());
    const Vec3 pelvis(pf.x(), kPelvisHeight + 0.01 * bob(t), pf.y());
    tf[skel->pelvis] = {body_rot, pelvis};
    const double pitch = 0.05 * nod(t) * (0.3 + energy);
    tf[skel->head] = {geom::yaw_rotation(head_yaw) * pitch_rotation(pitch), pelvis + body_rot * head_offset};

    gesture_amp += gesture_alpha * ((0.015 + 0.10 * energy) - gesture_amp);
    for (int s = 0; s < 2; ++s) {
      const Vec3 g(gesture[3 * s](t), 0.6 * gesture[3 * s + 1](t), 0.5 * gesture[3 * s + 2](t));
      const Vec3 local = wrist_rest[s] + gesture_amp * g;
      const Mat3 roll = geom::axis_angle(Vec3::UnitZ(), 2.0 * gesture_amp * g.x());
      tf[s == 0 ? skel->wrist_left : skel->wrist_right] = {body_rot * roll, pelvis + body_rot * local};
    }

    // Step automaton: one foot at a time, horizontal motion only mid-swing.
    if (feet[0].phase == 0 && feet[1].phase == 0) {
      int worst = -1;
      double worst_err = 0;
      for (int s = 0; s < 2; ++s) {
        const Vec2 goal = foot_target(pf, body_yaw, s);
        const double err = (goal - feet[s].planted).norm() / 0.10 +
                           std::abs(wrap_near(body_yaw, feet[s].yaw) - feet[s].yaw) / 0.35;
        if (err > 1.0 && err > worst_err) {
          worst = s;
          worst_err = err;
        }
      }
      if (worst >= 0) {
        Foot& ft = feet[worst];
        ft.from = ft.planted;
        ft.yaw_from = ft.yaw;
        // Aim slightly past the target so the foot settles less often.
        const Vec2 goal = foot_target(pelvis_floor(t + 0.3), body_yaw, worst);
        ft.to = goal;
        ft.yaw_to = wrap_near(body_yaw, ft.yaw);
        ft.phase = 1;
      }
    }
    for (int s = 0; s < 2; ++s) {
      Foot& ft = feet[s];
      double height = kFootRest;
      if (ft.phase > 0) {
        const std::size_t k = ft.phase;
        if (k <= kLiftFrames) {
          height = kFootRest + (kFootLift - kFootRest) * smoothstep(static_cast<double>(k) / kLiftFrames);
        } else if (k <= kLiftFrames + kSwingFrames) {
          const double u = static_cast<double>(k - kLiftFrames) / kSwingFrames;
          height = kFootLift;
          ft.planted = ft.from + smoothstep(u) * (ft.to - ft.from);
          ft.yaw = ft.yaw_from + smoothstep(u) * (ft.yaw_to - ft.yaw_from);
        } else {
          const double u = static_cast<double>(k - kLiftFrames - kSwingFrames) / kLowerFrames;
          height = kFootLift - (kFootLift - kFootRest) * smoothstep(u);
        }
        ft.phase = k >= kStepFrames ? 0 : k + 1;
      }
      tf[s == 0 ? skel->foot_left : skel->foot_right] = {geom::yaw_rotation(ft.yaw),
                                                         Vec3(ft.planted.x(), height, ft.planted.y())};
    }
    seq.frames.push_back(geom::pose_from_rigid(tf, skel));
  }
  return seq;
}

double draw_gaze_bias(const ScenarioConfig& config, RngStream& rng) {
  // Half the clips face the user closely; the rest cover the whole range.
  const double lo = config.gaze_bias_min, hi = config.gaze_bias_max;
  if (rng.bernoulli(0.5)) return rng.uniform(std::max(lo, std::min(hi, 0.6)), hi);
  return rng.uniform(lo, hi);
}

geom::MotionSequence DyadicClip::motion() const {
  geom::MotionSequence seq;
  seq.skeleton = skeleton;
  seq.fps = fps;
  seq.frames.reserve(frames());
  for (std::size_t t = 0; t < frames(); ++t) seq.frames.push_back(pose(t));
  return seq;
}

geom::Pose DyadicClip::pose(std::size_t t) const {
  return geom::unflatten(std::span<const float>(agent.row(t), agent.cols()), skeleton);
}

std::vector<double> DyadicClip::gaze_series() const {
  std::vector<double> g(frames());
  for (std::size_t t = 0; t < frames(); ++t)
    g[t] = geom::gaze_score(pose(t), Vec2(user_floor(t, 0), user_floor(t, 1)));
  return g;
}

void DyadicClip::validate() const {
  const std::size_t n = frames();
  if (n == 0) throw ValidationError("empty clip");
  if (agent.cols() != skeleton->flat_dim()) throw ShapeError("agent frame width does not match the skeleton");
  if (user_floor.rows() != n || user_floor.cols() != 2) throw LengthError("user trajectory length mismatch");
  if (audio_agent.rows() != n || audio_user.rows() != n) throw LengthError("audio length mismatch");
  if (audio_agent.cols() != audio_user.cols()) throw ShapeError("audio width mismatch");
  if (speaking_mask_agent.size() != n) throw LengthError("speaking mask length mismatch");
  if (!agent.all_finite() || !user_floor.all_finite() || !audio_agent.all_finite() || !audio_user.all_finite())
    throw ValidationError("clip contains non-finite values");
}

DyadicClip clip_from_motion(const std::string& id, const geom::MotionSequence& agent, const NdArray<float>& user_floor,
                            const AudioFeatures& audio, double gaze_bias) {
  const auto norm = geom::normalize_sequence(agent);
  DyadicClip clip;
  clip.id = id;
  clip.skeleton = agent.skeleton;
  clip.fps = agent.fps;
  const std::size_t n = agent.length();
  clip.agent = NdArray<float>(n, agent.skeleton->flat_dim());
  clip.user_floor = NdArray<float>(n, 2);
  for (std::size_t t = 0; t < n; ++t) {
    geom::flatten_into(norm.sequence.frames[t], std::span<float>(clip.agent.row(t), clip.agent.cols()));
    const Vec2 u = geom::transform_floor_point(norm.transform, Vec2(user_floor(t, 0), user_floor(t, 1)));
    clip.user_floor(t, 0) = static_cast<float>(u.x());
    clip.user_floor(t, 1) = static_cast<float>(u.y());
  }
  clip.audio_agent = audio.agent;
  clip.audio_user = audio.user;
  clip.speaking_mask_agent = audio.agent_mask;
  clip.gaze_bias = static_cast<float>(gaze_bias);
  clip.validate();
  return clip;
}

DyadicClip make_clip(const ScenarioConfig& config, std::size_t index) {
  RngStream rng(mix_seed(config.seed, index));
  RngStream traj_rng = rng.fork("trajectory"), audio_rng = rng.fork("audio"), motion_rng = rng.fork("motion");
  RngStream gaze_rng = rng.fork("gaze");
  const auto user = gen_user_trajectory(config, traj_rng);
  const auto audio = gen_audio_features(config, audio_rng);
  const double g = draw_gaze_bias(config, gaze_rng);
  const auto motion = gen_agent_motion(config, user, audio, g, motion_rng);
  char id[32];
  std::snprintf(id, sizeof id, "clip_%05zu", index);
  return clip_from_motion(id, motion, user, audio, g);
}

}  // namespace dyad::synth
