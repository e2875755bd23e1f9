#include <algorithm>
#include <cmath>
#include <numbers>

#include "doctest.h"

#include "dyad/metrics.hpp"
#include "oracles.hpp"

using namespace dyad;
using namespace dyad::metrics;
using dyad::geom::Mat3;
using dyad::geom::RigidTransform;
using dyad::geom::Vec2;
using dyad::geom::Vec3;
using dyad::testing::frechet_oracle;
using dyad::testing::random_stats;

namespace {

/// Clip whose every joint sits at `rigid(t, joint)`.
template <typename F>
synth::DyadicClip make_clip(std::size_t frames, F rigid) {
  synth::DyadicClip c;
  c.id = "test";
  const auto sk = geom::Skeleton::toy();
  c.agent = NdArray<float>(frames, sk->flat_dim());
  c.user_floor = NdArray<float>(frames, 2);
  c.audio_agent = NdArray<float>(frames, 2);
  c.audio_user = NdArray<float>(frames, 2);
  c.speaking_mask_agent.assign(frames, 0);
  for (std::size_t t = 0; t < frames; ++t) {
    std::vector<RigidTransform> tf(sk->joint_count());
    for (std::size_t j = 0; j < tf.size(); ++j) tf[j] = rigid(t, j);
    geom::flatten_into(geom::pose_from_rigid(tf, sk), std::span<float>(c.agent.row(t), c.agent.cols()));
  }
  return c;
}

RigidTransform at(double x, double y, double z, double yaw = 0) { return {geom::yaw_rotation(yaw), Vec3(x, y, z)}; }

std::vector<const synth::DyadicClip*> ptrs(const std::vector<synth::DyadicClip>& v) {
  std::vector<const synth::DyadicClip*> out;
  for (const auto& c : v) out.push_back(&c);
  return out;
}

synth::DyadicClip crop(const synth::DyadicClip& c, std::size_t start, std::size_t len) {
  synth::DyadicClip out = c;
  out.agent = c.agent.slice_rows(start, len);
  out.user_floor = c.user_floor.slice_rows(start, len);
  out.audio_agent = c.audio_agent.slice_rows(start, len);
  out.audio_user = c.audio_user.slice_rows(start, len);
  out.speaking_mask_agent.assign(c.speaking_mask_agent.begin() + start, c.speaking_mask_agent.begin() + start + len);
  return out;
}

}  // namespace

TEST_CASE("speaking classification") {
  CHECK_FALSE(classify_speaking(NdArray<float>(10, 4)));
  synth::ScenarioConfig cfg;
  std::size_t agree = 0, speaking = 0;
  const std::size_t n = 500;
  for (std::size_t i = 0; i < n; ++i) {
    RngStream rng(mix_seed(77, i));
    const auto a = synth::gen_audio_features(cfg, rng);
    std::size_t on = 0;
    for (auto m : a.agent_mask) on += m;
    const bool truth = 2 * on > a.agent_mask.size();
    const bool s = classify_speaking(a.agent);
    agree += truth == s;
    speaking += s;
    for (double th : {0.1, 0.2, 0.3, 0.4, 0.5, 0.6})
      if (!classify_speaking(a.agent, th)) CHECK_FALSE(classify_speaking(a.agent, th + 0.05));
  }
  CHECK(static_cast<double>(agree) / n >= 0.95);
  CHECK(speaking > n / 5);
  CHECK(speaking < 4 * n / 5);
}

TEST_CASE("gaussian frechet distance") {
  RngStream rng(1);
  const auto a = random_stats(3, rng), b = random_stats(3, rng);
  CHECK(std::abs(gaussian_frechet(a, a)) <= 1e-9);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_stats(3, rng), y = random_stats(3, rng);
    const double d = gaussian_frechet(x, y);
    CHECK(d >= 0.0);
    CHECK(std::abs(d - frechet_oracle(x, y)) <= 1e-6);
    CHECK(std::abs(d - gaussian_frechet(y, x)) <= 1e-9);
  }
  const auto big_a = random_stats(40, rng), big_b = random_stats(40, rng);
  CHECK(std::abs(gaussian_frechet(big_a, big_b) - frechet_oracle(big_a, big_b)) <= 1e-6 * gaussian_frechet(big_a, big_b));

  GaussianStats p, q;
  p.mean = Eigen::Vector3d(0, 0, 0);
  q.mean = Eigen::Vector3d(3, 4, 0);
  p.covariance = q.covariance = Eigen::Matrix3d::Zero();
  CHECK(gaussian_frechet(p, q) == doctest::Approx(25.0).epsilon(1e-12));

  GaussianStats r = random_stats(4, rng);
  CHECK_THROWS_AS(gaussian_frechet(a, r), ShapeError);
  GaussianStats bad = a;
  bad.covariance(0, 0) = -5.0;
  CHECK_THROWS_AS(gaussian_frechet(bad, a), NumericError);
}

TEST_CASE("moment accumulator") {
  RngStream rng(2);
  MomentAccumulator acc(3);
  std::vector<Eigen::Vector3d> xs;
  for (int i = 0; i < 50; ++i) {
    Eigen::Vector3d x(rng.normal() + 2, rng.normal(), 0.5 * rng.normal());
    xs.push_back(x);
    acc.add(std::span<const double>(x.data(), 3));
  }
  const auto g = acc.finish();
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const auto& x : xs) mean += x / 50.0;
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& x : xs) cov += (x - mean) * (x - mean).transpose() / 49.0;
  const double lambda = kShrinkage * cov.trace() / 3.0;
  CHECK((g.mean - mean).norm() <= 1e-12);
  CHECK((g.covariance - cov - lambda * Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK_FALSE(g.ill_conditioned);
  MomentAccumulator few(3);
  for (int i = 0; i < 2; ++i) few.add(std::span<const double>(xs[i].data(), 3));
  CHECK(few.finish().ill_conditioned);
  CHECK_THROWS_AS(MomentAccumulator(3).finish(), ValidationError);
}

TEST_CASE("fgd on clip sets") {
  synth::ScenarioConfig cfg;
  std::vector<synth::DyadicClip> ref, other;
  for (std::size_t i = 0; i < 8; ++i) ref.push_back(synth::make_clip(cfg, i));
  for (std::size_t i = 8; i < 16; ++i) other.push_back(synth::make_clip(cfg, i));
  const auto rp = ptrs(ref);
  CHECK(fgd(rp, rp) <= 1e-9);
  CHECK(fgd_acc(rp, rp) <= 1e-9);

  auto shifted = ref;
  for (auto& c : shifted)
    for (std::size_t t = 0; t < c.frames(); ++t)
      for (std::size_t k = 0; k < c.agent.cols(); k += 3) c.agent(t, k) += 1.0f;
  const double d = fgd(ptrs(shifted), rp);
  CHECK(d >= 6 * 12 * 1.0 - 1e-3);
  CHECK(d <= 6 * 12 * 1.0 + 1e-2);

  auto reversed = rp;
  std::reverse(reversed.begin(), reversed.end());
  CHECK(std::abs(fgd(reversed, ptrs(other)) - fgd(rp, ptrs(other))) <= 1e-9 * fgd(rp, ptrs(other)));

  // Small-sample bias: per-batch distances exceed the pooled distance.
  std::vector<synth::DyadicClip> a, b;
  for (std::size_t i = 0; i < 16; ++i) {
    a.push_back(crop(synth::make_clip(cfg, 100 + i), 0, 120));
    b.push_back(crop(synth::make_clip(cfg, 200 + i), 0, 120));
  }
  const double pooled = fgd(ptrs(a), ptrs(b));
  double batch = 0;
  for (std::size_t k = 0; k < 4; ++k) {
    const auto pa = ptrs(a), pb = ptrs(b);
    batch += fgd(std::span(pa).subspan(4 * k, 4), std::span(pb).subspan(4 * k, 4)) / 4;
  }
  CHECK(batch >= pooled);
}

TEST_CASE("fgd_acc") {
  auto moving = make_clip(20, [](std::size_t t, std::size_t j) {
    return at(0.01 * t, 0.2 * j + 0.1, 0.02 * t);
  });
  const std::vector<const synth::DyadicClip*> one = {&moving};
  CHECK(fgd_acc(one, one) <= 1e-12);
  const auto stats = acceleration_stats(one);
  CHECK(stats.mean.cwiseAbs().maxCoeff() <= 1e-3);
  auto short_clip = crop(moving, 0, 2);
  const std::vector<const synth::DyadicClip*> s = {&short_clip};
  CHECK_THROWS_AS(fgd_acc(s, s), LengthError);

  // A damped copy under-articulates speech, so the speaking pool drifts further.
  synth::ScenarioConfig cfg;
  std::vector<synth::DyadicClip> ref, damped;
  for (std::size_t i = 0; ref.size() < 24 && i < 200; ++i) {
    auto c = synth::make_clip(cfg, i);
    ref.push_back(c);
    auto d = c;
    for (std::size_t t = 2; t + 2 < c.frames(); ++t)
      for (std::size_t k = 0; k < c.agent.cols(); ++k) {
        float s5 = 0;
        for (int o = -2; o <= 2; ++o) s5 += c.agent(t + o, k);
        d.agent(t, k) = s5 / 5;
      }
    damped.push_back(d);
  }
  std::vector<const synth::DyadicClip*> rs, rn, ds, dn;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const bool sp = classify_speaking(ref[i].audio_agent);
    (sp ? rs : rn).push_back(&ref[i]);
    (sp ? ds : dn).push_back(&damped[i]);
  }
  REQUIRE(rs.size() >= 3);
  REQUIRE(rn.size() >= 3);
  CHECK(fgd_acc(ds, rs) > fgd_acc(dn, rn));
}

TEST_CASE("foot slide") {
  const auto sk = geom::Skeleton::toy();
  auto planted = make_clip(30, [](std::size_t, std::size_t j) { return at(0.1 * j, 0.03, 0); });
  CHECK(foot_slide(planted.agent, *sk, 30.0) == 0.0);

  // Left foot glides at 5 cm/s on 2 cm height for frames 10..19.
  auto glide = make_clip(30, [&](std::size_t t, std::size_t j) {
    if (j != sk->foot_left) return at(0.1 * j, 0.03, 0);
    const double x = 0.05 / 30.0 * static_cast<double>(std::clamp<std::size_t>(t, 10, 20) - 10);
    return at(x, 0.02, 0);
  });
  CHECK(foot_slide(glide.agent, *sk, 30.0) == doctest::Approx(10.0 / (29 * 2)).epsilon(1e-12));

  auto lifted = make_clip(30, [&](std::size_t t, std::size_t j) {
    if (j != sk->foot_left) return at(0.1 * j, 0.03, 0);
    return at(0.5 * t, 0.10, 0);
  });
  CHECK(foot_slide(lifted.agent, *sk, 30.0) == 0.0);

  const auto real = synth::make_clip(synth::ScenarioConfig{}, 3);
  CHECK(foot_slide(real.agent, *sk, 30.0) <= 0.02);
  CHECK(foot_slide(real.motion()) == foot_slide(real.agent, *sk, 30.0));
}

TEST_CASE("wrist speed") {
  const auto sk = geom::Skeleton::toy();
  auto still = make_clip(10, [](std::size_t, std::size_t j) { return at(0.1 * j, 1, 0); });
  CHECK(wrist_speed(still.agent, *sk, 30.0) == 0.0);

  auto triangle = [&](double amp) {
    // 1.5 Hz triangle wave sampled at 30 fps: turning points land on frames.
    return make_clip(61, [&, amp](std::size_t t, std::size_t j) {
      const double u = std::fmod(static_cast<double>(t) / 20.0, 1.0);
      const double tri = u < 0.25 ? 4 * u : (u < 0.75 ? 2 - 4 * u : 4 * u - 4);
      if (j == sk->wrist_left || j == sk->wrist_right) return at(amp * tri, 1.0, 0.1 * j);
      return at(0.1 * j, 1, 0);
    });
  };
  const double amp = 0.1, f = 1.5;
  const double s1 = wrist_speed(triangle(amp).agent, *sk, 30.0);
  CHECK(s1 == doctest::Approx(4 * amp * f).epsilon(1e-5));
  CHECK(wrist_speed(triangle(2 * amp).agent, *sk, 30.0) == doctest::Approx(2 * s1).epsilon(1e-5));
}

TEST_CASE("head angle and rigid invariance") {
  const auto sk = geom::Skeleton::toy();
  auto clip = make_clip(5, [](std::size_t, std::size_t j) { return at(0.1 * j, 1.0, 0); });
  NdArray<float> front(5, 2), back(5, 2);
  for (std::size_t t = 0; t < 5; ++t) {
    front(t, 0) = 0.1f;
    front(t, 1) = 2.0f;
    back(t, 0) = 0.1f;
    back(t, 1) = -2.0f;
  }
  CHECK(head_angle(clip.agent, *sk, front) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(head_angle(clip.agent, *sk, back) == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK_THROWS_AS(head_angle(clip.agent, *sk, front.slice_rows(0, 3)), LengthError);

  synth::ScenarioConfig cfg;
  RngStream rng(5);
  const auto user = synth::gen_user_trajectory(cfg, rng, synth::TrajectoryPattern::kStand);
  const auto audio = synth::gen_audio_features(cfg, rng);
  const auto g = synth::clip_from_motion("g", synth::gen_agent_motion(cfg, user, audio, 0.8, rng), user, audio, 0.8);
  CHECK(std::abs(head_angle(g.agent, *sk, g.user_floor) - 0.8) <= 0.1);

  const auto real = synth::make_clip(cfg, 11);
  RigidTransform tf{geom::yaw_rotation(1.1), Vec3(2.0, 0.0, -1.5)};
  const auto moved = geom::transform_sequence(real.motion(), tf);
  NdArray<float> moved_user(real.frames(), 2);
  for (std::size_t t = 0; t < real.frames(); ++t) {
    const Vec2 u = geom::transform_floor_point(tf, Vec2(real.user_floor(t, 0), real.user_floor(t, 1)));
    moved_user(t, 0) = static_cast<float>(u.x());
    moved_user(t, 1) = static_cast<float>(u.y());
  }
  CHECK(head_angle(moved, moved_user) == doctest::Approx(head_angle(real.agent, *sk, real.user_floor)).epsilon(1e-5));
  CHECK(foot_slide(moved) == doctest::Approx(foot_slide(real.agent, *sk, 30.0)));
}

TEST_CASE("evaluate report") {
  synth::ScenarioConfig cfg;
  std::vector<synth::DyadicClip> ref;
  for (std::size_t i = 0; i < 12; ++i) ref.push_back(crop(synth::make_clip(cfg, 300 + i), 0, 200));
  EvalOptions opt;
  opt.batch_clips = 4;
  const auto r = evaluate(ref, ref, opt);
  CHECK(r.speaking_clips + r.non_speaking_clips == 12);
  CHECK(r.batches == 3);
  CHECK(*r.fgd.avg <= 1e-8);
  CHECK(*r.fgd_acc.avg <= 1e-8);
  double slide = 0, head = 0;
  for (const auto& c : ref) {
    slide += foot_slide(c.agent, *c.skeleton, c.fps) / 12;
    head += head_angle(c.agent, *c.skeleton, c.user_floor) / 12;
  }
  CHECK(*r.foot_slide.avg == doctest::Approx(slide));
  CHECK(*r.head_ang.avg == doctest::Approx(head));
  CHECK(*r.foot_slide.avg >= 0.0);
  CHECK(*r.foot_slide.avg <= 1.0);

  const auto j = r.to_json();
  CHECK(j["schema_version"] == kReportSchemaVersion);
  CHECK(j["metrics"].contains("wrist_var"));
  CHECK(evaluate(ref, ref, opt).to_json().dump() == j.dump());

  // An all-silent set has no speaking category: explicit nulls.
  auto silent = ref;
  for (auto& c : silent) c.audio_agent.fill(0.0f);
  const auto rs = evaluate(silent, silent, opt);
  CHECK(rs.speaking_clips == 0);
  CHECK_FALSE(rs.fgd.speaking.has_value());
  CHECK(rs.to_json()["metrics"]["wrist_var"]["speaking"].is_null());
  CHECK(rs.fgd.non_speaking.has_value());

  CHECK_THROWS_AS(evaluate(ref, std::vector<synth::DyadicClip>(ref.begin(), ref.begin() + 3)), LengthError);
}
