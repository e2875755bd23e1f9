#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"

#include "dyad/binio.hpp"
#include "dyad/dataset.hpp"
#include "dyad/synth.hpp"

using namespace dyad;
using namespace dyad::synth;
using dyad::geom::Vec2;

namespace {

std::filesystem::path scratch(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("dyad_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

double wrist_speed(const DyadicClip& clip, std::size_t t) {
  const auto& sk = *clip.skeleton;
  const auto a = clip.pose(t), b = clip.pose(t + 1);
  double s = 0;
  for (std::size_t j : {sk.wrist_left, sk.wrist_right})
    s += (geom::joint_position(b.joint(j)) - geom::joint_position(a.joint(j))).norm() * clip.fps;
  return s / 2;
}

}  // namespace

TEST_CASE("user trajectory repertoire") {
  ScenarioConfig cfg;
  RngStream rng(1);
  const auto stand = gen_user_trajectory(cfg, rng, TrajectoryPattern::kStand);
  for (std::size_t t = 1; t < stand.rows(); ++t) {
    CHECK(stand(t, 0) == stand(0, 0));
    CHECK(stand(t, 1) == stand(0, 1));
  }
  double worst_step = 0, worst_extent = 0, worst_accel = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    RngStream r(seed);
    const auto u = gen_user_trajectory(cfg, r);
    for (std::size_t t = 0; t < u.rows(); ++t) {
      worst_extent = std::max({worst_extent, std::abs(double(u(t, 0))), std::abs(double(u(t, 1)))});
      if (t + 1 < u.rows())
        worst_step = std::max(worst_step, (double)std::hypot(u(t + 1, 0) - u(t, 0), u(t + 1, 1) - u(t, 1)));
      if (t + 2 < u.rows())
        worst_accel = std::max(worst_accel, (double)std::hypot(u(t + 2, 0) - 2 * u(t + 1, 0) + u(t, 0),
                                                       u(t + 2, 1) - 2 * u(t + 1, 1) + u(t, 1)));
    }
  }
  CHECK(worst_step <= 1.5 / 30.0);
  CHECK(worst_extent <= cfg.room_half_extent);
  // C1: velocity changes by a small amount per frame.
  CHECK(worst_accel <= 0.01);
}

TEST_CASE("audio features") {
  ScenarioConfig cfg;
  std::size_t overlap = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    RngStream rng(seed);
    const auto a = gen_audio_features(cfg, rng);
    REQUIRE(a.agent.rows() == cfg.frames);
    REQUIRE(a.agent.cols() == cfg.audio_dim);
    std::size_t silent_run = 0;
    for (std::size_t t = 0; t < cfg.frames; ++t) {
      CHECK(a.agent(t, 0) >= 0.0f);
      CHECK(a.user(t, 0) >= 0.0f);
      CHECK(a.agent_mask[t] == (a.agent(t, 0) > kFrameSpeakingThreshold));
      overlap += a.agent_mask[t] && a.user_mask[t];
      ++total;
      silent_run = a.agent_turn[t] ? 0 : silent_run + 1;
      if (silent_run >= 10) CHECK(a.agent(t, 0) < kFrameSpeakingThreshold);
    }
    if (seed == 0) {
      bool any_agent = false, any_user = false;
      for (std::size_t t = 0; t < cfg.frames; ++t) {
        any_agent = any_agent || a.agent_turn[t];
        any_user = any_user || a.user_turn[t];
      }
      CHECK((any_agent || any_user));
    }
  }
  CHECK(static_cast<double>(overlap) / total <= cfg.overlap_probability + 0.05);
}

TEST_CASE("agent motion follows its construction") {
  ScenarioConfig cfg;
  const auto skel = geom::Skeleton::toy();

  SUBCASE("gaze bias fidelity for stationary users") {
    for (double g : {1.0, 0.8, 0.4, 0.0, -0.3}) {
      for (std::uint64_t seed = 0; seed < 10; ++seed) {
        RngStream rng(seed * 31 + 7);
        const auto user = gen_user_trajectory(cfg, rng, TrajectoryPattern::kStand);
        const auto audio = gen_audio_features(cfg, rng);
        const auto clip = clip_from_motion("c", gen_agent_motion(cfg, user, audio, g, rng), user, audio, g);
        const auto series = clip.gaze_series();
        double mean = 0;
        for (double v : series) mean += v / series.size();
        CAPTURE(g);
        CHECK(std::abs(mean - g) <= 0.1);
        if (g == 1.0) CHECK(mean >= 0.95);
      }
    }
  }

  SUBCASE("feet are planted unless lifted, and wrists move more during speech") {
    double speak = 0, quiet = 0;
    std::size_t n_speak = 0, n_quiet = 0, slide = 0, low = 0, steps = 0;
    for (std::size_t i = 0; i < 100; ++i) {
      const auto clip = make_clip(cfg, i);
      for (std::size_t t = 0; t + 1 < clip.frames(); ++t) {
        const auto a = clip.pose(t), b = clip.pose(t + 1);
        for (std::size_t j : {skel->foot_left, skel->foot_right}) {
          const auto pa = geom::joint_position(a.joint(j)), pb = geom::joint_position(b.joint(j));
          CHECK(pa.y() >= 0.0);
          const double v = std::hypot(pb.x() - pa.x(), pb.z() - pa.z()) * clip.fps;
          if (pa.y() < 0.05) {
            ++low;
            slide += v > 0.03;
          } else if (v > 0.03) {
            ++steps;
          }
        }
        const double w = wrist_speed(clip, t);
        if (clip.speaking_mask_agent[t]) {
          speak += w;
          ++n_speak;
        } else {
          quiet += w;
          ++n_quiet;
        }
      }
    }
    CHECK(static_cast<double>(slide) / low <= 0.01);
    CHECK(steps > 0);
    REQUIRE(n_speak > 0);
    REQUIRE(n_quiet > 0);
    CHECK((speak / n_speak) >= 1.3 * (quiet / n_quiet));
  }

  SUBCASE("length mismatch") {
    RngStream rng(3);
    const auto user = gen_user_trajectory(cfg, rng);
    auto audio = gen_audio_features(cfg, rng);
    audio.agent = audio.agent.slice_rows(0, 10);
    CHECK_THROWS_AS(gen_agent_motion(cfg, user, audio, 0.5, rng), LengthError);
  }
}

TEST_CASE("clips are normalized and deterministic") {
  ScenarioConfig cfg;
  const auto a = make_clip(cfg, 4), b = make_clip(cfg, 4), c = make_clip(cfg, 5);
  CHECK(a.agent == b.agent);
  CHECK(a.user_floor == b.user_floor);
  CHECK_FALSE(a.agent == c.agent);
  const auto first = a.pose(0);
  const auto pelvis = geom::joint_position(first.joint(a.skeleton->pelvis));
  CHECK(std::abs(pelvis.x()) <= 1e-5);
  CHECK(std::abs(pelvis.z()) <= 1e-5);
  const auto f = geom::facing_direction(first);
  CHECK(std::abs(f.x()) <= 1e-5);
  CHECK(f.z() > 0.0);
  for (std::size_t t = 0; t < a.frames(); ++t) {
    CHECK(std::abs(a.user_floor(t, 0)) <= cfg.room_half_extent);
    CHECK(std::abs(a.user_floor(t, 1)) <= cfg.room_half_extent);
  }
  ScenarioConfig bad = cfg;
  bad.frames = 402;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("clip file round trip and errors") {
  const auto dir = scratch("clip_io");
  const auto clip = make_clip(ScenarioConfig{}, 2);
  const auto path = dir / "a.dycl";
  data::write_clip(path, clip);
  const auto back = data::read_clip(path);
  CHECK(back.agent == clip.agent);
  CHECK(back.user_floor == clip.user_floor);
  CHECK(back.audio_agent == clip.audio_agent);
  CHECK(back.audio_user == clip.audio_user);
  CHECK(back.speaking_mask_agent == clip.speaking_mask_agent);
  CHECK(back.gaze_bias == clip.gaze_bias);
  CHECK(back.fps == clip.fps);

  auto bytes = binio::read_file(path);
  auto rewrite = [&](const std::vector<char>& b, const std::string& name) {
    const auto p = dir / name;
    binio::write_file_atomic(p, b);
    return p;
  };
  CHECK_THROWS_AS(data::read_clip(rewrite(std::vector<char>(bytes.begin(), bytes.end() - 7), "trunc.dycl")),
                  TruncationError);
  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(data::read_clip(rewrite(magic, "magic.dycl")), FormatError);
  auto version = bytes;
  version[4] = 9;
  CHECK_THROWS_AS(data::read_clip(rewrite(version, "version.dycl")), VersionError);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(data::read_clip(rewrite(trailing, "trailing.dycl")), LengthError);
  CHECK_THROWS_AS(data::read_clip(path, geom::Skeleton::from_names({"pelvis", "head", "wrist_left", "wrist_right", "foot_left", "foot_right", "neck"})), LengthError);
  CHECK_THROWS_AS(data::read_clip(dir / "missing.dycl"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("split assignment") {
  std::vector<std::string> ids;
  for (int i = 0; i < 100; ++i) ids.push_back("clip_" + std::to_string(i));
  const auto s = data::assign_splits(ids, 3);
  std::array<int, 3> count{};
  for (auto x : s) ++count[static_cast<int>(x)];
  CHECK(count == std::array<int, 3>{80, 10, 10});
  CHECK(data::assign_splits(ids, 3) == s);
  CHECK_FALSE(data::assign_splits(ids, 4) == s);
  std::vector<std::string> odd(ids.begin(), ids.begin() + 37);
  const auto t = data::assign_splits(odd, 3);
  std::array<int, 3> c2{};
  for (auto x : t) ++c2[static_cast<int>(x)];
  CHECK(c2 == std::array<int, 3>{30, 4, 3});
}

TEST_CASE("dataset build is deterministic and self-consistent") {
  ScenarioConfig cfg;
  cfg.frames = 40;
  cfg.seed = 9;
  const auto d1 = scratch("ds1"), d2 = scratch("ds2");
  const auto m1 = data::build_dataset(cfg, 20, d1, 3);
  data::build_dataset(cfg, 20, d2, 1);
  CHECK(binio::read_file(d1 / "manifest.json") == binio::read_file(d2 / "manifest.json"));
  for (const auto& c : m1.clips) {
    REQUIRE(std::filesystem::exists(d1 / c.file));
    CHECK(binio::read_file(d1 / c.file) == binio::read_file(d2 / c.file));
  }
  const auto loaded = data::load_manifest(d1);
  CHECK(loaded.clips.size() == 20);
  CHECK(loaded.entries(data::Split::kTrain).size() == 16);
  CHECK(loaded.entries(data::Split::kVal).size() == 2);
  CHECK(loaded.entries(data::Split::kTest).size() == 2);
  const auto val = data::load_split(loaded, data::Split::kVal);
  REQUIRE(val.size() == 2);
  CHECK(val[0].frames() == 40);
  CHECK_THROWS_AS(data::build_dataset(cfg, 5, d1), ValidationError);
  {
    std::ofstream(d2 / "manifest.json") << "{not json";
  }
  CHECK_THROWS_AS(data::load_manifest(d2), FormatError);
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
}
