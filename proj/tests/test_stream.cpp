#include <cmath>
#include <filesystem>

#include "doctest.h"

#include "dyad/stream.hpp"
#include "fixtures.hpp"

using namespace dyad;
using namespace dyad::stream;
using dyad::geom::Vec2;
using dyad::testing::random_bundle;
using dyad::testing::tiny_bundle;

namespace {

void push(StreamState& s, const flow::ConditioningBundle& b, std::size_t f) {
  s.push_frame(Vec2(b.user_pos(f, 0), b.user_pos(f, 1)), std::span<const float>(b.audio_agent.row(f), 3),
               std::span<const float>(b.audio_user.row(f), 3));
}

}  // namespace

TEST_CASE("push_frame bookkeeping") {
  auto model = tiny_bundle();
  StreamOptions opt;
  opt.capacity = 16;
  StreamState s(model, opt);
  const auto b = random_bundle(40, 3);
  CHECK_THROWS_AS(s.causal_feature_window(), StreamError);
  CHECK_THROWS_AS(s.generate_chunk(), StreamError);
  for (std::size_t f = 0; f < 4; ++f) {
    CHECK_FALSE(s.chunk_ready());
    push(s, b, f);
  }
  CHECK(s.chunk_ready());

  auto w = s.causal_feature_window();
  CHECK(w.frames == 16);
  for (std::size_t i = 0; i < 16; ++i) CHECK(w.frame_valid[i] == (i >= 12));
  for (std::size_t i = 12; i < 16; ++i) CHECK(w.user_pos(i, 0) == b.user_pos(i - 12, 0));

  for (std::size_t f = 4; f < 40; ++f) push(s, b, f);
  w = s.causal_feature_window();
  for (std::size_t i = 0; i < 16; ++i) {
    CHECK(w.frame_valid[i] == 1);
    CHECK(w.audio_agent(i, 1) == b.audio_agent(24 + i, 1));
  }
  // The block for frames 0..3 was evicted before generation.
  CHECK_THROWS_AS(s.generate_chunk(), StreamError);

  const float bad[3] = {0.0f, NAN, 0.0f}, ok[3] = {0, 0, 0};
  CHECK_THROWS_AS(s.push_frame(Vec2(0, 0), bad, ok), ValidationError);
  CHECK_THROWS_AS(s.push_frame(Vec2(INFINITY, 0), ok, ok), ValidationError);
  CHECK_THROWS_AS(s.push_frame(Vec2(0, 0), std::span<const float>(ok, 2), ok), ValidationError);
  CHECK_THROWS_AS(s.push_frame(Vec2(0, 0), ok, ok, 1.5), ValidationError);
  CHECK(s.frames_pushed() == 40);
}

TEST_CASE("chunks: indices, first chunk, imputation, decode equivalence") {
  auto model = tiny_bundle();
  StreamOptions opt;
  opt.seed = 17;
  StreamState s(model, opt);
  const auto b = random_bundle(40, 4);
  std::vector<StreamChunk> chunks;
  for (std::size_t f = 0; f < 40; ++f) {
    push(s, b, f);
    if (s.chunk_ready()) {
      const auto before = s.frame_clock();
      chunks.push_back(s.generate_chunk());
      CHECK(s.frame_clock() == before + 4);
    }
  }
  REQUIRE(chunks.size() == 10);
  for (std::size_t n = 0; n < chunks.size(); ++n) {
    CHECK(chunks[n].first_frame == 4 * n);
    CHECK(chunks[n].frames.rows() == 4);
    CHECK(chunks[n].latency_ms >= 0.0);
    CHECK(chunks[n].history_drift <= 1e-6);
  }
  CHECK(chunks[0].history_drift == 0.0);
  CHECK(s.history_size() <= std::max<std::size_t>(1, model->decode_window() - 1));

  // First chunk: plain one-token sampling without imputation.
  RngStream rng(17);
  const auto res0 = flow::sample(flow::model_denoiser(*model->flow, b.slice(0, 4), 0), 1, 6, 4, 1.3, rng);
  for (std::size_t c = 0; c < 6; ++c) CHECK(res0.latents(0, c) == chunks[0].latent[c]);

  // Second chunk: the history token is imputed with its frozen noise and
  // re-emerges unchanged.
  flow::Imputation imp;
  imp.positions = {0};
  imp.values = res0.latents;
  imp.noise = res0.noise;
  const auto res1 = flow::sample(flow::model_denoiser(*model->flow, b.slice(0, 8), 0), 2, 6, 4, 1.3, rng, &imp);
  for (std::size_t c = 0; c < 6; ++c) {
    CHECK(std::abs(res1.latents(0, c) - res0.latents(0, c)) <= 1e-6);
    CHECK(res1.latents(1, c) == chunks[1].latent[c]);
  }

  // Windowed decoding reproduces a decode of the whole latent sequence.
  NdArray<float> z(chunks.size(), 6);
  for (std::size_t n = 0; n < chunks.size(); ++n) std::copy(chunks[n].latent.begin(), chunks[n].latent.end(), z.row(n));
  const auto full = model->frames.inverse(vae::decode_latents(*model->vae, model->latents.inverse(z)));
  for (std::size_t n = 0; n < chunks.size(); ++n)
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < full.cols(); ++c) CHECK(std::abs(chunks[n].frames(r, c) - full(4 * n + r, c)) <= 1e-6);
  CHECK(chunks[0].poses(model->skeleton).size() == 4);
}

TEST_CASE("offline equivalence, determinism, causality") {
  auto model = tiny_bundle();
  StreamOptions opt;
  opt.seed = 5;
  const auto b = random_bundle(48, 6);
  const auto off = run_offline(model, b, opt);
  CHECK(off.rows() == 48);
  CHECK(run_offline(model, b, opt) == off);

  StreamState s(model, opt);
  NdArray<float> live(48, off.cols());
  for (std::size_t f = 0; f < 48; ++f) {
    push(s, b, f);
    if (s.chunk_ready()) {
      const auto c = s.generate_chunk();
      std::copy(c.frames.values().begin(), c.frames.values().end(), live.row(c.first_frame));
    }
  }
  CHECK(live == off);

  StreamOptions other = opt;
  other.seed = 6;
  CHECK_FALSE(run_offline(model, b, other) == off);

  // Identical inputs up to frame t: every frame at or before t - s matches.
  for (std::size_t t : {5u, 12u, 23u, 40u}) {
    auto b2 = b;
    for (std::size_t f = t + 1; f < 48; ++f) {
      b2.user_pos(f, 0) += 3.0f;
      b2.audio_agent(f, 0) -= 2.0f;
    }
    const auto o2 = run_offline(model, b2, opt);
    for (std::size_t f = 0; f + 4 <= t; ++f)
      for (std::size_t c = 0; c < off.cols(); ++c) CHECK(o2(f, c) == off(f, c));
    bool diverged = false;
    for (std::size_t f = t + 1; f < 48 && !diverged; ++f)
      for (std::size_t c = 0; c < off.cols(); ++c) diverged = diverged || o2(f, c) != off(f, c);
    CHECK(diverged);
  }
}

TEST_CASE("gaze target reaches the generator") {
  auto model = tiny_bundle();
  StreamOptions opt;
  opt.seed = 2;
  auto b = random_bundle(16, 7);
  const auto plain = run_offline(model, b, opt);
  b.set_gaze_target(0.8);
  const auto steered = run_offline(model, b, opt);
  CHECK_FALSE(plain == steered);
  b.set_gaze_target(0.8);
  CHECK(run_offline(model, b, opt) == steered);
}

TEST_CASE("batch generation and bench report") {
  auto model = tiny_bundle();
  StreamOptions opt;
  const auto b = random_bundle(400, 8);
  const auto batch = generate_batch(*model, b, opt);
  CHECK(batch.rows() == 400);
  CHECK(batch.all_finite());
  const auto r = bench(model, b, opt);
  CHECK(r.chunks == 99);
  CHECK(r.streaming_fps * r.latency_mean_ms / 1000.0 == doctest::Approx(4.0).epsilon(0.10));
  CHECK(r.batch_fps >= r.streaming_fps);
  CHECK(r.latency_p50_ms <= r.latency_p99_ms);
  CHECK(r.latency_p99_ms <= r.latency_max_ms);
  const auto j = r.to_json();
  for (const char* k : {"schema_version", "frames", "batch", "streaming", "settings"}) CHECK(j.contains(k));
  CHECK(j["streaming"]["latency_ms"].contains("p90"));
}

TEST_CASE("model bundle persistence") {
  auto model = tiny_bundle(9);
  const auto dir = std::filesystem::temp_directory_path() / "dyad_test_bundle";
  std::filesystem::remove_all(dir);
  model->save(dir);
  std::shared_ptr<const ModelBundle> back = ModelBundle::load(dir);
  StreamOptions opt;
  const auto b = random_bundle(16, 10);
  CHECK(run_offline(back, b, opt) == run_offline(model, b, opt));
  std::filesystem::remove(dir / "flow.ckpt");
  CHECK_THROWS_AS(ModelBundle::load(dir), DependencyError);
  CHECK(ModelBundle::load(dir, false)->flow == nullptr);
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(ModelBundle::load(dir), DependencyError);
  auto vae_only = tiny_bundle();
  vae_only->flow.reset();
  CHECK_THROWS_AS(StreamState(vae_only, opt), DependencyError);
}

TEST_CASE("standardizer") {
  NdArray<float> a(4, 2, std::vector<float>{1, 5, 2, 5, 3, 5, 4, 5});
  const auto s = Standardizer::fit({&a});
  CHECK(s.mean[0] == doctest::Approx(2.5));
  CHECK(s.scale[0] == doctest::Approx(std::sqrt(5.0 / 3.0)));
  CHECK(s.scale[1] == doctest::Approx(1e-3));
  const auto y = s.forward(a);
  const auto x = s.inverse(y);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(x[i] == doctest::Approx(a[i]).epsilon(1e-6));
  CHECK_THROWS_AS(s.forward(NdArray<float>(2, 3)), ShapeError);
}
