#include <cmath>

#include "doctest.h"

#include "dyad/diff/fd_check.hpp"
#include "dyad/flow.hpp"

using namespace dyad;
using namespace dyad::diff;
using namespace dyad::flow;

namespace {

GenConfig tiny_config() {
  GenConfig c;
  c.layers = 1;
  c.heads = 2;
  c.hidden = 8;
  c.latent_dim = 3;
  c.audio_dim = 3;
  c.time_freq_dim = 8;
  c.attention_window = 3;
  return c;
}

GenConfig small_config() {
  GenConfig c;
  c.layers = 2;
  c.heads = 2;
  c.hidden = 16;
  c.latent_dim = 5;
  c.audio_dim = 3;
  return c;
}

ConditioningBundle random_bundle(std::size_t frames, std::size_t da, RngStream& rng, bool gaze = true) {
  ConditioningBundle b;
  b.frames = frames;
  b.user_pos = NdArray<float>(frames, 2);
  b.audio_agent = NdArray<float>(frames, da);
  b.audio_user = NdArray<float>(frames, da);
  for (auto* s : {&b.user_pos, &b.audio_agent, &b.audio_user})
    for (auto& v : s->values()) v = static_cast<float>(rng.normal());
  if (gaze) {
    b.gaze = NdArray<float>(frames, 1);
    for (auto& v : b.gaze.values()) v = static_cast<float>(rng.uniform(-1, 1));
    b.present[3] = true;
  }
  return b;
}

template <typename T>
NdArray<T> randn(std::size_t r, std::size_t c, RngStream& rng) {
  NdArray<T> a(r, c);
  for (auto& v : a.values()) v = static_cast<T>(rng.normal());
  return a;
}

}  // namespace

TEST_CASE("modality names") {
  CHECK(modality_from_name("audio_user") == Modality::kAudioUser);
  CHECK_THROWS_AS(modality_from_name("latent_x"), ValidationError);
}

TEST_CASE("condition tokens fold stride blocks into channels") {
  GenConfig cfg = small_config();
  CHECK(cfg.stride * cfg.modality_width(Modality::kAudioAgent) == 12);
  CHECK(cfg.stride * cfg.modality_width(Modality::kGaze) == 4);
  CHECK(cfg.condition_width() == 4 * (2 + 3 + 3 + 1));
  FlowGenerator<float> model(cfg, 1);
  RngStream rng(1);
  const auto b = random_bundle(8, 3, rng);
  Tape<float> t(false);
  const auto& tok = t.value(model.condition_tokens(t, b));
  CHECK(tok.rows() == 2);
  CHECK(tok.cols() == 36);
  // Token 1, user_pos block: frame 5 x at channel 0 plus its learned offset.
  const auto& enc = model.params().find("flow.enc.user_pos")->value;
  CHECK(tok(1, 0) == b.user_pos(4, 0) + enc[0]);
  CHECK(tok(1, 7) == b.user_pos(7, 1) + enc[7]);

  SUBCASE("all absent gives the null rows") {
    Tape<float> t2(false);
    const auto& u = t2.value(model.condition_tokens(t2, b.unconditional()));
    std::vector<float> expect;
    for (const char* m : {"user_pos", "audio_agent", "audio_user", "gaze"})
      for (float v : model.params().find(std::string("flow.null.") + m)->value.values()) expect.push_back(v);
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t c = 0; c < 36; ++c) CHECK(u(k, c) == expect[c]);
  }
  SUBCASE("padded blocks use null rows") {
    auto p = b;
    p.frame_valid.assign(8, 1);
    p.frame_valid[1] = 0;
    Tape<float> t2(false);
    const auto& u = t2.value(model.condition_tokens(t2, p));
    CHECK(u(0, 0) == model.params().find("flow.null.user_pos")->value[0]);
    CHECK(u(1, 0) == tok(1, 0));
  }
  SUBCASE("length errors") {
    Tape<float> t2(false);
    auto bad = b;
    bad.frames = 6;
    CHECK_THROWS_AS(model.condition_tokens(t2, bad.slice(0, 6)), LengthError);
    auto mismatch = b;
    mismatch.audio_user = NdArray<float>(7, 3);
    CHECK_THROWS_AS(model.condition_tokens(t2, mismatch), LengthError);
  }
}

TEST_CASE("modality dropout") {
  RngStream rng(2);
  const auto b = random_bundle(8, 3, rng);
  CHECK(dropout_modalities(b, rng, 0.0).present == b.present);
  const auto all = dropout_modalities(b, rng, 1.0);
  for (bool p : all.present) CHECK_FALSE(p);
  std::size_t dropped = 0;
  const int trials = 10000;
  for (int i = 0; i < trials; ++i) {
    const auto d = dropout_modalities(b, rng, 0.05);
    for (bool p : d.present) dropped += p ? 0 : 1;
  }
  const double rate = static_cast<double>(dropped) / (4.0 * trials);
  CHECK(std::abs(rate - 0.05) <= 0.01);
}

TEST_CASE("interpolation and velocity") {
  RngStream rng(3);
  const auto z = randn<double>(3, 4, rng), e = randn<double>(3, 4, rng);
  CHECK(interpolate(z, e, 1.0) == z);
  CHECK(interpolate(z, e, 0.0) == e);
  const auto mid = interpolate(z, e, 0.5);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(mid[i] == doctest::Approx(0.5 * (z[i] + e[i])).epsilon(1e-15));
  CHECK_THROWS_AS(interpolate(z, e, 1.5), ValidationError);
  CHECK_THROWS_AS(interpolate(z, e, -0.1), ValidationError);

  const auto v0 = x1_to_velocity(z, e, 0.0);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(v0[i] == z[i] - e[i]);
  const auto zt = interpolate(z, e, 0.3);
  const auto still = x1_to_velocity(zt, zt, 0.3);
  for (double v : still.values()) CHECK(v == 0.0);
  const auto v = x1_to_velocity(z, zt, 0.3);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(zt[i] + 0.7 * v[i] == doctest::Approx(z[i]).epsilon(1e-14));
  CHECK_THROWS_AS(x1_to_velocity(z, zt, 1.0), NumericError);
}

TEST_CASE("classifier-free guidance combination") {
  FlowGenerator<float> model(small_config(), 4);
  for (auto& v : model.params().find("flow.final.modulation.weight")->value.values()) v = 0.05f;
  RngStream rng(4);
  const auto b = random_bundle(12, 3, rng);
  const auto zt = randn<float>(3, 5, rng);
  const auto c = model.predict_x1(zt, 0.4, b);
  const auto u = model.predict_x1(zt, 0.4, b.unconditional());
  CHECK_FALSE(c == u);
  CHECK(cfg_predict(model, zt, 0.4, b, 1.0) == c);
  CHECK(cfg_predict(model, zt, 0.4, b, 0.0) == u);
  const auto g2 = cfg_combine(c, u, 2.0), g1 = cfg_combine(c, u, 1.0), g0 = cfg_combine(c, u, 0.0);
  for (std::size_t i = 0; i < c.size(); ++i)
    CHECK(g2[i] - g1[i] == doctest::Approx(g1[i] - g0[i]).epsilon(1e-5));
}

TEST_CASE("generator causality and initial behavior") {
  GenConfig cfg = small_config();
  cfg.attention_window = 6;
  FlowGenerator<float> model(cfg, 5);
  RngStream rng(5);
  const auto b = random_bundle(24, 3, rng);
  const auto zt = randn<float>(6, 5, rng);
  const auto base = model.predict_x1(zt, 0.3, b);
  CHECK(base.rows() == 6);
  CHECK(base.cols() == 5);

  SUBCASE("perturbing token k leaves earlier tokens exact") {
    for (std::size_t k = 1; k < 6; ++k) {
      auto zp = zt;
      for (std::size_t c = 0; c < 5; ++c) zp(k, c) += 1.0f;
      auto bp = b;
      for (std::size_t f = k * 4; f < 24; ++f) bp.audio_agent(f, 0) += 1.0f;
      for (const auto& out : {model.predict_x1(zp, 0.3, b), model.predict_x1(zt, 0.3, bp)})
        for (std::size_t r = 0; r < k; ++r)
          for (std::size_t c = 0; c < 5; ++c) CHECK(out(r, c) == base(r, c));
    }
  }
  SUBCASE("fresh model reduces to the input projection path") {
    Tape<float> t(false);
    Var cond = model.condition_tokens(t, b);
    Var x = concat_cols<float>(t, {t.constant(zt), cond});
    const auto& p = model.params();
    Var h = add_row(t, matmul(t, x, t.param(*p.find("flow.in.weight"))), t.param(*p.find("flow.in.bias")));
    Var y = add_row(t, matmul(t, normalize_rows(t, h), t.param(*p.find("flow.out.weight"))),
                    t.param(*p.find("flow.out.bias")));
    const auto& expect = t.value(y);
    for (std::size_t i = 0; i < base.size(); ++i) CHECK(base[i] == doctest::Approx(expect[i]).epsilon(1e-5));
    const auto other = model.predict_x1(randn<float>(6, 5, rng), 0.3, b);
    CHECK_FALSE(other == base);
  }
}

TEST_CASE("flow loss") {
  SUBCASE("mean-square convention") {
    Tape<double> t(false);
    NdArray<double> z(3, 4, 0.5), z1(3, 4, 1.5);
    CHECK(t.value(mse(t, t.constant(z), t.constant(z)))[0] == 0.0);
    CHECK(t.value(mse(t, t.constant(z1), t.constant(z)))[0] == doctest::Approx(1.0));
  }
  SUBCASE("gradients match finite differences") {
    FlowGenerator<double> model(tiny_config(), 6);
    // Move away from the zero-initialized modulation so every path is exercised.
    RngStream init(13);
    for (const auto& p : model.params().all())
      if (p->name.find("modulation") != std::string::npos)
        for (auto& v : p->value.values()) v = 0.1 * init.normal();
    RngStream rng(6);
    const auto b = random_bundle(12, 3, rng);
    const auto z = randn<double>(3, 3, rng);
    FdOptions opt;
    opt.max_entries_per_tensor = 24;
    auto rep = finite_difference_check_params(
        [&](Tape<double>& t) {
          RngStream r(31);
          return flow_loss(t, model, z, b, r);
        },
        model.params(), opt);
    CAPTURE(rep.worst);
    CHECK(rep.max_rel_error <= 1e-3);
  }
}

TEST_CASE("midpoint sampler") {
  RngStream rng(7);
  const auto target = randn<float>(4, 3, rng);
  std::size_t calls = 0;
  Denoiser oracle = [&](const NdArray<float>&, double, bool) {
    ++calls;
    return target;
  };

  SUBCASE("constant predictor is reached from any noise") {
    for (std::uint64_t seed : {1, 2, 3}) {
      RngStream r(seed);
      const auto res = sample(oracle, 4, 3, 4, 1.3, r);
      for (std::size_t i = 0; i < target.size(); ++i) CHECK(std::abs(res.latents[i] - target[i]) <= 1e-5);
    }
  }
  SUBCASE("evaluation counts") {
    RngStream r(1);
    calls = 0;
    CHECK(sample(oracle, 4, 3, 4, 1.3, r).evaluations == 16);
    CHECK(calls == 16);
    CHECK(sample(oracle, 4, 3, 4, 1.0, r).evaluations == 8);
  }
  SUBCASE("full imputation returns the imputed values") {
    Imputation imp;
    imp.positions = {0, 1, 2, 3};
    imp.values = randn<float>(4, 3, rng);
    imp.noise = randn<float>(4, 3, rng);
    Denoiser noisy = [&](const NdArray<float>& z, double, bool c) {
      NdArray<float> out = z;
      for (auto& v : out.values()) v = c ? 3.0f * v : -v;
      return out;
    };
    RngStream r(2);
    const auto res = sample(noisy, 4, 3, 4, 1.3, r, &imp);
    CHECK(res.latents == imp.values);
    CHECK(res.noise == imp.noise);
  }
  SUBCASE("bad imputation") {
    Imputation imp;
    imp.positions = {5};
    imp.values = NdArray<float>(1, 3);
    imp.noise = NdArray<float>(1, 3);
    RngStream r(3);
    CHECK_THROWS_AS(sample(oracle, 4, 3, 4, 1.3, r, &imp), ValidationError);
    CHECK_THROWS_AS(sample(oracle, 4, 3, 0, 1.3, r), ValidationError);
  }
  SUBCASE("changing later conditioning keeps earlier latents exact") {
    GenConfig cfg = small_config();
    cfg.attention_window = 5;
    FlowGenerator<float> model(cfg, 8);
    for (auto& v : model.params().find("flow.block0.modulation.weight")->value.values()) v = 0.05f;
    const auto b = random_bundle(20, 3, rng);
    RngStream r0(9);
    const auto base = sample(model_denoiser(model, b), 5, 5, 4, 1.3, r0);
    for (std::size_t k = 1; k < 5; ++k) {
      auto bp = b;
      for (std::size_t f = k * 4; f < 20; ++f) bp.user_pos(f, 1) += 0.5f;
      RngStream r(9);
      const auto res = sample(model_denoiser(model, bp), 5, 5, 4, 1.3, r);
      for (std::size_t row = 0; row < k; ++row)
        for (std::size_t c = 0; c < 5; ++c) CHECK(res.latents(row, c) == base.latents(row, c));
    }
  }
}
