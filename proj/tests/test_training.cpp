#include <filesystem>
#include <fstream>

#include "doctest.h"

#include "dyad/binio.hpp"
#include "dyad/config.hpp"
#include "dyad/errors.hpp"
#include "dyad/training.hpp"

using namespace dyad;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("dyad_train_" + name);
  fs::remove_all(p);
  return p;
}

const train::TrainData& tiny_data() {
  static const train::TrainData d = [] {
    synth::ScenarioConfig sc;
    sc.frames = 64;
    sc.audio_dim = 3;
    sc.seed = 11;
    const auto dir = scratch("data");
    const auto m = data::build_dataset(sc, 10, dir, 1);
    return train::load_train_data(m);
  }();
  return d;
}

train::VaeTrainOptions tiny_vae(std::size_t steps) {
  train::VaeTrainOptions o;
  o.model.layers = 1;
  o.model.heads = 2;
  o.model.hidden = 16;
  o.model.latent_dim = 4;
  o.model.velocity_weight = 1.0;
  o.crop_frames = 16;
  o.loop.steps = steps;
  o.loop.batch = 2;
  o.loop.adam.warmup_steps = 5;
  o.loop.adam.peak_lr = 3e-3;
  o.loop.log_every = 4;
  o.loop.val_every = 10;
  o.loop.checkpoint_every = 5;
  o.loop.seed = 3;
  return o;
}

train::FlowTrainOptions tiny_flow(std::size_t steps) {
  train::FlowTrainOptions o;
  o.model.layers = 1;
  o.model.heads = 2;
  o.model.hidden = 16;
  o.model.latent_dim = 4;
  o.model.audio_dim = 3;
  o.model.time_freq_dim = 8;
  o.loop.steps = steps;
  o.loop.batch = 4;
  o.loop.adam.warmup_steps = 5;
  o.loop.adam.peak_lr = 3e-3;
  o.loop.log_every = 4;
  o.loop.val_every = 10;
  o.loop.checkpoint_every = 5;
  o.val_crops = 16;
  return o;
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("vae training writes a loadable checkpoint and a log") {
  const auto dir = scratch("vae");
  const auto res = train::train_vae(tiny_data(), tiny_vae(30), dir);
  CHECK(res.completed);
  CHECK(res.step == 30);
  REQUIRE(res.validation.size() == 4);  // steps 0, 10, 20, 30
  CHECK(res.validation.front().step == 0);
  CHECK(res.validation.back().value < res.validation.front().value);
  CHECK(res.baseline > 0);
  const auto model = ModelBundle::load(dir, false);
  CHECK(model->encode_window == 16);
  CHECK(model->flow == nullptr);
  const auto [mse, base] = train::vae_validation(*model, tiny_data().val);
  CHECK(mse == doctest::Approx(res.validation.back().value));
  CHECK(base == doctest::Approx(res.baseline));
  std::size_t train_records = 0;
  for (const auto& l : lines(dir / "vae_log.jsonl")) {
    const auto j = nlohmann::json::parse(l);
    if (j["event"] == "train") {
      ++train_records;
      for (const char* k : {"step", "recon", "kl", "lr", "velocity", "grad_norm"}) CHECK(j.contains(k));
    }
  }
  CHECK(train_records == 8);  // every 4 steps plus the final step
}

TEST_CASE("interrupted training resumes to the same parameters") {
  const auto straight = scratch("straight"), resumed = scratch("resumed");
  train::train_vae(tiny_data(), tiny_vae(20), straight);

  auto opt = tiny_vae(20);
  int polls = 0;
  opt.loop.stop = [&] { return ++polls > 7; };
  const auto part = train::train_vae(tiny_data(), opt, resumed);
  CHECK_FALSE(part.completed);
  CHECK(part.step == 7);
  CHECK_FALSE(fs::exists(resumed / "vae.ckpt"));
  const auto full = train::train_vae(tiny_data(), tiny_vae(20), resumed);
  CHECK(full.completed);
  CHECK(full.step == 20);

  const auto a = binio::read_file(straight / "vae.ckpt");
  const auto b = binio::read_file(resumed / "vae.ckpt");
  CHECK(a == b);
  CHECK(lines(straight / "vae_log.jsonl") == lines(resumed / "vae_log.jsonl"));

  // A state written for another model config is refused.
  auto other = tiny_vae(25);
  other.model.hidden = 8;
  CHECK_THROWS_AS(train::train_vae(tiny_data(), other, resumed), ConfigError);
}

TEST_CASE("flow training needs the VAE and improves validation loss") {
  const auto dir = scratch("flow");
  CHECK_THROWS_AS(train::train_flow(tiny_data(), tiny_flow(10), dir), DependencyError);
  train::train_vae(tiny_data(), tiny_vae(20), dir);
  auto bad = tiny_flow(10);
  bad.model.latent_dim = 5;
  CHECK_THROWS_AS(train::train_flow(tiny_data(), bad, dir), ConfigError);

  const auto res = train::train_flow(tiny_data(), tiny_flow(40), dir);
  CHECK(res.completed);
  REQUIRE(res.validation.size() == 5);
  CHECK(res.validation.back().value < res.validation.front().value);
  const auto model = ModelBundle::load(dir);
  CHECK(model->latents.dim() == 4);

  // Retraining the VAE invalidates the flow checkpoint.
  auto v2 = tiny_vae(21);
  v2.loop.resume = false;
  train::train_vae(tiny_data(), v2, dir);
  CHECK_THROWS_AS(ModelBundle::load(dir), ConfigError);
}

TEST_CASE("windowed encoding and conditioning") {
  vae::VaeConfig vc;
  vc.layers = 1;
  vc.heads = 2;
  vc.hidden = 16;
  vc.latent_dim = 4;
  vae::CausalVae<float> v(vc, 2);
  const auto& clip = tiny_data().train.front();
  const auto z = train::encode_windows(v, clip.agent, 16);
  CHECK(z.rows() == 16);
  const auto second = vae::encode_mean(v, clip.agent.slice_rows(16, 16));
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t c = 0; c < 4; ++c) CHECK(z(4 + k, c) == second(k, c));
  CHECK_THROWS_AS(train::encode_windows(v, clip.agent, 6), ConfigError);

  const auto b = train::clip_conditioning(clip, true);
  CHECK(b.has(flow::Modality::kGaze));
  const auto g = clip.gaze_series();
  CHECK(b.gaze(10, 0) == doctest::Approx(g[10]).epsilon(1e-6));
  CHECK_FALSE(train::clip_conditioning(clip, false).has(flow::Modality::kGaze));
  b.validate(3);
}

TEST_CASE("run config") {
  RunConfig c;
  CHECK(c.size("vae.hidden") == 64);
  c.set("vae.hidden=32");
  CHECK(c.vae().hidden == 32);
  c.set("data.dir=/tmp/x y");
  CHECK(c.str("data.dir") == "/tmp/x y");
  c.set("generate.gaze=0.8");
  CHECK(*c.opt_num("generate.gaze") == 0.8);
  c.set("generate.gaze=null");
  CHECK_FALSE(c.opt_num("generate.gaze"));
  CHECK_THROWS_AS(c.set("vae.hiden=3"), ConfigError);
  CHECK_THROWS_AS(c.set("vae.hidden=3.5"), ConfigError);
  CHECK_THROWS_AS(c.set("vae.hidden=-1"), ConfigError);
  CHECK_THROWS_AS(c.set("vae.hidden"), ConfigError);
  CHECK_THROWS_AS(c.set("vae_train.cosine_decay=1"), ConfigError);
  CHECK_THROWS_AS(c.set("seed=null"), ConfigError);
  c.set("flow.cfg_scale=2");
  CHECK(c.flow().cfg_scale == 2.0);

  const auto p = fs::temp_directory_path() / "dyad_cfg.json";
  {
    std::ofstream o(p);
    o << R"({"vae": {"layers": 3}, "flow_train.steps": 12, "serve": {"port": 9000}})";
  }
  c.merge_file(p);
  CHECK(c.vae().layers == 3);
  CHECK(c.flow_train().loop.steps == 12);
  CHECK(c.flow_train().loop.adam.decay_steps == 12);
  CHECK(c.size("serve.port") == 9000);
  {
    std::ofstream o(p);
    o << R"({"vae": {"depth": 3}})";
  }
  CHECK_THROWS_AS(c.merge_file(p), ConfigError);
  {
    std::ofstream o(p);
    o << "{not json";
  }
  CHECK_THROWS_AS(c.merge_file(p), ConfigError);
  CHECK_THROWS_AS(c.merge_file("/nonexistent/dyad.json"), IoError);
  fs::remove(p);
  CHECK(c.resolved().contains("bench.frames"));
  CHECK(c.scenario().frames == 400);
}
