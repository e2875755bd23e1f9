#include <atomic>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "CLI11.hpp"

#include "dyad/config.hpp"
#include "dyad/dataset.hpp"
#include "dyad/errors.hpp"
#include "dyad/generation.hpp"
#include "dyad/metrics.hpp"
#include "dyad/service.hpp"
#include "dyad/stream.hpp"
#include "dyad/training.hpp"

using namespace dyad;
namespace fs = std::filesystem;

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

void log(const std::string& msg) { std::cerr << "[dyad] " << msg << std::endl; }

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::string fmt(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

void print_report(const metrics::MetricsReport& r) {
  std::printf("%-12s %12s %12s %12s\n", "metric", "avg", "speaking", "non-speak");
  const std::pair<const char*, const metrics::MetricTriple*> rows[] = {{"FGD", &r.fgd},
                                                                      {"FGD_acc", &r.fgd_acc},
                                                                      {"foot_slide", &r.foot_slide},
                                                                      {"wrist_var", &r.wrist_var},
                                                                      {"head_ang", &r.head_ang}};
  for (const auto& [name, m] : rows)
    std::printf("%-12s %12s %12s %12s\n", name, fmt(m->avg).c_str(), fmt(m->speaking).c_str(),
                fmt(m->non_speaking).c_str());
  std::printf("clips: %zu speaking, %zu non-speaking\n", r.speaking_clips, r.non_speaking_clips);
  for (const auto& w : r.warnings) std::printf("warning: %s\n", w.c_str());
}

train::LoopOptions& with_hooks(train::LoopOptions& loop) {
  loop.stop = [] { return g_stop.load(); };
  loop.on_record = [](const nlohmann::json& j) {
    if (j.value("event", "") == "val") log(j.dump());
  };
  return loop;
}

void report_training(const std::string& what, const train::TrainSummary& s) {
  if (!s.completed) {
    log(what + " interrupted at step " + std::to_string(s.step) + "; rerun to resume");
    return;
  }
  log(what + " finished at step " + std::to_string(s.step) + " in " + std::to_string(s.seconds) + " s");
  if (!s.validation.empty())
    log("validation " + std::to_string(s.validation.front().value) + " -> " +
        std::to_string(s.validation.back().value));
}

stream::StreamOptions stream_options(const RunConfig& c) {
  stream::StreamOptions o;
  o.seed = c.u64("seed");
  o.steps = c.size("generate.steps");
  o.cfg_scale = c.opt_num("generate.cfg_scale").value_or(-1.0);
  return o;
}

int cmd_synth(const RunConfig& c) {
  const auto m = data::build_dataset(c.scenario(), c.size("data.clips"), c.str("data.dir"), c.size("threads"));
  std::cout << (m.root / "manifest.json").string() << '\n';
  return 0;
}

int cmd_train_vae(const RunConfig& c) {
  const auto data = train::load_train_data(data::load_manifest(c.str("data.dir")));
  auto opt = c.vae_train();
  with_hooks(opt.loop);
  const auto s = train::train_vae(data, opt, c.str("model.dir"));
  report_training("vae training", s);
  if (s.completed) log("mean-pose baseline MSE " + std::to_string(s.baseline));
  return s.completed ? 0 : 130;
}

int cmd_train_flow(const RunConfig& c) {
  const auto data = train::load_train_data(data::load_manifest(c.str("data.dir")));
  auto opt = c.flow_train();
  with_hooks(opt.loop);
  const auto s = train::train_flow(data, opt, c.str("model.dir"));
  report_training("flow training", s);
  return s.completed ? 0 : 130;
}

int cmd_generate(const RunConfig& c) {
  std::shared_ptr<const ModelBundle> model = ModelBundle::load(c.str("model.dir"));
  const auto manifest = data::load_manifest(c.str("data.dir"));
  const auto split = data::split_from_name(c.str("generate.split"));
  const auto refs = gen::split_windows(data::load_split(manifest, split), c.size("generate.window"),
                                       c.size("generate.count"));
  if (refs.empty()) throw ValidationError("no windows to generate; check generate.window and the split");
  gen::GenerateOptions go;
  go.stream = stream_options(c);
  go.gaze = c.opt_num("generate.gaze");
  go.use_gaze = c.flag("generate.use_gaze");
  gen::GenerationSet set;
  set.reference = refs;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (g_stop) throw Error("interrupted", "generation interrupted");
    set.generated.push_back(gen::generate_like(model, refs[i], go));
    if ((i + 1) % 10 == 0 || i + 1 == refs.size()) log("generated " + std::to_string(i + 1) + "/" + std::to_string(refs.size()));
  }
  set.meta = {{"model", c.str("model.dir")},
              {"data", c.str("data.dir")},
              {"split", c.str("generate.split")},
              {"window", c.size("generate.window")},
              {"seed", c.u64("seed")},
              {"steps", go.stream.steps},
              {"cfg_scale", go.stream.cfg_scale >= 0 ? go.stream.cfg_scale : model->flow->config().cfg_scale},
              {"gaze", go.use_gaze ? (go.gaze ? nlohmann::json(*go.gaze) : nlohmann::json("measured")) : nlohmann::json()}};
  gen::save_generation(c.str("generate.dir"), set);
  std::cout << (fs::path(c.str("generate.dir")) / "generation.json").string() << '\n';
  return 0;
}

int cmd_evaluate(const RunConfig& c) {
  const auto set = gen::load_generation(c.str("eval.dir"));
  metrics::EvalOptions eo;
  eo.speaking_threshold = c.num("eval.speaking_threshold");
  eo.batch_clips = c.size("eval.batch_clips");
  const auto r = metrics::evaluate(set.generated, set.reference, eo);
  auto j = r.to_json();
  j["generation"] = set.meta;
  write_json(c.str("eval.report"), j);
  print_report(r);
  return 0;
}

int cmd_serve(const RunConfig& c) {
  std::shared_ptr<const ModelBundle> model = ModelBundle::load(c.str("model.dir"));
  service::ServerOptions so;
  so.host = c.str("serve.host");
  so.port = static_cast<std::uint16_t>(c.size("serve.port"));
  so.seed = c.u64("seed");
  so.steps = c.size("generate.steps");
  so.cfg_scale = c.opt_num("generate.cfg_scale").value_or(-1.0);
  so.heartbeat_seconds = c.num("serve.heartbeat_seconds");
  so.stats_seconds = c.num("serve.stats_seconds");
  so.max_sessions = c.size("serve.max_sessions");
  service::Server server(model, so);
  server.start();
  log("listening on " + so.host + ":" + std::to_string(server.port()));
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  log("shutting down after " + std::to_string(server.sessions_started()) + " sessions");
  server.stop();
  return 0;
}

int cmd_bench(const RunConfig& c) {
  std::shared_ptr<const ModelBundle> model = ModelBundle::load(c.str("model.dir"));
  auto sc = c.scenario();
  sc.frames = c.size("bench.frames");
  sc.audio_dim = model->flow->config().audio_dim;
  const auto clip = synth::make_clip(sc, 0);
  const auto r = stream::bench(model, train::clip_conditioning(clip, false), stream_options(c));
  write_json(c.str("bench.report"), r.to_json());
  std::printf("batch      %8.1f fps\n", r.batch_fps);
  std::printf("streaming  %8.1f fps  latency ms p50 %.2f p95 %.2f max %.2f (%zu chunks)\n", r.streaming_fps,
              r.latency_p50_ms, r.latency_p95_ms, r.latency_max_ms, r.chunks);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dyadic listener motion: data, training, generation, evaluation and serving"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_file;
  std::vector<std::string> overrides;
  app.add_option("--config", config_file, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--set", overrides, "Override a config key, e.g. --set vae.hidden=32")->expected(1)->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  bool print_config = false;
  app.add_flag("--print-config", print_config, "Print the resolved config and exit");

  const std::pair<const char*, const char*> commands[] = {
      {"synth", "Generate the synthetic dataset"},
      {"train-vae", "Train the motion autoencoder"},
      {"train-flow", "Train the latent generator"},
      {"generate", "Generate motion for a data split"},
      {"evaluate", "Score generated motion"},
      {"serve", "Run the streaming server"},
      {"bench", "Measure generation throughput and latency"},
  };
  for (const auto& [name, help] : commands) app.add_subcommand(name, help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    RunConfig config;
    if (!config_file.empty()) config.merge_file(config_file);
    for (const auto& o : overrides) config.set(o);
    if (print_config) {
      std::cout << config.resolved().dump(2) << '\n';
      return 0;
    }
    const std::string cmd = app.get_subcommands().front()->get_name();
    log(cmd + " config " + config.resolved().dump());

    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    if (cmd == "synth") return cmd_synth(config);
    if (cmd == "train-vae") return cmd_train_vae(config);
    if (cmd == "train-flow") return cmd_train_flow(config);
    if (cmd == "generate") return cmd_generate(config);
    if (cmd == "evaluate") return cmd_evaluate(config);
    if (cmd == "serve") return cmd_serve(config);
    if (cmd == "bench") return cmd_bench(config);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 1;
}
