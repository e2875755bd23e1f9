#include "dyad/config.hpp"

#include <algorithm>
#include <fstream>

#include "dyad/errors.hpp"
#include "dyad/metrics.hpp"

namespace dyad {

namespace {

void flatten(const nlohmann::json& j, const std::string& prefix, std::vector<std::pair<std::string, nlohmann::json>>& out) {
  for (const auto& [k, v] : j.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object())
      flatten(v, key, out);
    else
      out.emplace_back(key, v);
  }
}

bool is_int(const nlohmann::json& v) { return v.is_number_integer() || v.is_number_unsigned(); }

}  // namespace

void RunConfig::define(const std::string& key, nlohmann::json value, bool nullable) {
  values_[key] = value;
  defaults_[key] = std::move(value);
  if (nullable) nullable_.push_back(key);
}

RunConfig::RunConfig() {
  values_ = nlohmann::json::object();
  defaults_ = nlohmann::json::object();
  define("seed", 0);
  define("threads", 0);

  const synth::ScenarioConfig sc;
  define("data.dir", "data");
  define("data.clips", 500);
  define("data.frames", sc.frames);
  define("data.audio_dim", sc.audio_dim);
  define("synth.room_half_extent", sc.room_half_extent);
  define("synth.max_user_speed", sc.max_user_speed);
  define("synth.gaze_bias_min", sc.gaze_bias_min);
  define("synth.gaze_bias_max", sc.gaze_bias_max);
  define("synth.mean_turn_seconds", sc.mean_turn_seconds);
  define("synth.overlap_probability", sc.overlap_probability);
  define("synth.agent_dominant_probability", sc.agent_dominant_probability);

  define("model.dir", "model");
  define("model.stride", 4);
  define("model.latent_dim", 32);

  define("vae.layers", 2);
  define("vae.heads", 4);
  define("vae.hidden", 64);
  define("vae.beta", 1e-4);
  define("vae.decoder_context", 2);
  define("vae.velocity_weight", 30.0);

  define("vae_train.steps", 6000);
  define("vae_train.batch", 4);
  define("vae_train.lr", 1e-3);
  define("vae_train.warmup", 200);
  define("vae_train.cosine_decay", true);
  define("vae_train.weight_decay", 1e-4);
  define("vae_train.grad_clip", 1.0);
  define("vae_train.crop_frames", 32);
  define("vae_train.val_clips", 20);
  define("vae_train.log_every", 50);
  define("vae_train.val_every", 1000);
  define("vae_train.checkpoint_every", 500);

  define("flow.layers", 2);
  define("flow.heads", 4);
  define("flow.hidden", 64);
  define("flow.attention_window", 2);
  define("flow.cfg_scale", 1.3);
  define("flow.modality_dropout", 0.05);
  define("flow.time_freq_dim", 64);

  define("flow_train.steps", 4000);
  define("flow_train.batch", 16);
  define("flow_train.lr", 1e-3);
  define("flow_train.warmup", 200);
  define("flow_train.cosine_decay", true);
  define("flow_train.weight_decay", 1e-4);
  define("flow_train.grad_clip", 1.0);
  define("flow_train.crop_tokens", 2);
  define("flow_train.val_crops", 256);
  define("flow_train.log_every", 50);
  define("flow_train.val_every", 500);
  define("flow_train.checkpoint_every", 500);

  define("generate.dir", "generated");
  define("generate.split", "test");
  define("generate.window", 400);
  define("generate.count", 0);
  define("generate.gaze", nullptr, true);
  define("generate.use_gaze", true);
  define("generate.steps", 4);
  define("generate.cfg_scale", nullptr, true);

  define("eval.dir", "generated");
  define("eval.report", "report.json");
  define("eval.speaking_threshold", metrics::kDefaultSpeakingThreshold);
  define("eval.batch_clips", 16);

  define("serve.host", "127.0.0.1");
  define("serve.port", 8765);
  define("serve.heartbeat_seconds", 10.0);
  define("serve.max_sessions", 8);
  define("serve.stats_seconds", 1.0);

  define("bench.frames", 400);
  define("bench.report", "bench.json");
}

void RunConfig::set(const std::string& key, const nlohmann::json& value) {
  if (!defaults_.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  const auto& def = defaults_[key];
  const bool nullable = std::find(nullable_.begin(), nullable_.end(), key) != nullable_.end();
  auto fail = [&](const char* want) {
    throw ConfigError("config key '" + key + "' expects " + want + ", got " + value.dump());
  };
  if (value.is_null()) {
    if (!nullable) fail("a value");
  } else if (def.is_boolean()) {
    if (!value.is_boolean()) fail("a boolean");
  } else if (def.is_string()) {
    if (!value.is_string()) fail("a string");
  } else if (is_int(def)) {
    if (!is_int(value) || (value.is_number_integer() && value.get<std::int64_t>() < 0)) fail("a non-negative integer");
  } else if (def.is_number() || (def.is_null() && nullable)) {
    if (!value.is_number()) fail("a number");
  }
  values_[key] = value;
}

void RunConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  set(key, value);
}

void RunConfig::merge(const nlohmann::json& object) {
  if (!object.is_object()) throw ConfigError("config must be a JSON object");
  std::vector<std::pair<std::string, nlohmann::json>> flat;
  flatten(object, "", flat);
  for (const auto& [k, v] : flat) set(k, v);
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  const auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError(path.string() + " is not valid JSON");
  merge(j);
}

const nlohmann::json& RunConfig::at(const std::string& key) const {
  if (!values_.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  return values_[key];
}

std::size_t RunConfig::size(const std::string& key) const { return at(key).get<std::size_t>(); }

std::optional<double> RunConfig::opt_num(const std::string& key) const {
  const auto& v = at(key);
  if (v.is_null()) return std::nullopt;
  return v.get<double>();
}

synth::ScenarioConfig RunConfig::scenario() const {
  synth::ScenarioConfig c;
  c.seed = u64("seed");
  c.frames = size("data.frames");
  c.stride = size("model.stride");
  c.audio_dim = size("data.audio_dim");
  c.room_half_extent = num("synth.room_half_extent");
  c.max_user_speed = num("synth.max_user_speed");
  c.gaze_bias_min = num("synth.gaze_bias_min");
  c.gaze_bias_max = num("synth.gaze_bias_max");
  c.mean_turn_seconds = num("synth.mean_turn_seconds");
  c.overlap_probability = num("synth.overlap_probability");
  c.agent_dominant_probability = num("synth.agent_dominant_probability");
  c.validate();
  return c;
}

vae::VaeConfig RunConfig::vae() const {
  vae::VaeConfig c;
  c.stride = size("model.stride");
  c.latent_dim = size("model.latent_dim");
  c.layers = size("vae.layers");
  c.heads = size("vae.heads");
  c.hidden = size("vae.hidden");
  c.frame_dim = geom::Skeleton::toy()->flat_dim();
  c.beta = num("vae.beta");
  c.decoder_context = size("vae.decoder_context");
  c.velocity_weight = num("vae.velocity_weight");
  c.validate();
  return c;
}

flow::GenConfig RunConfig::flow() const {
  flow::GenConfig c;
  c.stride = size("model.stride");
  c.latent_dim = size("model.latent_dim");
  c.audio_dim = size("data.audio_dim");
  c.layers = size("flow.layers");
  c.heads = size("flow.heads");
  c.hidden = size("flow.hidden");
  c.attention_window = size("flow.attention_window");
  c.cfg_scale = num("flow.cfg_scale");
  c.modality_dropout = num("flow.modality_dropout");
  c.time_freq_dim = size("flow.time_freq_dim");
  c.validate();
  return c;
}

namespace {

train::LoopOptions loop_options(const RunConfig& c, const std::string& p) {
  train::LoopOptions o;
  o.steps = c.size(p + ".steps");
  o.batch = c.size(p + ".batch");
  o.adam.peak_lr = c.num(p + ".lr");
  o.adam.warmup_steps = static_cast<std::int64_t>(c.size(p + ".warmup"));
  o.adam.weight_decay = c.num(p + ".weight_decay");
  o.adam.decay_steps = c.flag(p + ".cosine_decay") ? static_cast<std::int64_t>(o.steps) : 0;
  o.grad_clip = c.num(p + ".grad_clip");
  o.log_every = c.size(p + ".log_every");
  o.val_every = c.size(p + ".val_every");
  o.checkpoint_every = c.size(p + ".checkpoint_every");
  o.seed = c.u64("seed");
  return o;
}

}  // namespace

train::VaeTrainOptions RunConfig::vae_train() const {
  train::VaeTrainOptions o;
  o.model = vae();
  o.loop = loop_options(*this, "vae_train");
  o.crop_frames = size("vae_train.crop_frames");
  o.val_clips = size("vae_train.val_clips");
  return o;
}

train::FlowTrainOptions RunConfig::flow_train() const {
  train::FlowTrainOptions o;
  o.model = flow();
  o.loop = loop_options(*this, "flow_train");
  o.crop_tokens = size("flow_train.crop_tokens");
  o.val_crops = size("flow_train.val_crops");
  return o;
}

}  // namespace dyad
