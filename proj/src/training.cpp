#include "dyad/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include "dyad/errors.hpp"

namespace dyad::train {

namespace {

using Clock = std::chrono::steady_clock;

// Shared optimizer loop state, persisted in the .state file.
struct LoopState {
  std::size_t step = 0;
  RngStream rng;
  nlohmann::json acc = nlohmann::json::object();  // running sums since the last log record
  std::vector<ValPoint> validation;
};

nlohmann::json val_json(const std::vector<ValPoint>& v) {
  auto j = nlohmann::json::array();
  for (const auto& p : v) j.push_back({p.step, p.value});
  return j;
}

std::vector<ValPoint> val_from_json(const nlohmann::json& j) {
  std::vector<ValPoint> v;
  for (const auto& e : j) v.push_back({e.at(0).get<std::size_t>(), e.at(1).get<double>()});
  return v;
}

void save_state(const std::filesystem::path& path, const std::string& kind, const nlohmann::json& config,
                const diff::ParamStore<float>& store, diff::AdamW<float>& opt, const LoopState& st) {
  diff::Checkpoint c;
  c.meta = {{"kind", kind},
            {"config", config},
            {"step", st.step},
            {"rng", st.rng.save_state()},
            {"acc", st.acc},
            {"validation", val_json(st.validation)}};
  diff::export_params(store, c, "param.");
  for (std::size_t i = 0; i < opt.first_moments().size(); ++i) {
    c.put(diff::to_record("adam.m." + std::to_string(i), opt.first_moments()[i]));
    c.put(diff::to_record("adam.v." + std::to_string(i), opt.second_moments()[i]));
  }
  diff::write_checkpoint(path, c);
}

bool load_state(const std::filesystem::path& path, const std::string& kind, const nlohmann::json& config,
                diff::ParamStore<float>& store, diff::AdamW<float>& opt, LoopState& st) {
  if (!std::filesystem::exists(path)) return false;
  const auto c = diff::read_checkpoint(path);
  if (c.meta.value("kind", "") != kind) throw FormatError(path.string() + " is not a " + kind + " file");
  if (c.meta.at("config") != config) throw ConfigError(path.string() + " was written with a different model config");
  diff::import_params(c, store, "param.");
  for (std::size_t i = 0; i < opt.first_moments().size(); ++i) {
    const auto* m = c.find("adam.m." + std::to_string(i));
    const auto* v = c.find("adam.v." + std::to_string(i));
    if (!m || !v) throw FormatError(path.string() + " lacks optimizer moments");
    opt.first_moments()[i] = diff::from_record<float>(*m);
    opt.second_moments()[i] = diff::from_record<float>(*v);
  }
  st.step = c.meta.at("step");
  st.rng.restore_state(c.meta.at("rng").get<std::string>());
  st.acc = c.meta.at("acc");
  st.validation = val_from_json(c.meta.at("validation"));
  opt.set_step_count(static_cast<std::int64_t>(st.step));
  return true;
}

class Log {
 public:
  Log(const std::filesystem::path& path, const LoopOptions& o) : out_(path, std::ios::app), opt_(o) {
    if (!out_) throw IoError("cannot open " + path.string());
  }
  void write(const nlohmann::json& rec) {
    out_ << rec.dump() << '\n';
    out_.flush();
    if (opt_.on_record) opt_.on_record(rec);
  }

 private:
  std::ofstream out_;
  const LoopOptions& opt_;
};

void accumulate(nlohmann::json& acc, const std::string& key, double v) {
  acc[key] = acc.value(key, 0.0) + v;
}

nlohmann::json flush(nlohmann::json& acc, std::size_t step, double lr) {
  const double n = acc.value("n", 0.0);
  nlohmann::json rec = {{"event", "train"}, {"step", step}, {"lr", lr}};
  for (const auto& [k, v] : acc.items())
    if (k != "n") rec[k] = v.get<double>() / n;
  acc = nlohmann::json::object();
  return rec;
}

void check_loop(const LoopOptions& o) {
  if (o.batch == 0) throw ConfigError("batch must be at least 1");
  if (o.log_every == 0 || o.val_every == 0 || o.checkpoint_every == 0)
    throw ConfigError("log/val/checkpoint intervals must be positive");
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

}  // namespace

TrainData load_train_data(const data::Manifest& manifest) {
  TrainData d;
  d.skeleton = manifest.skeleton;
  d.fps = manifest.fps;
  d.audio_dim = manifest.audio_dim;
  d.train = data::load_split(manifest, data::Split::kTrain);
  d.val = data::load_split(manifest, data::Split::kVal);
  if (d.train.empty() || d.val.empty()) throw ValidationError("dataset needs train and val clips");
  return d;
}

flow::ConditioningBundle clip_conditioning(const synth::DyadicClip& clip, bool measured_gaze) {
  flow::ConditioningBundle b;
  b.frames = clip.frames();
  b.user_pos = clip.user_floor;
  b.audio_agent = clip.audio_agent;
  b.audio_user = clip.audio_user;
  if (measured_gaze) {
    const auto g = clip.gaze_series();
    b.gaze = NdArray<float>(g.size(), 1);
    for (std::size_t i = 0; i < g.size(); ++i) b.gaze(i, 0) = static_cast<float>(std::clamp(g[i], -1.0, 1.0));
  }
  b.present[static_cast<std::size_t>(flow::Modality::kGaze)] = measured_gaze;
  return b;
}

NdArray<float> encode_windows(const vae::CausalVae<float>& vae, const NdArray<float>& standardized,
                              std::size_t window) {
  const std::size_t s = vae.config().stride;
  if (window == 0 || window % s != 0) throw ConfigError("encode window must be a positive multiple of the stride");
  const std::size_t usable = standardized.rows() / s * s;
  NdArray<float> z(usable / s, vae.config().latent_dim);
  for (std::size_t f0 = 0; f0 < usable; f0 += window) {
    const std::size_t n = std::min(window, usable - f0);
    const auto mu = vae::encode_mean(vae, standardized.slice_rows(f0, n));
    for (std::size_t k = 0; k < mu.rows(); ++k) std::copy_n(mu.row(k), mu.cols(), z.row(f0 / s + k));
  }
  return z;
}

NdArray<float> reconstruct(const ModelBundle& model, const NdArray<float>& frames) {
  const auto z = encode_windows(*model.vae, model.frames.forward(frames), model.encode_window);
  return model.frames.inverse(vae::decode_latents(*model.vae, z));
}

std::pair<double, double> vae_validation(const ModelBundle& model, std::span<const synth::DyadicClip> clips) {
  double err = 0, base = 0;
  std::size_t n = 0;
  for (const auto& clip : clips) {
    const auto rec = reconstruct(model, clip.agent);
    for (std::size_t r = 0; r < rec.rows(); ++r)
      for (std::size_t c = 0; c < rec.cols(); ++c) {
        const double x = clip.agent(r, c);
        err += (rec(r, c) - x) * (rec(r, c) - x);
        base += (model.frames.mean[c] - x) * (model.frames.mean[c] - x);
        ++n;
      }
  }
  if (n == 0) throw ValidationError("no validation frames");
  return {err / static_cast<double>(n), base / static_cast<double>(n)};
}

TrainSummary train_vae(const TrainData& data, const VaeTrainOptions& options, const std::filesystem::path& dir) {
  const auto t0 = Clock::now();
  const auto& lo = options.loop;
  check_loop(lo);
  options.model.validate();
  if (options.model.frame_dim != data.skeleton->flat_dim()) throw ConfigError("vae.frame_dim must match the skeleton");
  if (options.crop_frames == 0 || options.crop_frames % options.model.stride != 0)
    throw ConfigError("crop_frames must be a positive multiple of the stride");
  for (const auto& c : data.train)
    if (c.frames() < options.crop_frames) throw ConfigError("clips are shorter than crop_frames");
  std::filesystem::create_directories(dir);

  ModelBundle bundle;
  bundle.skeleton = data.skeleton;
  bundle.fps = data.fps;
  bundle.encode_window = options.crop_frames;
  bundle.vae = std::make_unique<vae::CausalVae<float>>(options.model, mix_seed(lo.seed, stable_hash("vae.init")));
  std::vector<const NdArray<float>*> raw;
  for (const auto& c : data.train) raw.push_back(&c.agent);
  bundle.frames = Standardizer::fit(raw);
  std::vector<NdArray<float>> train_std;
  for (const auto& c : data.train) train_std.push_back(bundle.frames.forward(c.agent));
  const std::span<const synth::DyadicClip> val(data.val.data(),
                                               options.val_clips ? std::min(options.val_clips, data.val.size())
                                                                 : data.val.size());

  auto& store = bundle.vae->params();
  diff::AdamW<float> opt(store, lo.adam);
  LoopState st{0, RngStream(mix_seed(lo.seed, stable_hash("vae.loop"))), nlohmann::json::object(), {}};
  const auto state_path = dir / "vae.state";
  const nlohmann::json config = to_json(options.model);
  if (!(lo.resume && load_state(state_path, "vae_state", config, store, opt, st))) std::filesystem::remove(state_path);
  Log log(dir / "vae_log.jsonl", lo);

  TrainSummary out;
  auto validate_now = [&] {
    const auto [mse, base] = vae_validation(bundle, val);
    st.validation.push_back({st.step, mse});
    out.baseline = base;
    log.write({{"event", "val"}, {"step", st.step}, {"val_recon_mse", mse}, {"baseline_mse", base}});
  };
  if (st.step == 0 && st.validation.empty()) validate_now();

  const std::size_t L = options.crop_frames;
  bool stopped = false;
  while (st.step < lo.steps) {
    if (lo.stop && lo.stop()) {
      stopped = true;
      break;
    }
    store.zero_grad();
    double recon = 0, kl = 0, vel = 0;
    for (std::size_t b = 0; b < lo.batch; ++b) {
      const auto& x = train_std[st.rng.index(train_std.size())];
      const std::size_t f0 = st.rng.index(x.rows() - L + 1);
      diff::Tape<float> t;
      const auto terms = vae::vae_loss(t, *bundle.vae, t.constant(x.slice_rows(f0, L)), st.rng);
      t.backward(terms.total, 1.0f / static_cast<float>(lo.batch));
      recon += t.value(terms.recon)[0];
      kl += t.value(terms.kl)[0];
      vel += t.value(terms.velocity)[0];
    }
    const double gnorm = diff::clip_grad_norm(store, lo.grad_clip);
    const double lr = opt.step();
    ++st.step;
    accumulate(st.acc, "recon", recon / static_cast<double>(lo.batch));
    accumulate(st.acc, "kl", kl / static_cast<double>(lo.batch));
    accumulate(st.acc, "velocity", vel / static_cast<double>(lo.batch));
    accumulate(st.acc, "grad_norm", gnorm);
    accumulate(st.acc, "n", 1.0);
    if (st.step % lo.log_every == 0 || st.step == lo.steps) log.write(flush(st.acc, st.step, lr));
    if (st.step % lo.val_every == 0 || st.step == lo.steps) validate_now();
    if (st.step % lo.checkpoint_every == 0) save_state(state_path, "vae_state", config, store, opt, st);
  }
  save_state(state_path, "vae_state", config, store, opt, st);
  if (!stopped) bundle.save(dir);

  out.step = st.step;
  out.completed = !stopped;
  out.validation = st.validation;
  if (out.baseline == 0) out.baseline = vae_validation(bundle, val).second;
  out.seconds = seconds_since(t0);
  return out;
}

TrainSummary train_flow(const TrainData& data, const FlowTrainOptions& options, const std::filesystem::path& dir) {
  const auto t0 = Clock::now();
  const auto& lo = options.loop;
  check_loop(lo);
  options.model.validate();
  auto loaded = ModelBundle::load(dir, false);
  ModelBundle& bundle = *loaded;
  const auto& vc = bundle.vae->config();
  if (options.model.latent_dim != vc.latent_dim || options.model.stride != vc.stride)
    throw ConfigError("flow latent_dim/stride must match the VAE");
  if (options.model.audio_dim != data.audio_dim) throw ConfigError("flow.audio_dim must match the dataset");
  if (options.crop_tokens == 0) throw ConfigError("crop_tokens must be at least 1");
  const std::size_t s = vc.stride, C = options.crop_tokens;
  const std::size_t window = bundle.encode_window;

  auto latents_of = [&](const std::vector<synth::DyadicClip>& clips) {
    std::vector<NdArray<float>> z;
    for (const auto& c : clips) z.push_back(encode_windows(*bundle.vae, bundle.frames.forward(c.agent), window));
    return z;
  };
  auto train_z = latents_of(data.train);
  auto val_z = latents_of(data.val);
  std::vector<const NdArray<float>*> zp;
  for (const auto& z : train_z) zp.push_back(&z);
  bundle.latents = Standardizer::fit(zp);
  for (auto& z : train_z) z = bundle.latents.forward(z);
  for (auto& z : val_z) z = bundle.latents.forward(z);
  for (const auto& z : train_z)
    if (z.rows() < C) throw ConfigError("clips are shorter than crop_tokens");
  std::vector<flow::ConditioningBundle> train_c, val_c;
  for (const auto& c : data.train) train_c.push_back(clip_conditioning(c, true));
  for (const auto& c : data.val) val_c.push_back(clip_conditioning(c, true));

  // Fixed validation crops.
  struct Crop {
    std::size_t clip, token;
  };
  std::vector<Crop> vcrops;
  {
    RngStream r(mix_seed(lo.seed, stable_hash("flow.valcrops")));
    for (std::size_t i = 0; i < options.val_crops; ++i) {
      const std::size_t c = r.index(val_z.size());
      vcrops.push_back({c, r.index(val_z[c].rows() - C + 1)});
    }
  }

  bundle.flow = std::make_unique<flow::FlowGenerator<float>>(options.model, mix_seed(lo.seed, stable_hash("flow.init")));
  auto& store = bundle.flow->params();
  diff::AdamW<float> opt(store, lo.adam);
  LoopState st{0, RngStream(mix_seed(lo.seed, stable_hash("flow.loop"))), nlohmann::json::object(), {}};
  const auto state_path = dir / "flow.state";
  const nlohmann::json config = {{"model", to_json(options.model)},
                                 {"vae_fingerprint", vae_fingerprint(dir)}};
  if (!(lo.resume && load_state(state_path, "flow_state", config, store, opt, st))) std::filesystem::remove(state_path);
  Log log(dir / "flow_log.jsonl", lo);

  auto crop_loss = [&](diff::Tape<float>& t, const NdArray<float>& z, const flow::ConditioningBundle& c,
                       std::size_t k, RngStream& rng) {
    return flow::flow_loss(t, *bundle.flow, z.slice_rows(k, C), c.slice(k * s, C * s), rng, k);
  };
  auto validate_now = [&] {
    RngStream r(mix_seed(lo.seed, stable_hash("flow.valnoise")));
    double total = 0;
    for (const auto& vc2 : vcrops) {
      diff::Tape<float> t(false);
      total += t.value(crop_loss(t, val_z[vc2.clip], val_c[vc2.clip], vc2.token, r))[0];
    }
    const double v = total / static_cast<double>(std::max<std::size_t>(1, vcrops.size()));
    st.validation.push_back({st.step, v});
    log.write({{"event", "val"}, {"step", st.step}, {"val_loss", v}});
  };
  if (st.step == 0 && st.validation.empty()) validate_now();

  bool stopped = false;
  while (st.step < lo.steps) {
    if (lo.stop && lo.stop()) {
      stopped = true;
      break;
    }
    store.zero_grad();
    double loss = 0;
    for (std::size_t b = 0; b < lo.batch; ++b) {
      const std::size_t c = st.rng.index(train_z.size());
      const std::size_t k = st.rng.index(train_z[c].rows() - C + 1);
      diff::Tape<float> t;
      const diff::Var l = crop_loss(t, train_z[c], train_c[c], k, st.rng);
      t.backward(l, 1.0f / static_cast<float>(lo.batch));
      loss += t.value(l)[0];
    }
    const double gnorm = diff::clip_grad_norm(store, lo.grad_clip);
    const double lr = opt.step();
    ++st.step;
    accumulate(st.acc, "loss", loss / static_cast<double>(lo.batch));
    accumulate(st.acc, "grad_norm", gnorm);
    accumulate(st.acc, "n", 1.0);
    if (st.step % lo.log_every == 0 || st.step == lo.steps) log.write(flush(st.acc, st.step, lr));
    if (st.step % lo.val_every == 0 || st.step == lo.steps) validate_now();
    if (st.step % lo.checkpoint_every == 0) save_state(state_path, "flow_state", config, store, opt, st);
  }
  save_state(state_path, "flow_state", config, store, opt, st);
  if (!stopped) bundle.save(dir);

  TrainSummary out;
  out.step = st.step;
  out.completed = !stopped;
  out.validation = st.validation;
  out.seconds = seconds_since(t0);
  return out;
}

}  // namespace dyad::train
