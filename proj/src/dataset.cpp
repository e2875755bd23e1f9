#include "dyad/dataset.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <thread>

#include "dyad/binio.hpp"
#include "dyad/errors.hpp"

namespace dyad::data {

namespace {

using diff::NdArray;

constexpr char kClipMagic[4] = {'D', 'Y', 'C', 'L'};

void put_array(binio::Writer& w, const NdArray<float>& a) {
  for (float v : a.values()) w.f32(v);
}

NdArray<float> get_array(binio::Reader& r, std::size_t rows, std::size_t cols) {
  NdArray<float> a(rows, cols);
  for (auto& v : a.values()) v = r.f32();
  return a;
}

}  // namespace

void write_clip(const std::filesystem::path& path, const synth::DyadicClip& clip) {
  clip.validate();
  binio::Writer w;
  w.bytes(kClipMagic, sizeof kClipMagic);
  w.u32(kClipVersion);
  w.u32(static_cast<std::uint32_t>(clip.frames()));
  w.u32(static_cast<std::uint32_t>(clip.skeleton->joint_count()));
  w.u32(static_cast<std::uint32_t>(clip.audio_agent.cols()));
  w.f32(static_cast<float>(clip.fps));
  put_array(w, clip.agent);
  put_array(w, clip.user_floor);
  put_array(w, clip.audio_agent);
  put_array(w, clip.audio_user);
  for (auto m : clip.speaking_mask_agent) w.u8(m);
  w.f32(clip.gaze_bias);
  binio::write_file_atomic(path, w.buffer());
}

synth::DyadicClip read_clip(const std::filesystem::path& path, std::shared_ptr<const geom::Skeleton> skeleton) {
  binio::Reader r(binio::read_file(path), "clip " + path.filename().string());
  char magic[4];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kClipMagic, sizeof magic) != 0) throw FormatError(path.string() + " is not a clip file");
  const auto version = r.u32();
  if (version != kClipVersion) throw VersionError("clip version " + std::to_string(version) + " unsupported");
  const std::size_t frames = r.u32(), joints = r.u32(), audio_dim = r.u32();
  const float fps = r.f32();
  if (joints != skeleton->joint_count())
    throw LengthError("clip has " + std::to_string(joints) + " joints, skeleton has " +
                      std::to_string(skeleton->joint_count()));
  if (frames == 0 || audio_dim == 0) throw LengthError("clip header has an empty dimension");
  const std::size_t payload = frames * (skeleton->flat_dim() + 2 + 2 * audio_dim) * 4 + frames + 4;
  r.need(payload);
  if (r.remaining() != payload) throw LengthError("clip " + path.string() + " has trailing bytes");
  synth::DyadicClip clip;
  clip.id = path.stem().string();
  clip.skeleton = std::move(skeleton);
  clip.fps = fps;
  clip.agent = get_array(r, frames, clip.skeleton->flat_dim());
  clip.user_floor = get_array(r, frames, 2);
  clip.audio_agent = get_array(r, frames, audio_dim);
  clip.audio_user = get_array(r, frames, audio_dim);
  clip.speaking_mask_agent.resize(frames);
  for (auto& m : clip.speaking_mask_agent) m = r.u8();
  clip.gaze_bias = r.f32();
  clip.validate();
  return clip;
}

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw ValidationError("unknown split '" + name + "'");
}

std::vector<const ClipEntry*> Manifest::entries(Split s) const {
  std::vector<const ClipEntry*> out;
  for (const auto& c : clips)
    if (c.split == s) out.push_back(&c);
  return out;
}

nlohmann::json Manifest::to_json() const {
  nlohmann::json j;
  j["version"] = kManifestVersion;
  j["seed"] = seed;
  j["frames"] = frames;
  j["audio_dim"] = audio_dim;
  j["fps"] = fps;
  j["skeleton"] = {{"joints", skeleton->joints},
                   {"vertices_per_joint", geom::kIcoVertices},
                   {"frame_dim", skeleton->flat_dim()},
                   {"layout", "joint-major, then vertex, then xyz"},
                   {"units", "meters, y up"}};
  auto& arr = j["clips"] = nlohmann::json::array();
  for (const auto& c : clips)
    arr.push_back({{"id", c.id}, {"file", c.file}, {"split", split_name(c.split)}, {"gaze_bias", c.gaze_bias}});
  return j;
}

std::vector<Split> assign_splits(const std::vector<std::string>& ids, std::uint64_t seed) {
  const std::size_t n = ids.size();
  std::vector<std::uint64_t> key(n);
  for (std::size_t i = 0; i < n; ++i) key[i] = mix_seed(seed, stable_hash(ids[i]));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return key[a] != key[b] ? key[a] < key[b] : ids[a] < ids[b];
  });
  const auto n_train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
  std::vector<Split> out(n, Split::kTest);
  for (std::size_t r = 0; r < n; ++r) {
    if (r < n_train) out[order[r]] = Split::kTrain;
    else if (r < n_train + n_val) out[order[r]] = Split::kVal;
  }
  return out;
}

Manifest build_dataset(const synth::ScenarioConfig& config, std::size_t count, const std::filesystem::path& dir,
                       std::size_t threads) {
  config.validate();
  if (count < 10) throw ValidationError("dataset needs at least 10 clips");
  std::filesystem::create_directories(dir / "clips");
  Manifest m;
  m.root = dir;
  m.seed = config.seed;
  m.frames = config.frames;
  m.audio_dim = config.audio_dim;
  m.fps = config.fps;
  m.clips.resize(count);

  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, count);
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = next++; i < count; i = next++) {
          const auto clip = synth::make_clip(config, i);
          const std::string file = "clips/" + clip.id + ".dycl";
          write_clip(dir / file, clip);
          m.clips[i] = ClipEntry{clip.id, file, Split::kTrain, clip.gaze_bias};
        }
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::vector<std::string> ids;
  for (const auto& c : m.clips) ids.push_back(c.id);
  const auto splits = assign_splits(ids, config.seed);
  for (std::size_t i = 0; i < count; ++i) m.clips[i].split = splits[i];

  const std::string text = m.to_json().dump(2);
  binio::write_file_atomic(dir / "manifest.json", std::vector<char>(text.begin(), text.end()));
  return m;
}

Manifest load_manifest(const std::filesystem::path& dir) {
  const auto bytes = binio::read_file(dir / "manifest.json");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest is not valid JSON: " + std::string(e.what()));
  }
  try {
    if (j.at("version").get<int>() != kManifestVersion) throw VersionError("manifest version unsupported");
    Manifest m;
    m.root = dir;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.frames = j.at("frames").get<std::size_t>();
    m.audio_dim = j.at("audio_dim").get<std::size_t>();
    m.fps = j.at("fps").get<double>();
    m.skeleton = geom::Skeleton::from_names(j.at("skeleton").at("joints").get<std::vector<std::string>>());
    for (const auto& c : j.at("clips"))
      m.clips.push_back(ClipEntry{c.at("id").get<std::string>(), c.at("file").get<std::string>(),
                                  split_from_name(c.at("split").get<std::string>()), c.at("gaze_bias").get<double>()});
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest is missing fields: " + std::string(e.what()));
  }
}

std::vector<synth::DyadicClip> load_split(const Manifest& manifest, Split split) {
  std::vector<synth::DyadicClip> out;
  for (const auto* e : manifest.entries(split)) {
    auto clip = read_clip(manifest.root / e->file, manifest.skeleton);
    clip.id = e->id;
    if (clip.frames() != manifest.frames) throw LengthError("clip " + e->id + " length differs from the manifest");
    out.push_back(std::move(clip));
  }
  return out;
}

}  // namespace dyad::data
