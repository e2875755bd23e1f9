#include "dyad/generation.hpp"

#include <fstream>

#include "dyad/dataset.hpp"
#include "dyad/errors.hpp"
#include "dyad/rng.hpp"
#include "dyad/training.hpp"

namespace dyad::gen {

namespace fs = std::filesystem;

std::vector<synth::DyadicClip> split_windows(const std::vector<synth::DyadicClip>& clips, std::size_t window,
                                             std::size_t max_count) {
  if (window == 0) throw ConfigError("window must be positive");
  std::vector<synth::DyadicClip> out;
  for (const auto& c : clips)
    for (std::size_t w0 = 0; w0 + window <= c.frames(); w0 += window) {
      if (max_count > 0 && out.size() == max_count) return out;
      synth::DyadicClip x;
      x.id = window == c.frames() ? c.id : c.id + "@" + std::to_string(w0);
      x.skeleton = c.skeleton;
      x.fps = c.fps;
      x.gaze_bias = c.gaze_bias;
      x.agent = c.agent.slice_rows(w0, window);
      x.user_floor = c.user_floor.slice_rows(w0, window);
      x.audio_agent = c.audio_agent.slice_rows(w0, window);
      x.audio_user = c.audio_user.slice_rows(w0, window);
      x.speaking_mask_agent.assign(c.speaking_mask_agent.begin() + static_cast<std::ptrdiff_t>(w0),
                                   c.speaking_mask_agent.begin() + static_cast<std::ptrdiff_t>(w0 + window));
      out.push_back(std::move(x));
    }
  return out;
}

synth::DyadicClip generate_like(std::shared_ptr<const ModelBundle> model, const synth::DyadicClip& reference,
                                const GenerateOptions& options) {
  auto bundle = train::clip_conditioning(reference, options.use_gaze && !options.gaze);
  if (options.use_gaze && options.gaze) bundle.set_gaze_target(*options.gaze);
  auto so = options.stream;
  so.seed = mix_seed(options.stream.seed, stable_hash(reference.id));
  synth::DyadicClip out = reference;
  out.agent = stream::run_offline(std::move(model), bundle, so);
  return out;
}

void save_generation(const fs::path& dir, const GenerationSet& set) {
  if (set.generated.size() != set.reference.size()) throw LengthError("generated and reference counts differ");
  fs::create_directories(dir / "generated");
  fs::create_directories(dir / "reference");
  nlohmann::json clips = nlohmann::json::array();
  for (std::size_t i = 0; i < set.generated.size(); ++i) {
    const std::string file = std::to_string(i) + ".clip";
    data::write_clip(dir / "generated" / file, set.generated[i]);
    data::write_clip(dir / "reference" / file, set.reference[i]);
    clips.push_back({{"id", set.reference[i].id}, {"file", file}});
  }
  auto j = set.meta;
  j["clips"] = clips;
  std::ofstream out(dir / "generation.json");
  if (!out) throw IoError("cannot write " + (dir / "generation.json").string());
  out << j.dump(2) << '\n';
}

GenerationSet load_generation(const fs::path& dir) {
  std::ifstream in(dir / "generation.json");
  if (!in) throw DependencyError("no generation.json in " + dir.string() + "; run generate first");
  GenerationSet set;
  try {
    set.meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("generation.json: " + std::string(e.what()));
  }
  for (const auto& c : set.meta.at("clips")) {
    const auto file = c.at("file").get<std::string>();
    auto g = data::read_clip(dir / "generated" / file);
    auto r = data::read_clip(dir / "reference" / file);
    g.id = r.id = c.at("id").get<std::string>();
    set.generated.push_back(std::move(g));
    set.reference.push_back(std::move(r));
  }
  set.meta.erase("clips");
  return set;
}

}  // namespace dyad::gen
