#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "dyad/synth.hpp"

namespace dyad::data {

/// Clip file layout (little-endian):
///   "DYCL" | u32 version | u32 frames | u32 joints | u32 audio_dim | f32 fps
///   | f32 agent[frames * joints * 12 * 3] | f32 user_floor[frames * 2]
///   | f32 audio_agent[frames * audio_dim] | f32 audio_user[frames * audio_dim]
///   | u8 speaking_mask[frames] | f32 gaze_bias
inline constexpr std::uint32_t kClipVersion = 1;
inline constexpr int kManifestVersion = 1;

void write_clip(const std::filesystem::path& path, const synth::DyadicClip& clip);
/// FormatError on bad magic, VersionError on an unknown version, TruncationError
/// on a short file, LengthError when sizes disagree with the skeleton or the
/// file carries trailing bytes.
synth::DyadicClip read_clip(const std::filesystem::path& path,
                            std::shared_ptr<const geom::Skeleton> skeleton = geom::Skeleton::toy());

enum class Split { kTrain, kVal, kTest };
const char* split_name(Split s);
Split split_from_name(const std::string& name);

struct ClipEntry {
  std::string id;
  std::string file;
  Split split = Split::kTrain;
  double gaze_bias = 0;
};

struct Manifest {
  std::filesystem::path root;
  std::uint64_t seed = 0;
  std::size_t frames = 0;
  std::size_t audio_dim = 0;
  double fps = 30.0;
  std::shared_ptr<const geom::Skeleton> skeleton = geom::Skeleton::toy();
  std::vector<ClipEntry> clips;

  std::vector<const ClipEntry*> entries(Split s) const;
  nlohmann::json to_json() const;
};

/// Exact 80/10/10 assignment by ranking a per-clip hash of (seed, id).
std::vector<Split> assign_splits(const std::vector<std::string>& ids, std::uint64_t seed);

/// Generates `count` clips into `dir` with a manifest.json. Parallel over
/// `threads` workers; output is identical for any thread count.
Manifest build_dataset(const synth::ScenarioConfig& config, std::size_t count, const std::filesystem::path& dir,
                       std::size_t threads = 0);
Manifest load_manifest(const std::filesystem::path& dir);
std::vector<synth::DyadicClip> load_split(const Manifest& manifest, Split split);

}  // namespace dyad::data
