#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dyad/model.hpp"
#include "dyad/stream.hpp"
#include "dyad/synth.hpp"

namespace dyad::gen {

/// Consecutive non-overlapping windows of exactly `window` frames; ids get an
/// "@<first frame>" suffix. `max_count` = 0 keeps all.
std::vector<synth::DyadicClip> split_windows(const std::vector<synth::DyadicClip>& clips, std::size_t window,
                                             std::size_t max_count = 0);

struct GenerateOptions {
  stream::StreamOptions stream;
  /// Constant gaze target; unset conditions on the reference's measured gaze.
  std::optional<double> gaze;
  /// When false, no gaze conditioning at all (gaze is ignored).
  bool use_gaze = true;
};

/// Streams a motion for the reference's conditioning. The result carries the
/// reference's conditioning and labels with the agent motion replaced. The
/// sampling seed mixes options.stream.seed with the reference id.
synth::DyadicClip generate_like(std::shared_ptr<const ModelBundle> model, const synth::DyadicClip& reference,
                                const GenerateOptions& options);

struct GenerationSet {
  std::vector<synth::DyadicClip> generated, reference;
  nlohmann::json meta;
};

/// Layout: generation.json, generated/<n>.clip, reference/<n>.clip.
void save_generation(const std::filesystem::path& dir, const GenerationSet& set);
GenerationSet load_generation(const std::filesystem::path& dir);

}  // namespace dyad::gen
