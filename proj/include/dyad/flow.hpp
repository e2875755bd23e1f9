#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dyad/diff/layers.hpp"

namespace dyad::flow {

using diff::NdArray;
using diff::Tape;
using diff::Var;

enum class Modality : std::size_t { kUserPos = 0, kAudioAgent = 1, kAudioUser = 2, kGaze = 3 };
inline constexpr std::size_t kModalityCount = 4;
const char* modality_name(Modality m);
/// Throws ValidationError for names outside user_pos/audio_agent/audio_user/gaze.
Modality modality_from_name(const std::string& name);

struct GenConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t hidden = 128;
  std::size_t latent_dim = 32;
  std::size_t stride = 4;
  std::size_t audio_dim = 8;
  /// Tokens visible to each query (itself plus earlier); streaming runs a
  /// window of this many tokens.
  std::size_t attention_window = 2;
  double cfg_scale = 1.3;
  double modality_dropout = 0.05;
  std::size_t time_freq_dim = 64;

  /// Full-size configuration: 4 layers, 4 heads, width 1024.
  static GenConfig paper_scale();
  void validate() const;
  std::size_t modality_width(Modality m) const;
  /// Channels of one conditioning token: s * (2 + 2 D_a + 1).
  std::size_t condition_width() const;
};

/// Per-frame conditioning. Streams with present[m] == false may be left
/// empty. `frame_valid` (optional, length T) marks cold-start padding frames;
/// a token whose block contains padding treats every modality as absent.
struct ConditioningBundle {
  std::size_t frames = 0;
  NdArray<float> user_pos;     // T x 2, agent-normalized floor frame
  NdArray<float> audio_agent;  // T x D_a
  NdArray<float> audio_user;   // T x D_a
  NdArray<float> gaze;         // T x 1
  std::array<bool, kModalityCount> present{true, true, true, false};
  std::vector<std::uint8_t> frame_valid;

  const NdArray<float>& stream(Modality m) const;
  NdArray<float>& stream(Modality m);
  bool has(Modality m) const { return present[static_cast<std::size_t>(m)]; }
  /// Throws LengthError / ValidationError on inconsistent streams.
  void validate(std::size_t audio_dim) const;
  /// Frames [f0, f0 + n).
  ConditioningBundle slice(std::size_t f0, std::size_t n) const;
  /// Every modality absent.
  ConditioningBundle unconditional() const;
  /// Replaces the gaze stream with a constant target (or drops it).
  void set_gaze_target(std::optional<double> g);
};

/// Each modality marked absent independently with probability p.
ConditioningBundle dropout_modalities(const ConditioningBundle& bundle, RngStream& rng, double p);

/// z_tau = tau * z + (1 - tau) * eps. Throws ValidationError for tau outside [0, 1].
template <typename T>
NdArray<T> interpolate(const NdArray<T>& z, const NdArray<T>& eps, double tau);

/// v = (z_hat - z_tau) / (1 - tau). Throws NumericError for tau >= 1.
template <typename T>
NdArray<T> x1_to_velocity(const NdArray<T>& z_hat, const NdArray<T>& z_tau, double tau);

/// (1 - w) * uncond + w * cond, so w = 1 and w = 0 return a branch exactly.
template <typename T>
NdArray<T> cfg_combine(const NdArray<T>& cond, const NdArray<T>& uncond, double w);

template <typename T>
class FlowGenerator {
 public:
  FlowGenerator(const GenConfig& config, std::uint64_t seed);
  FlowGenerator(const FlowGenerator&) = delete;
  FlowGenerator& operator=(const FlowGenerator&) = delete;

  /// K x condition_width(): stride-s frame blocks folded into channels, each
  /// modality offset by its learned encoding, absent modalities replaced by
  /// their learned null rows.
  Var condition_tokens(Tape<T>& t, const ConditioningBundle& bundle) const;
  /// Clean-latent estimate for K tokens. `first_token` is the absolute token
  /// index of row 0 (rotary positions only).
  Var predict_x1(Tape<T>& t, Var z_tau, T tau, Var cond, std::size_t first_token = 0) const;
  NdArray<T> predict_x1(const NdArray<T>& z_tau, double tau, const ConditioningBundle& bundle,
                        std::size_t first_token = 0) const;

  const GenConfig& config() const { return config_; }
  diff::ParamStore<T>& params() { return store_; }
  const diff::ParamStore<T>& params() const { return store_; }

 private:
  GenConfig config_;
  diff::ParamStore<T> store_;
  std::array<diff::LearnedEncoding<T>, kModalityCount> encodings_, nulls_;
  diff::Linear<T> in_proj_;
  diff::TimestepEmbedding<T> time_embed_;
  std::vector<diff::AdaLnZeroBlock<T>> blocks_;
  diff::Linear<T> final_mod_, out_;
};

/// Flow matching loss: tau ~ U[0, 1], eps ~ N(0, I), modality dropout, then
/// mean squared error between predict_x1(z_tau) and z.
template <typename T>
Var flow_loss(Tape<T>& t, const FlowGenerator<T>& model, const NdArray<T>& z, const ConditioningBundle& bundle,
              RngStream& rng, std::size_t first_token = 0);

/// Conditional and unconditional forward passes combined in x1-space.
template <typename T>
NdArray<T> cfg_predict(const FlowGenerator<T>& model, const NdArray<T>& z_tau, double tau,
                       const ConditioningBundle& bundle, double w, std::size_t first_token = 0);

/// Abstract clean-latent predictor used by the sampler; `conditional` selects
/// the branch.
using Denoiser = std::function<NdArray<float>(const NdArray<float>& z_tau, double tau, bool conditional)>;

/// Tokens pinned to known values; each keeps the noise drawn when it was
/// first generated.
struct Imputation {
  std::vector<std::size_t> positions;
  NdArray<float> values;  // positions.size() x D_z
  NdArray<float> noise;   // positions.size() x D_z
};

struct SampleResult {
  NdArray<float> latents;  // K x D_z at tau = 1
  NdArray<float> noise;    // initial eps, K x D_z
  std::size_t evaluations = 0;
};

/// Explicit midpoint integration of the guided velocity over `steps` uniform
/// intervals. Imputed tokens are overwritten with interpolate(value, noise,
/// tau) before every evaluation and at tau = 1.
SampleResult sample(const Denoiser& denoiser, std::size_t tokens, std::size_t latent_dim, std::size_t steps,
                    double w, RngStream& rng, const Imputation* imputation = nullptr);

/// Denoiser backed by a trained generator and a fixed conditioning window.
Denoiser model_denoiser(const FlowGenerator<float>& model, const ConditioningBundle& bundle,
                        std::size_t first_token = 0);

}  // namespace dyad::flow
