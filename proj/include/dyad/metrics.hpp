#pragma once

#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"

#include "dyad/synth.hpp"

namespace dyad::metrics {

using diff::NdArray;
using synth::DyadicClip;

/// Clip-level speaking label from mean channel-0 energy.
inline constexpr double kDefaultSpeakingThreshold = 0.5 * synth::kSpeechLevel;
bool classify_speaking(const NdArray<float>& audio_agent, double threshold = kDefaultSpeakingThreshold);

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  std::size_t count = 0;
  /// Fewer samples than dim + 1; the shrinkage term keeps it positive definite.
  bool ill_conditioned = false;

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
  void validate() const;
};

/// Streaming accumulator; rows are added in call order.
class MomentAccumulator {
 public:
  explicit MomentAccumulator(std::size_t dim);
  void add(std::span<const double> row);
  void add(std::span<const float> row);
  std::size_t count() const { return n_; }
  /// Unbiased covariance with diagonal shrinkage 1e-6 * trace / d.
  GaussianStats finish() const;

 private:
  std::size_t n_ = 0;
  Eigen::VectorXd sum_;
  Eigen::MatrixXd outer_;
};

inline constexpr double kShrinkage = 1e-6;
inline constexpr double kEigenTolerance = 1e-6;

/// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)). Square roots come from
/// eigendecompositions with negative eigenvalues clipped at -1e-6 relative.
double gaussian_frechet(const GaussianStats& a, const GaussianStats& b);

/// Per-frame vertex vectors and their second differences times fps^2.
GaussianStats position_stats(std::span<const DyadicClip* const> clips);
GaussianStats acceleration_stats(std::span<const DyadicClip* const> clips);
double fgd(std::span<const DyadicClip* const> generated, std::span<const DyadicClip* const> reference);
double fgd_acc(std::span<const DyadicClip* const> generated, std::span<const DyadicClip* const> reference);

/// Fraction of (frame, foot) pairs with centroid height < 5 cm and horizontal
/// forward-difference speed > 3 cm/s. The last frame has no forward difference.
double foot_slide(const NdArray<float>& frames, const geom::Skeleton& skeleton, double fps);
double foot_slide(const geom::MotionSequence& seq);
/// Mean wrist centroid speed over frames and both wrists (m/s).
double wrist_speed(const NdArray<float>& frames, const geom::Skeleton& skeleton, double fps);
double wrist_speed(const geom::MotionSequence& seq);
/// Mean per-frame gaze score toward the user.
double head_angle(const NdArray<float>& frames, const geom::Skeleton& skeleton, const NdArray<float>& user_floor);
double head_angle(const geom::MotionSequence& seq, const NdArray<float>& user_floor);

/// Report scaling: FGD values are shown x10, wrist speed in cm/s.
inline constexpr double kFgdReportFactor = 10.0;
inline constexpr double kWristReportFactor = 100.0;
inline constexpr int kReportSchemaVersion = 1;

struct MetricTriple {
  std::optional<double> avg, speaking, non_speaking;
};

struct MetricsReport {
  MetricTriple fgd, fgd_acc, foot_slide, wrist_var, head_ang;
  std::size_t speaking_clips = 0, non_speaking_clips = 0;
  std::size_t batch_clips = 0, batches = 0;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
};

struct EvalOptions {
  double speaking_threshold = kDefaultSpeakingThreshold;
  /// FGD Avg is the mean Frechet distance over consecutive batches of this many
  /// clip pairs; a trailing partial batch is dropped unless it is the only one.
  std::size_t batch_clips = 16;
};

/// `generated[i]` is paired with `reference[i]`; both share the reference's
/// conditioning, and speaking labels come from the reference audio.
MetricsReport evaluate(const std::vector<DyadicClip>& generated, const std::vector<DyadicClip>& reference,
                       const EvalOptions& options = {});

}  // namespace dyad::metrics
