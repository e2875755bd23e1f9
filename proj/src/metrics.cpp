#include "dyad/metrics.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "dyad/errors.hpp"

namespace dyad::metrics {

namespace {

using geom::Vec3;

Vec3 centroid(const float* frame, std::size_t joint) {
  Vec3 c = Vec3::Zero();
  const float* p = frame + joint * geom::kIcoVertices * 3;
  for (std::size_t v = 0; v < geom::kIcoVertices; ++v) c += Vec3(p[3 * v], p[3 * v + 1], p[3 * v + 2]);
  return c / static_cast<double>(geom::kIcoVertices);
}

void check_width(const NdArray<float>& frames, const geom::Skeleton& skeleton) {
  if (frames.cols() != skeleton.flat_dim()) throw ShapeError("frame width does not match the skeleton");
}

NdArray<float> flat_frames(const geom::MotionSequence& seq) {
  NdArray<float> out(seq.length(), seq.skeleton->flat_dim());
  for (std::size_t t = 0; t < seq.length(); ++t)
    geom::flatten_into(seq.frames[t], std::span<float>(out.row(t), out.cols()));
  return out;
}

Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < -kEigenTolerance * scale) throw NumericError("covariance is indefinite beyond tolerance");
    ev[i] = std::sqrt(std::max(ev[i], 0.0));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

std::optional<double> mean_of(const std::vector<double>& v, const std::vector<bool>& speaking, int which) {
  double s = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (which < 0 || speaking[i] == (which == 1)) {
      s += v[i];
      ++n;
    }
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace

bool classify_speaking(const NdArray<float>& audio_agent, double threshold) {
  if (audio_agent.rows() == 0 || audio_agent.cols() == 0) return false;
  double s = 0;
  for (std::size_t t = 0; t < audio_agent.rows(); ++t) s += audio_agent(t, 0);
  return s / static_cast<double>(audio_agent.rows()) > threshold;
}

void GaussianStats::validate() const {
  const auto d = mean.size();
  if (covariance.rows() != d || covariance.cols() != d) throw ShapeError("covariance shape mismatch");
  if ((covariance - covariance.transpose()).cwiseAbs().maxCoeff() > 1e-9)
    throw ValidationError("covariance is not symmetric");
}

MomentAccumulator::MomentAccumulator(std::size_t dim)
    : sum_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim))),
      outer_(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim))) {}

void MomentAccumulator::add(std::span<const double> row) {
  if (row.size() != static_cast<std::size_t>(sum_.size())) throw ShapeError("sample dimension mismatch");
  const Eigen::Map<const Eigen::VectorXd> x(row.data(), sum_.size());
  sum_ += x;
  outer_.selfadjointView<Eigen::Lower>().rankUpdate(x);
  ++n_;
}

void MomentAccumulator::add(std::span<const float> row) {
  std::vector<double> d(row.begin(), row.end());
  add(std::span<const double>(d));
}

GaussianStats MomentAccumulator::finish() const {
  if (n_ < 2) throw ValidationError("at least two samples are needed for a covariance");
  const double n = static_cast<double>(n_);
  GaussianStats g;
  g.count = n_;
  g.mean = sum_ / n;
  g.ill_conditioned = n_ < g.dim() + 1;
  Eigen::MatrixXd m = outer_.selfadjointView<Eigen::Lower>();
  g.covariance = (m - n * g.mean * g.mean.transpose()) / (n - 1.0);
  g.covariance = 0.5 * (g.covariance + g.covariance.transpose()).eval();
  const double d = static_cast<double>(g.dim());
  const double lambda = kShrinkage * g.covariance.trace() / d;
  g.covariance.diagonal().array() += lambda;
  return g;
}

double gaussian_frechet(const GaussianStats& a, const GaussianStats& b) {
  if (a.dim() != b.dim()) throw ShapeError("Frechet distance needs equal dimensions");
  a.validate();
  b.validate();
  // tr sqrt(S_a S_b) is the sum of singular values of sqrtm(S_a) sqrtm(S_b); this
  // avoids squaring the spectrum, which loses half the digits near the floor.
  const Eigen::MatrixXd prod = symmetric_sqrt(a.covariance) * symmetric_sqrt(b.covariance);
  Eigen::BDCSVD<Eigen::MatrixXd> svd(prod);
  const double tr_sqrt = svd.singularValues().sum();
  const double d = (a.mean - b.mean).squaredNorm() + a.covariance.trace() + b.covariance.trace() - 2.0 * tr_sqrt;
  return std::max(d, 0.0);
}

GaussianStats position_stats(std::span<const DyadicClip* const> clips) {
  if (clips.empty()) throw ValidationError("no clips");
  MomentAccumulator acc(clips.front()->agent.cols());
  for (const auto* c : clips)
    for (std::size_t t = 0; t < c->frames(); ++t) acc.add(std::span<const float>(c->agent.row(t), c->agent.cols()));
  return acc.finish();
}

GaussianStats acceleration_stats(std::span<const DyadicClip* const> clips) {
  if (clips.empty()) throw ValidationError("no clips");
  const std::size_t d = clips.front()->agent.cols();
  MomentAccumulator acc(d);
  std::vector<double> row(d);
  for (const auto* c : clips) {
    if (c->frames() < 3) throw LengthError("acceleration needs clips of at least 3 frames");
    const double f2 = c->fps * c->fps;
    for (std::size_t t = 1; t + 1 < c->frames(); ++t) {
      const float *p = c->agent.row(t - 1), *q = c->agent.row(t), *r = c->agent.row(t + 1);
      for (std::size_t i = 0; i < d; ++i)
        row[i] = (static_cast<double>(r[i]) - 2.0 * static_cast<double>(q[i]) + static_cast<double>(p[i])) * f2;
      acc.add(std::span<const double>(row));
    }
  }
  return acc.finish();
}

double fgd(std::span<const DyadicClip* const> generated, std::span<const DyadicClip* const> reference) {
  return gaussian_frechet(position_stats(generated), position_stats(reference));
}

double fgd_acc(std::span<const DyadicClip* const> generated, std::span<const DyadicClip* const> reference) {
  return gaussian_frechet(acceleration_stats(generated), acceleration_stats(reference));
}

double foot_slide(const NdArray<float>& frames, const geom::Skeleton& skeleton, double fps) {
  check_width(frames, skeleton);
  if (frames.rows() < 2) return 0.0;
  std::size_t hits = 0, pairs = 0;
  for (std::size_t t = 0; t + 1 < frames.rows(); ++t)
    for (std::size_t j : {skeleton.foot_left, skeleton.foot_right}) {
      const Vec3 a = centroid(frames.row(t), j), b = centroid(frames.row(t + 1), j);
      const double speed = std::hypot(b.x() - a.x(), b.z() - a.z()) * fps;
      hits += a.y() < 0.05 && speed > 0.03;
      ++pairs;
    }
  return static_cast<double>(hits) / static_cast<double>(pairs);
}

double foot_slide(const geom::MotionSequence& seq) { return foot_slide(flat_frames(seq), *seq.skeleton, seq.fps); }

double wrist_speed(const NdArray<float>& frames, const geom::Skeleton& skeleton, double fps) {
  check_width(frames, skeleton);
  if (frames.rows() < 2) return 0.0;
  double s = 0;
  std::size_t n = 0;
  for (std::size_t t = 0; t + 1 < frames.rows(); ++t)
    for (std::size_t j : {skeleton.wrist_left, skeleton.wrist_right}) {
      s += (centroid(frames.row(t + 1), j) - centroid(frames.row(t), j)).norm() * fps;
      ++n;
    }
  return s / static_cast<double>(n);
}

double wrist_speed(const geom::MotionSequence& seq) { return wrist_speed(flat_frames(seq), *seq.skeleton, seq.fps); }

double head_angle(const NdArray<float>& frames, const geom::Skeleton& skeleton, const NdArray<float>& user_floor) {
  check_width(frames, skeleton);
  if (user_floor.rows() != frames.rows()) throw LengthError("user trajectory length mismatch");
  if (frames.rows() == 0) throw ValidationError("empty sequence");
  // Only the head joint matters; reuse a single-joint skeleton view.
  auto sk = std::make_shared<geom::Skeleton>(skeleton);
  double s = 0;
  for (std::size_t t = 0; t < frames.rows(); ++t) {
    const auto pose = geom::unflatten(std::span<const float>(frames.row(t), frames.cols()), sk);
    s += geom::gaze_score(pose, geom::Vec2(user_floor(t, 0), user_floor(t, 1)));
  }
  return s / static_cast<double>(frames.rows());
}

double head_angle(const geom::MotionSequence& seq, const NdArray<float>& user_floor) {
  return head_angle(flat_frames(seq), *seq.skeleton, user_floor);
}

nlohmann::json MetricsReport::to_json() const {
  auto triple = [](const MetricTriple& m) {
    return nlohmann::json{{"avg", opt_json(m.avg)}, {"speaking", opt_json(m.speaking)},
                          {"non_speaking", opt_json(m.non_speaking)}};
  };
  nlohmann::json j;
  j["schema_version"] = kReportSchemaVersion;
  j["units"] = {{"fgd", "squared meters x10"},
                {"fgd_acc", "squared m/s^2 x10"},
                {"foot_slide", "fraction of (frame, foot) pairs"},
                {"wrist_var", "mean wrist speed, cm/s"},
                {"head_ang", "mean facing-to-user cosine"}};
  j["counts"] = {{"speaking", speaking_clips},
                 {"non_speaking", non_speaking_clips},
                 {"total", speaking_clips + non_speaking_clips}};
  j["warnings"] = warnings;
  j["fgd_batches"] = {{"clips_per_batch", batch_clips}, {"batches", batches}};
  j["metrics"] = {{"fgd", triple(fgd)},
                  {"fgd_acc", triple(fgd_acc)},
                  {"foot_slide", triple(foot_slide)},
                  {"wrist_var", triple(wrist_var)},
                  {"head_ang", triple(head_ang)}};
  return j;
}

MetricsReport evaluate(const std::vector<DyadicClip>& generated, const std::vector<DyadicClip>& reference,
                       const EvalOptions& options) {
  if (generated.size() != reference.size()) throw LengthError("generated and reference sets differ in size");
  if (generated.empty()) throw ValidationError("nothing to evaluate");
  if (options.batch_clips == 0) throw ValidationError("batch_clips must be positive");
  const std::size_t n = generated.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (generated[i].frames() != reference[i].frames()) throw LengthError("paired clips differ in length");
    if (generated[i].agent.cols() != reference[i].agent.cols()) throw ShapeError("paired clips differ in skeleton");
  }

  MetricsReport r;
  std::vector<bool> speaking(n);
  std::vector<double> slide(n), wrist(n), head(n);
  for (std::size_t i = 0; i < n; ++i) {
    speaking[i] = classify_speaking(reference[i].audio_agent, options.speaking_threshold);
    (speaking[i] ? r.speaking_clips : r.non_speaking_clips)++;
    const auto& g = generated[i];
    slide[i] = foot_slide(g.agent, *g.skeleton, g.fps);
    wrist[i] = wrist_speed(g.agent, *g.skeleton, g.fps) * kWristReportFactor;
    head[i] = head_angle(g.agent, *g.skeleton, reference[i].user_floor);
  }
  r.foot_slide = {mean_of(slide, speaking, -1), mean_of(slide, speaking, 1), mean_of(slide, speaking, 0)};
  r.wrist_var = {mean_of(wrist, speaking, -1), mean_of(wrist, speaking, 1), mean_of(wrist, speaking, 0)};
  r.head_ang = {mean_of(head, speaking, -1), mean_of(head, speaking, 1), mean_of(head, speaking, 0)};

  auto pick = [&](const std::vector<DyadicClip>& set, int which, std::size_t lo, std::size_t hi) {
    std::vector<const DyadicClip*> out;
    for (std::size_t i = lo; i < hi; ++i)
      if (which < 0 || speaking[i] == (which == 1)) out.push_back(&set[i]);
    return out;
  };
  auto fd_pair = [&](auto fn, int which) -> std::optional<double> {
    const auto g = pick(generated, which, 0, n), ref = pick(reference, which, 0, n);
    if (g.empty()) return std::nullopt;
    std::size_t frames = 0;
    for (const auto* c : g) frames += c->frames();
    if (frames < g.front()->agent.cols() + 1)
      r.warnings.push_back(std::string(which == 1 ? "speaking" : "non_speaking") +
                           " pool has fewer frames than dimensions; covariance relies on shrinkage");
    return fn(g, ref) * kFgdReportFactor;
  };
  const std::size_t bs = std::min(options.batch_clips, n);
  r.batch_clips = bs;
  r.batches = n / bs;
  auto batch_avg = [&](auto fn) {
    double s = 0;
    for (std::size_t b = 0; b < r.batches; ++b) {
      const auto g = pick(generated, -1, b * bs, (b + 1) * bs), ref = pick(reference, -1, b * bs, (b + 1) * bs);
      s += fn(g, ref);
    }
    return s / static_cast<double>(r.batches) * kFgdReportFactor;
  };
  using Span = std::span<const DyadicClip* const>;
  auto pos = [](Span a, Span b) { return fgd(a, b); };
  auto acc = [](Span a, Span b) { return fgd_acc(a, b); };
  r.fgd = {batch_avg(pos), fd_pair(pos, 1), fd_pair(pos, 0)};
  r.fgd_acc = {batch_avg(acc), fd_pair(acc, 1), fd_pair(acc, 0)};
  return r;
}

}  // namespace dyad::metrics
