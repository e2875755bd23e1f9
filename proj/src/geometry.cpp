#include "dyad/geometry.hpp"

#include <cmath>
#include <numbers>

#include <Eigen/Geometry>
#include <Eigen/SVD>

#include "dyad/errors.hpp"

namespace dyad::geom {

ReferenceIcosahedron make_reference_icosahedron() {
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  const double s = 1.0 / std::sqrt(1.0 + phi * phi);
  ReferenceIcosahedron ico;
  std::size_t k = 0;
  // Three mutually orthogonal golden rectangles.
  for (double a : {-1.0, 1.0})
    for (double b : {-phi, phi}) ico.vertices[k++] = Vec3(0.0, a, b) * s;
  for (double a : {-1.0, 1.0})
    for (double b : {-phi, phi}) ico.vertices[k++] = Vec3(a, b, 0.0) * s;
  for (double a : {-phi, phi})
    for (double b : {-1.0, 1.0}) ico.vertices[k++] = Vec3(a, 0.0, b) * s;
  return ico;
}

const ReferenceIcosahedron& reference_icosahedron() {
  static const ReferenceIcosahedron ico = make_reference_icosahedron();
  return ico;
}

std::size_t Skeleton::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < joints.size(); ++i)
    if (joints[i] == name) return i;
  throw ValidationError("skeleton has no joint named " + name);
}

std::shared_ptr<const Skeleton> Skeleton::toy() {
  static const auto sk =
      from_names({"pelvis", "head", "wrist_left", "wrist_right", "foot_left", "foot_right"});
  return sk;
}

std::shared_ptr<const Skeleton> Skeleton::from_names(std::vector<std::string> names) {
  auto sk = std::make_shared<Skeleton>();
  sk->joints = std::move(names);
  sk->pelvis = sk->index_of("pelvis");
  sk->head = sk->index_of("head");
  sk->wrist_left = sk->index_of("wrist_left");
  sk->wrist_right = sk->index_of("wrist_right");
  sk->foot_left = sk->index_of("foot_left");
  sk->foot_right = sk->index_of("foot_right");
  return sk;
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform inv;
  inv.rotation = rotation.transpose();
  inv.translation = -(inv.rotation * translation);
  return inv;
}

RigidTransform RigidTransform::operator*(const RigidTransform& other) const {
  RigidTransform out;
  out.rotation = rotation * other.rotation;
  out.translation = rotation * other.translation + translation;
  return out;
}

void RigidTransform::validate(double tol) const {
  if (!rotation.allFinite() || !translation.allFinite()) throw ValidationError("rigid transform is not finite");
  const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
  if (ortho > tol) throw ValidationError("rotation is not orthonormal");
  if (std::abs(rotation.determinant() - 1.0) > tol) throw ValidationError("rotation determinant is not +1");
}

Mat3 yaw_rotation(double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  Mat3 r;
  r << c, 0, s, 0, 1, 0, -s, 0, c;
  return r;
}

Mat3 axis_angle(const Vec3& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

Mat3 random_rotation(RngStream& rng) {
  Vec3 axis;
  do {
    axis = Vec3(rng.normal(), rng.normal(), rng.normal());
  } while (axis.norm() < 1e-9);
  return axis_angle(axis, rng.uniform(0.0, std::numbers::pi));
}

double geodesic_distance(const Mat3& a, const Mat3& b) {
  const Mat3 d = a.transpose() * b;
  const Vec3 skew(d(2, 1) - d(1, 2), d(0, 2) - d(2, 0), d(1, 0) - d(0, 1));
  return std::atan2(0.5 * skew.norm(), 0.5 * (d.trace() - 1.0));
}

double heading_of(const Vec2& dir) { return std::atan2(dir.x(), dir.y()); }

Vec3 joint_position(const JointFrame& frame) {
  Vec3 c = Vec3::Zero();
  for (const auto& v : frame.vertices) c += v;
  return c / static_cast<double>(kIcoVertices);
}

Mat3 joint_orientation(const JointFrame& frame, const ReferenceIcosahedron& ref) {
  const Vec3 c = joint_position(frame);
  Vec3 rc = Vec3::Zero();
  for (const auto& v : ref.vertices) rc += v;
  rc /= static_cast<double>(kIcoVertices);
  // Cross-covariance sum_i ref_i (frame_i - c)^T.
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < kIcoVertices; ++i) h += (ref.vertices[i] - rc) * (frame.vertices[i] - c).transpose();
  if (!h.allFinite()) throw DegenerateGeometryError("joint frame has non-finite vertices");
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  if (sv(0) <= 0.0 || sv(1) <= 1e-12 * sv(0))
    throw DegenerateGeometryError("joint vertices are collinear or coincident");
  const Mat3& u = svd.matrixU();
  const Mat3& v = svd.matrixV();
  Mat3 fix = Mat3::Identity();
  if ((v * u.transpose()).determinant() < 0.0) fix(2, 2) = -1.0;  // smallest singular direction
  return v * fix * u.transpose();
}

JointFrame frame_from_rigid(const RigidTransform& tf, const ReferenceIcosahedron& ref) {
  JointFrame f;
  for (std::size_t i = 0; i < kIcoVertices; ++i) f.vertices[i] = tf.apply(ref.vertices[i]);
  return f;
}

Pose pose_from_rigid(std::span<const RigidTransform> transforms, std::shared_ptr<const Skeleton> skeleton,
                     const ReferenceIcosahedron& ref) {
  if (!skeleton) skeleton = Skeleton::toy();
  if (transforms.size() != skeleton->joint_count())
    throw ShapeError("pose_from_rigid: expected " + std::to_string(skeleton->joint_count()) + " transforms");
  Pose pose{std::move(skeleton), {}};
  pose.joints.reserve(transforms.size());
  for (const auto& tf : transforms) {
    tf.validate();
    pose.joints.push_back(frame_from_rigid(tf, ref));
  }
  return pose;
}

RigidTransform joint_transform(const JointFrame& frame, const ReferenceIcosahedron& ref) {
  return RigidTransform{joint_orientation(frame, ref), joint_position(frame)};
}

Pose transform_pose(const Pose& pose, const RigidTransform& tf) {
  Pose out = pose;
  for (auto& j : out.joints)
    for (auto& v : j.vertices) v = tf.apply(v);
  return out;
}

MotionSequence transform_sequence(const MotionSequence& seq, const RigidTransform& tf) {
  MotionSequence out{seq.skeleton, {}, seq.fps};
  out.frames.reserve(seq.frames.size());
  for (const auto& p : seq.frames) out.frames.push_back(transform_pose(p, tf));
  return out;
}

HeadPoints head_points(const Pose& pose) {
  const JointFrame& head = pose.joint(pose.skeleton->head);
  const Vec3 c = joint_position(head);
  const Vec3 fwd = joint_orientation(head) * Vec3::UnitZ();
  return {c + kHeadPointOffset * fwd, c - kHeadPointOffset * fwd};
}

Vec3 facing_direction(const Pose& pose) {
  const HeadPoints h = head_points(pose);
  return (h.front - h.back).normalized();
}

double gaze_score(const Pose& pose, const Vec2& user_floor) {
  if (!user_floor.allFinite()) throw ValidationError("gaze_score: user position is not finite");
  const HeadPoints h = head_points(pose);
  const Vec3 dx = (h.front - h.back).normalized();
  const Vec3 to_user = lift(user_floor, h.back.y()) - h.back;
  const double n = to_user.norm();
  if (n < 1e-12) throw CoincidentPointsError("gaze_score: user point coincides with the head back point");
  return dx.dot(to_user / n);
}

Vec2 floor_projection(const Vec3& p) { return {p.x(), p.z()}; }

Vec3 lift(const Vec2& floor_point, double height) { return {floor_point.x(), height, floor_point.y()}; }

Vec2 transform_floor_point(const RigidTransform& tf, const Vec2& p) {
  return floor_projection(tf.apply(lift(p, 0.0)));
}

RigidTransform normalization_transform(const Pose& first, FacingPolicy policy) {
  const Vec3 pelvis = joint_position(first.joint(first.skeleton->pelvis));
  Vec2 dir = floor_projection(facing_direction(first));
  if (dir.norm() < 1e-9) {
    if (policy == FacingPolicy::kStrict)
      throw DegenerateFacingError("first-frame facing direction is vertical");
    dir = floor_projection(joint_position(first.joint(first.skeleton->head)) - pelvis);
    if (dir.norm() < 1e-9) dir = Vec2(0.0, 1.0);
  }
  RigidTransform tf;
  tf.rotation = yaw_rotation(-heading_of(dir));
  tf.translation = -(tf.rotation * Vec3(pelvis.x(), 0.0, pelvis.z()));
  return tf;
}

NormalizedSequence normalize_sequence(const MotionSequence& seq, FacingPolicy policy) {
  if (seq.frames.empty()) throw ValidationError("normalize_sequence: empty sequence");
  const RigidTransform tf = normalization_transform(seq.frames.front(), policy);
  return {transform_sequence(seq, tf), tf};
}

std::vector<double> flatten(const Pose& pose) {
  std::vector<double> out;
  out.reserve(pose.joints.size() * kIcoVertices * 3);
  for (const auto& j : pose.joints)
    for (const auto& v : j.vertices) out.insert(out.end(), {v.x(), v.y(), v.z()});
  return out;
}

void flatten_into(const Pose& pose, std::span<float> out) {
  if (out.size() != pose.joints.size() * kIcoVertices * 3) throw ShapeError("flatten_into: wrong output length");
  std::size_t k = 0;
  for (const auto& j : pose.joints)
    for (const auto& v : j.vertices)
      for (int c = 0; c < 3; ++c) out[k++] = static_cast<float>(v[c]);
}

namespace {

template <typename S>
Pose unflatten_impl(std::span<const S> values, std::shared_ptr<const Skeleton> skeleton) {
  if (!skeleton) skeleton = Skeleton::toy();
  if (values.size() != skeleton->flat_dim())
    throw ShapeError("unflatten: expected " + std::to_string(skeleton->flat_dim()) + " values, got " +
                     std::to_string(values.size()));
  Pose pose{skeleton, std::vector<JointFrame>(skeleton->joint_count())};
  std::size_t k = 0;
  for (auto& j : pose.joints)
    for (auto& v : j.vertices) {
      v = Vec3(values[k], values[k + 1], values[k + 2]);
      k += 3;
    }
  return pose;
}

}  // namespace

Pose unflatten(std::span<const double> values, std::shared_ptr<const Skeleton> skeleton) {
  return unflatten_impl(values, std::move(skeleton));
}

Pose unflatten(std::span<const float> values, std::shared_ptr<const Skeleton> skeleton) {
  return unflatten_impl(values, std::move(skeleton));
}

}  // namespace dyad::geom
