#pragma once

#include <array>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "dyad/rng.hpp"

namespace dyad::geom {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr std::size_t kIcoVertices = 12;
/// Distance of the head front/back points from the head centroid (meters).
inline constexpr double kHeadPointOffset = 0.1;

/// Canonical regular icosahedron: centered, unit circumradius, fixed order.
struct ReferenceIcosahedron {
  std::array<Vec3, kIcoVertices> vertices;
};

const ReferenceIcosahedron& reference_icosahedron();
ReferenceIcosahedron make_reference_icosahedron();

/// The 12 world-space vertices of one joint.
struct JointFrame {
  std::array<Vec3, kIcoVertices> vertices;
};

/// Joint name table with the roles the metrics and gaze logic rely on.
struct Skeleton {
  std::vector<std::string> joints;
  std::size_t pelvis = 0, head = 1, wrist_left = 2, wrist_right = 3, foot_left = 4, foot_right = 5;

  std::size_t joint_count() const { return joints.size(); }
  /// J x 12 x 3.
  std::size_t flat_dim() const { return joints.size() * kIcoVertices * 3; }
  std::size_t index_of(const std::string& name) const;

  /// pelvis, head, wrist_left, wrist_right, foot_left, foot_right.
  static std::shared_ptr<const Skeleton> toy();
  static std::shared_ptr<const Skeleton> from_names(std::vector<std::string> names);
};

struct Pose {
  std::shared_ptr<const Skeleton> skeleton;
  std::vector<JointFrame> joints;

  const JointFrame& joint(std::size_t j) const { return joints.at(j); }
};

struct MotionSequence {
  std::shared_ptr<const Skeleton> skeleton;
  std::vector<Pose> frames;
  double fps = 30.0;

  std::size_t length() const { return frames.size(); }
};

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  RigidTransform inverse() const;
  /// (this * other)(p) = this(other(p))
  RigidTransform operator*(const RigidTransform& other) const;
  /// Throws ValidationError unless the rotation is orthonormal with det +1.
  void validate(double tol = 1e-9) const;
};

// -- Rotations ---------------------------------------------------------------

/// Rotation about +y (the vertical axis) by `angle` radians.
Mat3 yaw_rotation(double angle);
Mat3 axis_angle(const Vec3& axis, double angle);
/// Random axis uniform on the sphere, angle uniform in [0, pi].
Mat3 random_rotation(RngStream& rng);
/// Angle of a^T b, computed with atan2 so it stays accurate near zero.
double geodesic_distance(const Mat3& a, const Mat3& b);
/// Yaw angle of a floor direction (x, z); 0 is +z.
double heading_of(const Vec2& dir);

// -- Joint representation ----------------------------------------------------

/// Centroid of the 12 vertices.
Vec3 joint_position(const JointFrame& frame);
/// Orthogonal Procrustes rotation taking the reference onto the centered
/// frame, with the determinant forced to +1. Throws DegenerateGeometryError
/// when the vertices are collinear or coincident.
Mat3 joint_orientation(const JointFrame& frame, const ReferenceIcosahedron& ref = reference_icosahedron());
JointFrame frame_from_rigid(const RigidTransform& tf, const ReferenceIcosahedron& ref = reference_icosahedron());
Pose pose_from_rigid(std::span<const RigidTransform> transforms, std::shared_ptr<const Skeleton> skeleton,
                     const ReferenceIcosahedron& ref = reference_icosahedron());
RigidTransform joint_transform(const JointFrame& frame, const ReferenceIcosahedron& ref = reference_icosahedron());

Pose transform_pose(const Pose& pose, const RigidTransform& tf);
MotionSequence transform_sequence(const MotionSequence& seq, const RigidTransform& tf);

// -- Gaze --------------------------------------------------------------------

struct HeadPoints {
  Vec3 front;
  Vec3 back;
};

HeadPoints head_points(const Pose& pose);
/// Unit vector from the back to the front of the head.
Vec3 facing_direction(const Pose& pose);
/// d_x . d_y with the user point lifted to the height of the head back point.
double gaze_score(const Pose& pose, const Vec2& user_floor);

/// (x, y, z) -> (x, z); y is up.
Vec2 floor_projection(const Vec3& p);
Vec3 lift(const Vec2& floor_point, double height);
/// Applies a yaw + horizontal transform to a floor point.
Vec2 transform_floor_point(const RigidTransform& tf, const Vec2& p);

// -- Normalization -----------------------------------------------------------

enum class FacingPolicy {
  kFallback,  // vertical facing falls back to pelvis->head offset, then +z
  kStrict,    // vertical facing throws DegenerateFacingError
};

struct NormalizedSequence {
  MotionSequence sequence;
  /// Maps original world coordinates into the normalized frame.
  RigidTransform transform;
};

/// Yaw + horizontal translation placing the first-frame pelvis at the floor
/// origin with its facing direction along +z.
NormalizedSequence normalize_sequence(const MotionSequence& seq, FacingPolicy policy = FacingPolicy::kFallback);
RigidTransform normalization_transform(const Pose& first, FacingPolicy policy = FacingPolicy::kFallback);

// -- Flattening ----------------------------------------------------------------

/// Joint-major, then vertex, then coordinate.
std::vector<double> flatten(const Pose& pose);
void flatten_into(const Pose& pose, std::span<float> out);
Pose unflatten(std::span<const double> values, std::shared_ptr<const Skeleton> skeleton);
Pose unflatten(std::span<const float> values, std::shared_ptr<const Skeleton> skeleton);

}  // namespace dyad::geom
