#pragma once

// Dual-rotation capture rig: a camera-object rig that rotates about a horizontal axis and a
// turntable that rotates the object about the vertical axis. The camera is fixed relative to
// the rig, so every frame can be re-expressed as a static object seen along an "equivalent
// ray" under an environment light queried in a rotated frame.

#include <array>
#include <vector>

#include "rmvps/common.hpp"

namespace rmvps {

/// Proper 3x3 rotation. Construction validates orthonormality and det = +1.
class Rotation {
 public:
  Rotation() : m_(Mat3::Identity()) {}

  /// Validates `m` against R*R^T = I and det(R) = +1 within `tolerance`.
  static Rotation from_matrix(const Mat3& m, double tolerance = 1e-9);
  static Rotation from_row_major(const std::array<double, 9>& values, double tolerance = 1e-9);

  const Mat3& matrix() const { return m_; }
  Rotation transposed() const { return Rotation(m_.transpose(), Unchecked{}); }
  std::array<double, 9> row_major() const;

  Vec3 operator*(const Vec3& v) const { return m_ * v; }
  Rotation operator*(const Rotation& other) const { return Rotation(m_ * other.m_, Unchecked{}); }

 private:
  struct Unchecked {};
  Rotation(const Mat3& m, Unchecked) : m_(m) {}
  friend Rotation rotation_about_axis(const Vec3& axis, double angle_deg);

  Mat3 m_;
};

/// Rodrigues rotation by `angle_deg` degrees about the unit vector `axis`.
/// Throws ValidationError when |axis| deviates from 1 by more than 1e-6.
Rotation rotation_about_axis(const Vec3& axis, double angle_deg);

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();

  /// Normalizes `direction`; throws ValidationError for a zero or non-finite direction.
  static Ray make(const Vec3& origin, const Vec3& direction);
};

/// Rotation axes of the rig and of the turntable, both through the object center at the origin.
struct RigAxes {
  Vec3 rig = Vec3::UnitY();
  Vec3 turntable = Vec3::UnitZ();
};

struct RigPose {
  int rig_step = 1;        // m, 1-based
  int turntable_step = 1;  // n, 1-based
  double rig_angle_deg = 0.0;
  double turntable_angle_deg = 0.0;
  Rotation rig;        // R_a
  Rotation turntable;  // R_b

  static RigPose identity() { return {}; }
  static RigPose make(int rig_step, int turntable_step, double rig_angle_deg,
                      double turntable_angle_deg, const RigAxes& axes = {});

  /// R_a * R_b: maps an object-frame light direction to the world frame of the environment.
  Rotation light_frame() const { return rig * turntable; }
};

/// o' = R_b^T o, d' = R_b^T d (direction re-normalized).
Ray equivalent_ray(const Ray& ray, const Rotation& turntable);

/// w' = R_a R_b w.
Vec3 world_light_direction(const Vec3& direction, const RigPose& pose);

struct CaptureSchedule {
  int rig_steps = 1;        // M
  int turntable_steps = 1;  // N
  double rig_step_deg = 0.0;
  double turntable_step_deg = 0.0;
  RigAxes axes;
  std::vector<RigPose> poses;  // m outer, n inner

  /// Pose for 1-based (m, n).
  const RigPose& at(int rig_step, int turntable_step) const;
  std::size_t size() const { return poses.size(); }
};

CaptureSchedule build_schedule(int rig_steps, int turntable_steps, double rig_step_deg,
                               double turntable_step_deg, const RigAxes& axes = {});

}  // namespace rmvps
