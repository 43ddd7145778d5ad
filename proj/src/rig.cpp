#include "rmvps/rig.hpp"

#include <cmath>
#include <sstream>

namespace rmvps {

Rotation Rotation::from_matrix(const Mat3& m, double tolerance) {
  if (!m.allFinite()) {
    throw ValidationError("rotation contains non-finite entries");
  }
  const Mat3 residual = m * m.transpose() - Mat3::Identity();
  if (residual.cwiseAbs().maxCoeff() > tolerance) {
    throw ValidationError("rotation is not orthonormal (max |R R^T - I| = " +
                          std::to_string(residual.cwiseAbs().maxCoeff()) + ")");
  }
  const double det = m.determinant();
  if (std::abs(det - 1.0) > tolerance) {
    throw ValidationError("rotation determinant is " + std::to_string(det) + ", expected +1");
  }
  return Rotation(m, Unchecked{});
}

Rotation Rotation::from_row_major(const std::array<double, 9>& values, double tolerance) {
  Mat3 m;
  m << values[0], values[1], values[2], values[3], values[4], values[5], values[6], values[7],
      values[8];
  return from_matrix(m, tolerance);
}

std::array<double, 9> Rotation::row_major() const {
  return {m_(0, 0), m_(0, 1), m_(0, 2), m_(1, 0), m_(1, 1), m_(1, 2), m_(2, 0), m_(2, 1), m_(2, 2)};
}

Rotation rotation_about_axis(const Vec3& axis, double angle_deg) {
  if (!axis.allFinite() || std::abs(axis.norm() - 1.0) > 1e-6) {
    std::ostringstream msg;
    msg << "rotation axis must be a unit vector, got norm " << axis.norm();
    throw ValidationError(msg.str());
  }
  const Vec3 k = axis.normalized();
  const double theta = deg_to_rad(angle_deg);
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  Mat3 cross;
  cross << 0.0, -k.z(), k.y(), k.z(), 0.0, -k.x(), -k.y(), k.x(), 0.0;
  const Mat3 m = c * Mat3::Identity() + s * cross + (1.0 - c) * (k * k.transpose());
  return Rotation(m, Rotation::Unchecked{});
}

Ray Ray::make(const Vec3& origin, const Vec3& direction) {
  const double len = direction.norm();
  if (!origin.allFinite() || !direction.allFinite() || len <= 0.0) {
    throw ValidationError("ray needs a finite origin and a non-zero finite direction");
  }
  return Ray{origin, direction / len};
}

RigPose RigPose::make(int rig_step, int turntable_step, double rig_angle_deg,
                      double turntable_angle_deg, const RigAxes& axes) {
  RigPose pose;
  pose.rig_step = rig_step;
  pose.turntable_step = turntable_step;
  pose.rig_angle_deg = rig_angle_deg;
  pose.turntable_angle_deg = turntable_angle_deg;
  pose.rig = rotation_about_axis(axes.rig, rig_angle_deg);
  pose.turntable = rotation_about_axis(axes.turntable, turntable_angle_deg);
  return pose;
}

Ray equivalent_ray(const Ray& ray, const Rotation& turntable) {
  const Mat3 rt = turntable.matrix().transpose();
  return Ray{rt * ray.origin, (rt * ray.direction).normalized()};
}

Vec3 world_light_direction(const Vec3& direction, const RigPose& pose) {
  return (pose.rig.matrix() * (pose.turntable.matrix() * direction)).normalized();
}

const RigPose& CaptureSchedule::at(int rig_step, int turntable_step) const {
  if (rig_step < 1 || rig_step > rig_steps || turntable_step < 1 ||
      turntable_step > turntable_steps) {
    throw ValidationError("pose index out of range");
  }
  return poses[static_cast<std::size_t>((rig_step - 1) * turntable_steps + (turntable_step - 1))];
}

CaptureSchedule build_schedule(int rig_steps, int turntable_steps, double rig_step_deg,
                               double turntable_step_deg, const RigAxes& axes) {
  if (rig_steps < 1 || turntable_steps < 1) {
    throw ValidationError("capture schedule needs at least one rig step and one turntable step");
  }
  CaptureSchedule schedule;
  schedule.rig_steps = rig_steps;
  schedule.turntable_steps = turntable_steps;
  schedule.rig_step_deg = rig_step_deg;
  schedule.turntable_step_deg = turntable_step_deg;
  schedule.axes = axes;
  schedule.poses.reserve(static_cast<std::size_t>(rig_steps) * turntable_steps);
  for (int m = 1; m <= rig_steps; ++m) {
    for (int n = 1; n <= turntable_steps; ++n) {
      schedule.poses.push_back(RigPose::make(m, n, (m - 1) * rig_step_deg,
                                             (n - 1) * turntable_step_deg, axes));
    }
  }
  return schedule;
}

}  // namespace rmvps
