#pragma once

#include "segs/common.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>

namespace segs {

/// Pinhole intrinsics. Pixel centers sit at integer coordinates, so the
/// principal point of a W x H image with a centered axis is ((W-1)/2, (H-1)/2).
struct PinholeCamera {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw InvalidInput("camera: focal lengths must be positive");
    if (width < 1 || height < 1) throw InvalidInput("camera: image size must be at least 1x1");
  }
};

/// World-to-camera rigid transform: x_cam = R * x_world + t.
struct CameraPose {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  Vec3 transform(const Vec3& p) const { return R * p + t; }
  /// Camera center in world coordinates.
  Vec3 center() const { return -R.transpose() * t; }

  CameraPose inverse() const {
    CameraPose inv;
    inv.R = R.transpose();
    inv.t = -inv.R * t;
    return inv;
  }

  bool is_valid(double tol = 1e-9) const {
    if (!R.allFinite() || !t.allFinite()) return false;
    if ((R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff() > tol) return false;
    return std::abs(R.determinant() - 1.0) <= tol;
  }

  void validate() const {
    if (!is_valid()) throw InvalidInput("pose: rotation is not orthonormal with det 1");
  }
};

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

/// Rotation matrix of a quaternion (w, x, y, z); the input is normalized first.
inline Mat3 quat_to_rotation(const Vec4& q) {
  const double n = q.norm();
  if (n == 0.0) return Mat3::Identity();
  Eigen::Quaterniond e(q[0] / n, q[1] / n, q[2] / n, q[3] / n);
  return e.toRotationMatrix();
}

/// Unit quaternion (w, x, y, z) with w >= 0 so the encoding is single-valued.
inline Vec4 rotation_to_quat(const Mat3& R) {
  Eigen::Quaterniond e(R);
  e.normalize();
  Vec4 q(e.w(), e.x(), e.y(), e.z());
  if (q[0] < 0.0) q = -q;
  return q;
}

/// Rodrigues formula.
inline Mat3 so3_exp(const Vec3& w) {
  const double theta = w.norm();
  if (theta < 1e-12) return Mat3::Identity() + skew(w);
  return Eigen::AngleAxisd(theta, w / theta).toRotationMatrix();
}

inline Vec3 so3_log(const Mat3& R) {
  Eigen::AngleAxisd aa(R);
  return aa.angle() * aa.axis();
}

/// Geodesic angle between two rotations, radians.
inline double rotation_angle_between(const Mat3& a, const Mat3& b) {
  const double c = std::clamp(((a.transpose() * b).trace() - 1.0) * 0.5, -1.0, 1.0);
  return std::acos(c);
}

/// Pose of a camera at `eye` looking at `target`. Camera axes follow the
/// usual vision convention: +z forward, +x right, +y down.
inline CameraPose look_at(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3(0, 0, 1)) {
  const Vec3 z = (target - eye).normalized();
  Vec3 x = z.cross(up);
  if (x.norm() < 1e-9) x = z.cross(Vec3(0, 1, 0));
  x.normalize();
  const Vec3 y = z.cross(x);
  CameraPose pose;
  pose.R.row(0) = x.transpose();
  pose.R.row(1) = y.transpose();
  pose.R.row(2) = z.transpose();
  pose.t = -pose.R * eye;
  return pose;
}

}  // namespace segs
