#pragma once

#include "segs/datakit.hpp"
#include "segs/geometry.hpp"

#include <algorithm>
#include <random>

namespace segs::testing {

/// max(rotation angle, translation distance) between two poses.
inline double pose_error(const CameraPose& a, const CameraPose& b) {
  return std::max(rotation_angle_between(a.R, b.R), (a.t - b.t).norm());
}

struct MotionOnlyCase {
  BAInstance inst;
  int pose_id = 0;
  CameraPose initial;
};

/// One free camera against fixed true points; the start pose is off by
/// ~3 degrees and 5 cm.
inline MotionOnlyCase motion_only_case(std::uint64_t seed, double outlier_fraction, double noise_sigma = 0.0) {
  BAInstanceSpec spec;
  spec.n_keyframes = 1;
  spec.n_points = 120;
  spec.outlier_fraction = outlier_fraction;
  spec.noise_sigma = noise_sigma;
  spec.seed = seed;
  MotionOnlyCase c;
  c.inst = make_ba_instance(spec);
  c.pose_id = c.inst.problem.poses.begin()->first;
  std::mt19937_64 rng(mix_seed(seed, 0x9E57));
  c.initial = perturb_pose(c.inst.true_poses.at(c.pose_id), 0.05, 0.05, rng);
  return c;
}

/// Finite-difference check of the pose Jacobian of one residual; returns
/// the largest relative error over the 12 entries. Central differences at
/// h, h/2 and h/4 go through two rounds of Richardson extrapolation, which
/// keeps rounding noise (residuals are hundreds of pixels) out of small
/// entries.
inline double pose_jacobian_rel_error(const CameraPose& pose, const Vec3& point, const Vec2& obs, double sigma,
                                      const PinholeCamera& cam, double h = 1e-3) {
  const auto rj = residual_jacobian(pose, point, obs, sigma, cam);
  if (!rj) return 0.0;
  double worst = 0.0;
  for (int k = 0; k < 6; ++k) {
    auto central = [&](double step) {
      Eigen::Matrix<double, 6, 1> d = Eigen::Matrix<double, 6, 1>::Zero();
      d[k] = step;
      const auto p = residual_jacobian(apply_pose_increment(pose, d), point, obs, sigma, cam);
      d[k] = -step;
      const auto m = residual_jacobian(apply_pose_increment(pose, d), point, obs, sigma, cam);
      return Vec2((p->residual - m->residual) / (2 * step));
    };
    const Vec2 d1 = central(h), d2 = central(0.5 * h), d4 = central(0.25 * h);
    const Vec2 r12 = (4.0 * d2 - d1) / 3.0, r24 = (4.0 * d4 - d2) / 3.0;
    const Vec2 fd = (16.0 * r24 - r12) / 15.0;
    for (int r = 0; r < 2; ++r) {
      const double a = rj->d_pose(r, k), f = fd[r];
      const double den = std::max(std::abs(a), std::abs(f));
      if (den > 1e-9) worst = std::max(worst, std::abs(a - f) / den);
    }
  }
  return worst;
}

}  // namespace segs::testing
