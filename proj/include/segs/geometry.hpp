#pragma once

// Robust bundle adjustment (motion-only, local, global) with
// Levenberg-Marquardt, linear triangulation, and trajectory error.

#include "segs/camera.hpp"

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <vector>

namespace segs {

struct Observation {
  int keyframe = 0;
  int point = 0;
  Vec2 pixel = Vec2::Zero();
  int level = 0;  // image pyramid level of the keypoint
};

struct BAProblem {
  std::map<int, CameraPose> poses;
  std::map<int, Vec3> points;
  std::vector<Observation> observations;
  PinholeCamera camera;
  std::set<int> fixed_pose_ids;

  void validate() const {
    for (const auto& o : observations) {
      if (!poses.contains(o.keyframe)) throw InvalidInput("ba: observation references unknown pose " + std::to_string(o.keyframe));
      if (!points.contains(o.point)) throw InvalidInput("ba: observation references unknown point " + std::to_string(o.point));
      if (!o.pixel.allFinite()) throw InvalidInput("ba: non-finite observation");
    }
  }
};

struct RobustConfig {
  double huber_delta = std::sqrt(5.991);  // whitened units, chi2(2) at 95%
  double sigma_base = 1.0;                // px
  double level_factor = 1.2;
  bool use_huber = true;

  double sigma(int level) const { return sigma_base * std::pow(level_factor, level); }
};

struct LMConfig {
  int max_iterations = 100;
  double initial_lambda = 1e-4;
  double lambda_factor = 10.0;
  double max_lambda = 1e12;
  double step_tolerance = 1e-10;
};

struct BAReport {
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int iterations = 0;
  bool converged = false;
  bool diverged = false;       // damping hit its cap without an accepted step
  bool rank_deficient = false;
  int excluded_observations = 0;  // non-positive depth at the start
  std::vector<double> accepted_costs;  // cost after every accepted step, starting with the initial cost
};

/// Pinhole projection of R P + t; nullopt for non-positive depth.
inline std::optional<Vec2> reproject(const CameraPose& pose, const Vec3& point, const PinholeCamera& cam) {
  const Vec3 p = pose.transform(point);
  if (!(p.z() > 0.0)) return std::nullopt;
  return Vec2(cam.fx * p.x() / p.z() + cam.cx, cam.fy * p.y() / p.z() + cam.cy);
}

/// Robust cost rho(e^2) and its IRLS weight rho'(e^2).
inline double robust_cost(double e2, const RobustConfig& rc, double* weight = nullptr) {
  if (!rc.use_huber || e2 <= rc.huber_delta * rc.huber_delta) {
    if (weight) *weight = 1.0;
    return e2;
  }
  const double e = std::sqrt(e2);
  if (weight) *weight = rc.huber_delta / e;
  return 2.0 * rc.huber_delta * e - rc.huber_delta * rc.huber_delta;
}

/// Whitened residual (p_obs - pi(R P + t)) / sigma and its Jacobians with
/// respect to the left pose increment (omega, v), R' = Exp(omega) R,
/// t' = t + v, and to the point.
struct ResidualJacobian {
  Vec2 residual;
  Eigen::Matrix<double, 2, 6> d_pose;
  Eigen::Matrix<double, 2, 3> d_point;
};

inline std::optional<ResidualJacobian> residual_jacobian(const CameraPose& pose, const Vec3& point,
                                                         const Vec2& observed, double sigma,
                                                         const PinholeCamera& cam) {
  const Vec3 rp = pose.R * point;
  const Vec3 p = rp + pose.t;
  if (!(p.z() > 0.0)) return std::nullopt;
  const double iz = 1.0 / p.z();
  ResidualJacobian r;
  const Vec2 proj(cam.fx * p.x() * iz + cam.cx, cam.fy * p.y() * iz + cam.cy);
  r.residual = (observed - proj) / sigma;
  Eigen::Matrix<double, 2, 3> dpi;
  dpi << cam.fx * iz, 0.0, -cam.fx * p.x() * iz * iz, 0.0, cam.fy * iz, -cam.fy * p.y() * iz * iz;
  const Eigen::Matrix<double, 2, 3> dr_dp = -dpi / sigma;
  r.d_pose.leftCols<3>() = dr_dp * (-skew(rp));
  r.d_pose.rightCols<3>() = dr_dp;
  r.d_point = dr_dp * pose.R;
  return r;
}

inline CameraPose apply_pose_increment(const CameraPose& pose, const Eigen::Matrix<double, 6, 1>& delta) {
  CameraPose out;
  out.R = so3_exp(delta.head<3>()) * pose.R;
  out.t = pose.t + delta.tail<3>();
  return out;
}

namespace detail {

// Generic dense LM over a subset of poses and points of a problem.
class BundleSolver {
 public:
  BundleSolver(const BAProblem& problem, const std::set<int>& free_poses, const std::set<int>& free_points,
               const std::set<int>& active_poses, const RobustConfig& rc, const LMConfig& lm)
      : problem_(problem), rc_(rc), lm_(lm) {
    int offset = 0;
    for (int id : free_poses) {
      pose_index_[id] = offset;
      offset += 6;
    }
    for (int id : free_points) {
      point_index_[id] = offset;
      offset += 3;
    }
    dim_ = offset;
    poses_ = problem.poses;
    points_ = problem.points;
    for (std::size_t i = 0; i < problem.observations.size(); ++i) {
      const Observation& o = problem.observations[i];
      if (!active_poses.contains(o.keyframe)) continue;
      const bool touches = pose_index_.contains(o.keyframe) || point_index_.contains(o.point);
      if (!touches) continue;
      if (!reproject(poses_.at(o.keyframe), points_.at(o.point), problem.camera)) {
        ++excluded_;
        continue;
      }
      used_.push_back(i);
    }
  }

  int dimension() const { return dim_; }
  std::size_t residual_count() const { return used_.size(); }

  BAReport run() {
    BAReport rep;
    rep.excluded_observations = excluded_;
    double cost = evaluate(poses_, points_);
    rep.initial_cost = cost;
    rep.accepted_costs.push_back(cost);
    double lambda = lm_.initial_lambda;
    if (dim_ == 0) {
      rep.converged = true;
      rep.final_cost = cost;
      return rep;
    }
    for (int it = 0; it < lm_.max_iterations; ++it) {
      rep.iterations = it + 1;
      MatX H;
      VecX g;
      linearize(H, g);
      if (it == 0) rep.rank_deficient = rank_deficient(H);
      bool accepted = false;
      while (!accepted) {
        MatX A = H;
        A.diagonal().array() += lambda;
        const VecX delta = A.ldlt().solve(-g);
        if (!delta.allFinite()) {
          lambda *= lm_.lambda_factor;
        } else {
          if (delta.norm() < lm_.step_tolerance) {
            rep.converged = true;
            rep.final_cost = cost;
            return rep;
          }
          auto cand_poses = poses_;
          auto cand_points = points_;
          apply(delta, cand_poses, cand_points);
          const double c = evaluate(cand_poses, cand_points);
          if (c < cost) {
            poses_ = std::move(cand_poses);
            points_ = std::move(cand_points);
            cost = c;
            rep.accepted_costs.push_back(c);
            lambda = std::max(lambda / lm_.lambda_factor, 1e-15);
            accepted = true;
            break;
          }
          lambda *= lm_.lambda_factor;
        }
        if (lambda > lm_.max_lambda) {
          // No decrease even under heavy damping: at a minimum to working
          // precision, or diverging. Either way keep the best state.
          rep.final_cost = cost;
          rep.diverged = !(cost <= std::numeric_limits<double>::min()) && !small_gradient(g);
          rep.converged = !rep.diverged;
          return rep;
        }
      }
    }
    rep.final_cost = cost;
    return rep;
  }

  const std::map<int, CameraPose>& poses() const { return poses_; }
  const std::map<int, Vec3>& points() const { return points_; }

 private:
  double evaluate(const std::map<int, CameraPose>& poses, const std::map<int, Vec3>& points) const {
    double cost = 0.0;
    for (std::size_t i : used_) {
      const Observation& o = problem_.observations[i];
      const auto proj = reproject(poses.at(o.keyframe), points.at(o.point), problem_.camera);
      if (!proj) return std::numeric_limits<double>::infinity();
      const Vec2 r = (o.pixel - *proj) / rc_.sigma(o.level);
      cost += robust_cost(r.squaredNorm(), rc_);
    }
    return cost;
  }

  void linearize(MatX& H, VecX& g) const {
    H = MatX::Zero(dim_, dim_);
    g = VecX::Zero(dim_);
    for (std::size_t i : used_) {
      const Observation& o = problem_.observations[i];
      const auto rj = residual_jacobian(poses_.at(o.keyframe), points_.at(o.point), o.pixel, rc_.sigma(o.level),
                                        problem_.camera);
      if (!rj) continue;
      double w = 1.0;
      robust_cost(rj->residual.squaredNorm(), rc_, &w);
      const auto pi = pose_index_.find(o.keyframe);
      const auto qi = point_index_.find(o.point);
      if (pi != pose_index_.end()) {
        const int a = pi->second;
        H.block<6, 6>(a, a) += w * rj->d_pose.transpose() * rj->d_pose;
        g.segment<6>(a) += w * rj->d_pose.transpose() * rj->residual;
      }
      if (qi != point_index_.end()) {
        const int b = qi->second;
        H.block<3, 3>(b, b) += w * rj->d_point.transpose() * rj->d_point;
        g.segment<3>(b) += w * rj->d_point.transpose() * rj->residual;
      }
      if (pi != pose_index_.end() && qi != point_index_.end()) {
        const Eigen::Matrix<double, 6, 3> c = w * rj->d_pose.transpose() * rj->d_point;
        H.block<6, 3>(pi->second, qi->second) += c;
        H.block<3, 6>(qi->second, pi->second) += c.transpose();
      }
    }
  }

  static bool rank_deficient(const MatX& H) {
    Eigen::SelfAdjointEigenSolver<MatX> es(H, Eigen::EigenvaluesOnly);
    const VecX ev = es.eigenvalues();
    const double top = ev.cwiseAbs().maxCoeff();
    return top == 0.0 || ev.minCoeff() <= 1e-12 * top;
  }

  static bool small_gradient(const VecX& g) { return g.lpNorm<Eigen::Infinity>() < 1e-9; }

  void apply(const VecX& delta, std::map<int, CameraPose>& poses, std::map<int, Vec3>& points) const {
    for (const auto& [id, off] : pose_index_)
      poses[id] = apply_pose_increment(poses[id], delta.segment<6>(off));
    for (const auto& [id, off] : point_index_) points[id] += delta.segment<3>(off);
  }

  const BAProblem& problem_;
  RobustConfig rc_;
  LMConfig lm_;
  std::map<int, int> pose_index_;
  std::map<int, int> point_index_;
  int dim_ = 0;
  int excluded_ = 0;
  std::vector<std::size_t> used_;
  std::map<int, CameraPose> poses_;
  std::map<int, Vec3> points_;
};

}  // namespace detail

/// Motion-only BA: refines one pose against fixed points.
inline CameraPose motion_only_ba(const BAProblem& problem, int pose_id, const CameraPose& initial,
                                 const RobustConfig& rc = {}, const LMConfig& lm = {}, BAReport* report = nullptr) {
  problem.validate();
  BAProblem local = problem;
  local.poses[pose_id] = initial;
  int usable = 0;
  for (const auto& o : local.observations)
    if (o.keyframe == pose_id && reproject(initial, local.points.at(o.point), local.camera)) ++usable;
  if (usable < 6) throw InvalidInput("motion_only_ba: fewer than 6 usable observations");
  detail::BundleSolver solver(local, {pose_id}, {}, {pose_id}, rc, lm);
  BAReport rep = solver.run();
  if (report) *report = rep;
  return solver.poses().at(pose_id);
}

/// Local BA over `window` keyframes and every point they observe. Other
/// keyframes observing those points contribute with fixed poses. The first
/// window pose is held fixed unless at least two fixed poses already
/// observe the window's points.
inline BAReport local_ba(BAProblem& problem, const std::vector<int>& window, const RobustConfig& rc = {},
                         const LMConfig& lm = {}) {
  problem.validate();
  if (window.empty()) throw InvalidInput("local_ba: empty window");
  std::set<int> win(window.begin(), window.end());
  std::set<int> points;
  for (const auto& o : problem.observations)
    if (win.contains(o.keyframe)) points.insert(o.point);
  std::set<int> fixed_observers;
  for (const auto& o : problem.observations)
    if (points.contains(o.point) && (!win.contains(o.keyframe) || problem.fixed_pose_ids.contains(o.keyframe)))
      fixed_observers.insert(o.keyframe);
  std::set<int> free_poses;
  for (int id : win)
    if (!problem.fixed_pose_ids.contains(id)) free_poses.insert(id);
  if (fixed_observers.size() < 2) free_poses.erase(window.front());
  std::set<int> active = win;
  active.insert(fixed_observers.begin(), fixed_observers.end());
  detail::BundleSolver solver(problem, free_poses, points, active, rc, lm);
  BAReport rep = solver.run();
  for (const auto& [id, p] : solver.poses())
    if (free_poses.contains(id)) problem.poses[id] = p;
  for (int id : points) problem.points[id] = solver.points().at(id);
  return rep;
}

/// Global BA: every keyframe and point; the fixed poses (or, if none are
/// marked, the first keyframe) anchor the gauge.
inline BAReport global_ba(BAProblem& problem, const RobustConfig& rc = {}, const LMConfig& lm = {}) {
  problem.validate();
  if (problem.poses.empty()) throw InvalidInput("global_ba: no poses");
  std::set<int> free_poses;
  for (const auto& [id, p] : problem.poses)
    if (!problem.fixed_pose_ids.contains(id)) free_poses.insert(id);
  if (problem.fixed_pose_ids.empty()) free_poses.erase(problem.poses.begin()->first);
  std::set<int> points;
  for (const auto& [id, p] : problem.points) points.insert(id);
  std::set<int> active;
  for (const auto& [id, p] : problem.poses) active.insert(id);
  detail::BundleSolver solver(problem, free_poses, points, active, rc, lm);
  BAReport rep = solver.run();
  for (int id : free_poses) problem.poses[id] = solver.poses().at(id);
  for (int id : points) problem.points[id] = solver.points().at(id);
  return rep;
}

/// Robust cost of the whole problem at its current estimate.
inline double total_cost(const BAProblem& problem, const RobustConfig& rc = {}) {
  double cost = 0.0;
  for (const auto& o : problem.observations) {
    const auto proj = reproject(problem.poses.at(o.keyframe), problem.points.at(o.point), problem.camera);
    if (!proj) continue;
    cost += robust_cost(((o.pixel - *proj) / rc.sigma(o.level)).squaredNorm(), rc);
  }
  return cost;
}

inline double mean_reprojection_error(const BAProblem& problem) {
  double s = 0.0;
  int n = 0;
  for (const auto& o : problem.observations) {
    const auto proj = reproject(problem.poses.at(o.keyframe), problem.points.at(o.point), problem.camera);
    if (!proj) continue;
    s += (o.pixel - *proj).norm();
    ++n;
  }
  return n ? s / n : 0.0;
}

/// Linear (DLT) triangulation of a point from its observations.
inline std::optional<Vec3> triangulate(const BAProblem& problem, int point_id) {
  std::vector<const Observation*> obs;
  for (const auto& o : problem.observations)
    if (o.point == point_id) obs.push_back(&o);
  if (obs.size() < 2) return std::nullopt;
  Eigen::Matrix3d K;
  K << problem.camera.fx, 0, problem.camera.cx, 0, problem.camera.fy, problem.camera.cy, 0, 0, 1;
  MatX A(2 * obs.size(), 4);
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const CameraPose& pose = problem.poses.at(obs[i]->keyframe);
    Eigen::Matrix<double, 3, 4> Rt;
    Rt.leftCols<3>() = pose.R;
    Rt.col(3) = pose.t;
    const Eigen::Matrix<double, 3, 4> P = K * Rt;
    A.row(2 * i) = obs[i]->pixel.x() * P.row(2) - P.row(0);
    A.row(2 * i + 1) = obs[i]->pixel.y() * P.row(2) - P.row(1);
  }
  Eigen::JacobiSVD<MatX> svd(A, Eigen::ComputeFullV);
  const Eigen::Vector4d X = svd.matrixV().col(3);
  if (std::abs(X[3]) < 1e-15) return std::nullopt;
  return Vec3(X.head<3>() / X[3]);
}

// ---------------------------------------------------------------------------
// Trajectory error

struct Alignment {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();
  double scale = 1.0;
};

/// Closed-form alignment of `est` camera centers onto `gt` (least squares),
/// optionally with scale.
inline Alignment align_trajectories(const std::vector<Vec3>& est, const std::vector<Vec3>& gt, bool with_scale) {
  Eigen::Matrix3Xd src(3, est.size()), dst(3, gt.size());
  for (std::size_t i = 0; i < est.size(); ++i) {
    src.col(static_cast<Eigen::Index>(i)) = est[i];
    dst.col(static_cast<Eigen::Index>(i)) = gt[i];
  }
  const Eigen::Matrix4d T = Eigen::umeyama(src, dst, with_scale);
  Alignment a;
  const Mat3 sR = T.topLeftCorner<3, 3>();
  a.scale = with_scale ? std::cbrt(sR.determinant()) : 1.0;
  a.R = sR / a.scale;
  a.t = T.topRightCorner<3, 1>();
  return a;
}

/// ATE RMSE in centimeters after aligning estimated camera centers to ground truth.
inline double ate_rmse(const std::vector<CameraPose>& est, const std::vector<CameraPose>& gt, bool with_scale = false) {
  if (est.size() != gt.size()) throw InvalidInput("ate_rmse: trajectories differ in length");
  if (est.size() < 3) throw InvalidInput("ate_rmse: need at least 3 poses");
  std::vector<Vec3> pe, pg;
  for (std::size_t i = 0; i < est.size(); ++i) {
    pe.push_back(est[i].center());
    pg.push_back(gt[i].center());
  }
  const Alignment a = align_trajectories(pe, pg, with_scale);
  double s = 0.0;
  for (std::size_t i = 0; i < pe.size(); ++i) s += (pg[i] - (a.scale * a.R * pe[i] + a.t)).squaredNorm();
  return 100.0 * std::sqrt(s / static_cast<double>(pe.size()));
}

}  // namespace segs
