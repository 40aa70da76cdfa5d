#include "segs/geometry.hpp"
#include "segs/io.hpp"

#include "support/ba_cases.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

using namespace segs;
using segs::testing::motion_only_case;
using segs::testing::pose_error;

namespace {

// Horn's closed-form absolute orientation via the 4x4 quaternion matrix; an
// independent route to the same rigid alignment as umeyama.
double horn_ate_cm(const std::vector<Vec3>& est, const std::vector<Vec3>& gt) {
  Vec3 ce = Vec3::Zero(), cg = Vec3::Zero();
  for (std::size_t i = 0; i < est.size(); ++i) ce += est[i], cg += gt[i];
  ce /= est.size();
  cg /= gt.size();
  Mat3 S = Mat3::Zero();
  for (std::size_t i = 0; i < est.size(); ++i) S += (est[i] - ce) * (gt[i] - cg).transpose();
  Eigen::Matrix4d N;
  N << S(0, 0) + S(1, 1) + S(2, 2), S(1, 2) - S(2, 1), S(2, 0) - S(0, 2), S(0, 1) - S(1, 0),
      S(1, 2) - S(2, 1), S(0, 0) - S(1, 1) - S(2, 2), S(0, 1) + S(1, 0), S(2, 0) + S(0, 2),
      S(2, 0) - S(0, 2), S(0, 1) + S(1, 0), -S(0, 0) + S(1, 1) - S(2, 2), S(1, 2) + S(2, 1),
      S(0, 1) - S(1, 0), S(2, 0) + S(0, 2), S(1, 2) + S(2, 1), -S(0, 0) - S(1, 1) + S(2, 2);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> es(N);
  const Eigen::Vector4d q = es.eigenvectors().col(3);
  const Mat3 R = Eigen::Quaterniond(q[0], q[1], q[2], q[3]).toRotationMatrix();
  double s = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i) s += (gt[i] - (R * (est[i] - ce) + cg)).squaredNorm();
  return 100.0 * std::sqrt(s / est.size());
}

std::vector<CameraPose> wobbly_trajectory(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> n01;
  std::vector<CameraPose> t;
  for (int i = 0; i < n; ++i) {
    const double a = 0.3 * i;
    t.push_back(look_at(Vec3(2 * std::cos(a), 2 * std::sin(a), 0.2 * i) + 0.05 * Vec3(n01(rng), n01(rng), n01(rng)),
                        Vec3::Zero()));
  }
  return t;
}

CameraPose rigid(std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  CameraPose g;
  g.R = so3_exp(Vec3(n01(rng), n01(rng), n01(rng)));
  g.t = Vec3(n01(rng), n01(rng), n01(rng));
  return g;
}

// World change x' = g x applied to camera poses: T' = T g^-1.
CameraPose move_world(const CameraPose& T, const CameraPose& g, double scale = 1.0) {
  CameraPose out;
  out.R = T.R * g.R.transpose();
  out.t = scale * T.t - out.R * g.t * scale;
  return out;
}

}  // namespace

TEST(Reproject, PinholeExamples) {
  const PinholeCamera cam{500, 400, 320, 240, 640, 480};
  EXPECT_EQ(*reproject(CameraPose{}, Vec3(0, 0, 2), cam), Vec2(320, 240));
  EXPECT_EQ(*reproject(CameraPose{}, Vec3(0.2, -0.4, 2), cam), Vec2(370, 160));
  EXPECT_FALSE(reproject(CameraPose{}, Vec3(0, 0, -1), cam));
  EXPECT_FALSE(reproject(CameraPose{}, Vec3(1, 0, 0), cam));
}

TEST(Robust, HuberCostAndWeight) {
  RobustConfig rc;
  double w = 0;
  EXPECT_DOUBLE_EQ(robust_cost(4.0, rc, &w), 4.0);
  EXPECT_EQ(w, 1.0);
  const double d = rc.huber_delta;
  EXPECT_NEAR(robust_cost(25.0, rc, &w), 2 * d * 5 - d * d, 1e-12);
  EXPECT_NEAR(w, d / 5.0, 1e-15);
  // Continuous at the threshold.
  EXPECT_NEAR(robust_cost(d * d * (1 + 1e-12), rc), d * d, 1e-9);
  rc.use_huber = false;
  EXPECT_EQ(robust_cost(25.0, rc), 25.0);
  EXPECT_NEAR(RobustConfig{}.sigma(2), 1.44, 1e-12);
}

TEST(Jacobian, PoseAndPointMatchFiniteDifferences) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  const PinholeCamera cam{500, 480, 320, 240, 640, 480};
  for (int t = 0; t < 50; ++t) {
    const CameraPose pose = look_at(Vec3(4 * u(rng), 4 * u(rng), 3 + u(rng)), 0.2 * Vec3(u(rng), u(rng), u(rng)));
    const Vec3 X = 0.5 * Vec3(u(rng), u(rng), u(rng));
    const Vec2 obs(320 + 50 * u(rng), 240 + 50 * u(rng));
    EXPECT_LT(segs::testing::pose_jacobian_rel_error(pose, X, obs, 1.2, cam), 1e-5);
    const auto rj = residual_jacobian(pose, X, obs, 1.2, cam);
    ASSERT_TRUE(rj);
    for (int k = 0; k < 3; ++k) {
      Vec3 p = X, m = X;
      p[k] += 1e-6;
      m[k] -= 1e-6;
      const Vec2 fd = (residual_jacobian(pose, p, obs, 1.2, cam)->residual -
                       residual_jacobian(pose, m, obs, 1.2, cam)->residual) / 2e-6;
      EXPECT_NEAR((rj->d_point.col(k) - fd).norm(), 0.0, 1e-6 * std::max(1.0, fd.norm()));
    }
  }
}

TEST(MotionOnly, TruthIsAFixedPoint) {
  auto c = motion_only_case(3, 0.0);
  BAReport rep;
  const CameraPose truth = c.inst.true_poses.at(c.pose_id);
  const CameraPose p = motion_only_ba(c.inst.problem, c.pose_id, truth, {}, {}, &rep);
  EXPECT_LT(pose_error(p, truth), 1e-10);
  EXPECT_LT(rep.final_cost, 1e-12);
}

TEST(MotionOnly, RecoversPerturbedPose) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto c = motion_only_case(s, 0.0);
    BAReport rep;
    const CameraPose p = motion_only_ba(c.inst.problem, c.pose_id, c.initial, {}, {}, &rep);
    EXPECT_LT(pose_error(p, c.inst.true_poses.at(c.pose_id)), 1e-4) << "seed " << s;
    EXPECT_TRUE(rep.converged);
    EXPECT_FALSE(rep.rank_deficient);
  }
}

TEST(MotionOnly, HuberBeatsLeastSquaresWithOutliers) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto c = motion_only_case(s, 0.2);
    const CameraPose truth = c.inst.true_poses.at(c.pose_id);
    const CameraPose robust = motion_only_ba(c.inst.problem, c.pose_id, c.initial);
    RobustConfig plain;
    plain.use_huber = false;
    const CameraPose ls = motion_only_ba(c.inst.problem, c.pose_id, c.initial, plain);
    EXPECT_LT(pose_error(robust, truth), 1e-2) << "seed " << s;
    EXPECT_LT(pose_error(robust, truth), pose_error(ls, truth)) << "seed " << s;
  }
}

TEST(MotionOnly, CostMonotoneOverAcceptedSteps) {
  auto c = motion_only_case(9, 0.2, 1.0);
  BAReport rep;
  motion_only_ba(c.inst.problem, c.pose_id, c.initial, {}, {}, &rep);
  ASSERT_GE(rep.accepted_costs.size(), 2u);
  EXPECT_DOUBLE_EQ(rep.accepted_costs.front(), rep.initial_cost);
  for (std::size_t i = 1; i < rep.accepted_costs.size(); ++i)
    EXPECT_LE(rep.accepted_costs[i], rep.accepted_costs[i - 1]);
  EXPECT_DOUBLE_EQ(rep.accepted_costs.back(), rep.final_cost);
}

TEST(MotionOnly, TooFewObservations) {
  BAInstanceSpec spec;
  spec.n_keyframes = 1;
  spec.n_points = 10;
  BAInstance inst = make_ba_instance(spec);
  inst.problem.observations.resize(5);
  EXPECT_THROW(motion_only_ba(inst.problem, 0, inst.true_poses.at(0)), InvalidInput);
}

TEST(MotionOnly, BehindCameraObservationsExcluded) {
  auto c = motion_only_case(2, 0.0);
  // A point behind the start pose carries no information and must not break the solve.
  const int id = 1000;
  c.inst.problem.points[id] = c.inst.true_poses.at(0).inverse().transform(Vec3(0, 0, -3));
  c.inst.problem.observations.push_back({0, id, Vec2(320, 240), 0});
  BAReport rep;
  const CameraPose p = motion_only_ba(c.inst.problem, c.pose_id, c.initial, {}, {}, &rep);
  EXPECT_EQ(rep.excluded_observations, 1);
  EXPECT_LT(pose_error(p, c.inst.true_poses.at(0)), 1e-4);
}

TEST(MotionOnly, DegeneratePointsFlagRankDeficiency) {
  BAProblem pb;
  pb.camera = PinholeCamera{500, 500, 320, 240, 640, 480};
  pb.poses[0] = CameraPose{};
  // Every point on the optical axis: rotation about z is unobservable.
  for (int i = 0; i < 8; ++i) {
    pb.points[i] = Vec3(0, 0, 1.0 + i);
    pb.observations.push_back({0, i, Vec2(320, 240), 0});
  }
  BAReport rep;
  motion_only_ba(pb, 0, CameraPose{}, {}, {}, &rep);
  EXPECT_TRUE(rep.rank_deficient);
}

TEST(MotionOnly, SigmaScalesWithLevel) {
  auto c = motion_only_case(4, 0.0, 0.0);
  const CameraPose off = c.initial;
  BAProblem lvl0 = c.inst.problem, lvl2 = c.inst.problem;
  lvl0.poses[0] = off;
  lvl2.poses[0] = off;
  for (auto& o : lvl2.observations) o.level = 2;
  RobustConfig plain;
  plain.use_huber = false;
  EXPECT_NEAR(total_cost(lvl2, plain) * std::pow(1.2, 4), total_cost(lvl0, plain), 1e-9 * total_cost(lvl0, plain));
}

TEST(LocalBA, RecoversWindowWithFixedObservers) {
  BAInstanceSpec spec;
  spec.n_keyframes = 5;
  spec.n_points = 60;
  spec.seed = 5;
  BAInstance inst = make_ba_instance(spec);
  inst.problem.fixed_pose_ids = {0, 1};
  std::mt19937_64 rng(1);
  for (int id : {2, 3, 4}) inst.problem.poses[id] = perturb_pose(inst.problem.poses[id], 0.02, 0.03, rng);
  for (auto& [id, p] : inst.problem.points) p += 0.01 * Vec3(std::sin(id), std::cos(id), std::sin(2.0 * id));
  const BAReport rep = local_ba(inst.problem, {2, 3, 4});
  EXPECT_LT(rep.final_cost, 1e-10);
  for (int id : {2, 3, 4}) EXPECT_LT(pose_error(inst.problem.poses[id], inst.true_poses[id]), 1e-4);
  EXPECT_EQ(inst.problem.poses[0].t, inst.true_poses[0].t);
}

TEST(LocalBA, GaugeFixedWhenNoFixedObservers) {
  BAInstanceSpec spec;
  spec.n_keyframes = 3;
  spec.n_points = 40;
  BAInstance inst = make_ba_instance(spec);
  inst.problem.fixed_pose_ids.clear();
  std::mt19937_64 rng(2);
  const CameraPose first = inst.problem.poses[0];
  inst.problem.poses[1] = perturb_pose(inst.problem.poses[1], 0.01, 0.01, rng);
  const BAReport rep = local_ba(inst.problem, {0, 1, 2});
  // one fixed pose still leaves global scale free; damping picks the nearest solution
  EXPECT_TRUE(rep.rank_deficient);
  EXPECT_EQ(inst.problem.poses[0].R, first.R);
  EXPECT_EQ(inst.problem.poses[0].t, first.t);
  EXPECT_LT(rep.final_cost, 1e-10);
}

TEST(GlobalBA, ConvergesAndIsGaugeInvariant) {
  BAInstanceSpec spec;
  spec.n_keyframes = 4;
  spec.n_points = 50;
  spec.noise_sigma = 0.5;
  spec.seed = 7;
  BAInstance inst = make_ba_instance(spec);
  std::mt19937_64 rng(3);
  for (int id : {1, 2, 3}) inst.problem.poses[id] = perturb_pose(inst.problem.poses[id], 0.01, 0.02, rng);
  BAProblem moved = inst.problem;
  const CameraPose g = rigid(rng);
  for (auto& [id, T] : moved.poses) T = move_world(T, g);
  for (auto& [id, X] : moved.points) X = g.transform(X);
  const double before = total_cost(inst.problem);
  EXPECT_NEAR(total_cost(moved), before, 1e-9 * before);
  const BAReport a = global_ba(inst.problem), b = global_ba(moved);
  EXPECT_LT(a.final_cost, a.initial_cost);
  EXPECT_NEAR(a.final_cost, b.final_cost, 1e-6 * a.final_cost);
  for (std::size_t i = 1; i < a.accepted_costs.size(); ++i) EXPECT_LE(a.accepted_costs[i], a.accepted_costs[i - 1]);
  EXPECT_LT(mean_reprojection_error(inst.problem), 1.0);
}

TEST(Triangulate, RecoversPoint) {
  BAInstanceSpec spec;
  spec.n_keyframes = 3;
  spec.n_points = 20;
  BAInstance inst = make_ba_instance(spec);
  for (const auto& [id, X] : inst.true_points) EXPECT_LT((*triangulate(inst.problem, id) - X).norm(), 1e-8);
}

TEST(Ate, ZeroForRigidCopyAndMatchesHorn) {
  std::mt19937_64 rng(4);
  const auto gt = wobbly_trajectory(rng, 12);
  std::vector<CameraPose> est;
  const CameraPose g = rigid(rng);
  for (const auto& T : gt) est.push_back(move_world(T, g));
  EXPECT_NEAR(ate_rmse(est, gt), 0.0, 1e-9);
  // Scaled copy: only Sim(3) alignment removes it.
  std::vector<CameraPose> scaled;
  for (const auto& T : gt) scaled.push_back(move_world(T, g, 2.5));
  EXPECT_NEAR(ate_rmse(scaled, gt, true), 0.0, 1e-9);
  EXPECT_GT(ate_rmse(scaled, gt, false), 1.0);
  // Noisy estimate: the umeyama result equals Horn's.
  std::normal_distribution<double> n01;
  std::vector<Vec3> pe, pg;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    CameraPose T = est[i];
    T.t += 0.03 * Vec3(n01(rng), n01(rng), n01(rng));
    est[i] = T;
    pe.push_back(T.center());
    pg.push_back(gt[i].center());
  }
  EXPECT_NEAR(ate_rmse(est, gt), horn_ate_cm(pe, pg), 1e-9);
}

TEST(Ate, InputErrors) {
  std::mt19937_64 rng(5);
  const auto gt = wobbly_trajectory(rng, 4);
  EXPECT_THROW(ate_rmse({gt[0], gt[1]}, {gt[0], gt[1]}), InvalidInput);
  EXPECT_THROW(ate_rmse(gt, {gt[0], gt[1], gt[2]}), InvalidInput);
}

TEST(Tum, RoundTrip) {
  std::mt19937_64 rng(6);
  const auto poses = wobbly_trajectory(rng, 20);
  const auto dir = std::filesystem::temp_directory_path() / "segs_tum_test";
  std::filesystem::create_directories(dir);
  save_tum(dir / "t.txt", poses);
  const auto back = load_tum_poses(dir / "t.txt");
  ASSERT_EQ(back.size(), poses.size());
  for (std::size_t i = 0; i < poses.size(); ++i) {
    EXPECT_LT((back[i].R - poses[i].R).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((back[i].t - poses[i].t).cwiseAbs().maxCoeff(), 1e-12);
    const TumRecord r = to_tum(0.0, poses[i]);
    EXPECT_LT((r.translation - poses[i].center()).norm(), 1e-15);
  }
  std::filesystem::remove_all(dir);
}

TEST(Tum, ParseErrorsCarryLocation) {
  const auto dir = std::filesystem::temp_directory_path() / "segs_tum_bad";
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "bad.txt");
    f << "# comment\n0 0 0 0 0 0 0 1\n1 2 3\n";
  }
  try {
    load_tum(dir / "bad.txt");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":3"), std::string::npos);
  }
  EXPECT_THROW(parse_tum_line("0 0 0 0 0 0 0 0", "x"), ParseError);
  EXPECT_THROW(parse_tum_line("0 0 0 0 0 0 0 1 9", "x"), ParseError);
  EXPECT_THROW(load_tum(dir / "missing.txt"), IoError);
  std::filesystem::remove_all(dir);
}
