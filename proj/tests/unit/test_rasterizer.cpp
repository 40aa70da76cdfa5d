#include "segs/rasterizer.hpp"

#include "support/random_splats.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace segs;
using segs::testing::pixel_camera;
using segs::testing::random_splats;

namespace {

double max_abs_diff(const Image& a, const Image& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

GaussianPrimitive unit_gaussian(const Vec3& mu, double s) {
  GaussianPrimitive g;
  g.mu = mu;
  g.scale = Vec3::Constant(s);
  g.quat = Vec4(1, 0, 0, 0);
  g.color = Vec3(1, 0.5, 0.25);
  g.alpha = 0.8;
  g.active = true;
  return g;
}

}  // namespace

TEST(Project, CenterAndIsotropicCovariance) {
  const PinholeCamera cam{100, 100, 31.5, 31.5, 64, 64};
  const CameraPose pose;  // identity: camera looks down +z
  const auto s = project(unit_gaussian(Vec3(0.1, -0.2, 2.0), 0.05), pose, cam);
  ASSERT_TRUE(s);
  EXPECT_NEAR(s->center.x(), 31.5 + 100 * 0.05, 1e-12);
  EXPECT_NEAR(s->center.y(), 31.5 - 100 * 0.1, 1e-12);
  EXPECT_DOUBLE_EQ(s->depth, 2.0);
  // On the optical axis the projected covariance is (f s / z)^2 + dilation.
  const auto c = project(unit_gaussian(Vec3(0, 0, 2.0), 0.05), pose, cam);
  ASSERT_TRUE(c);
  EXPECT_NEAR(c->cov[0], 2.5 * 2.5 + 0.3, 1e-12);
  EXPECT_NEAR(c->cov[1], 0.0, 1e-12);
  EXPECT_NEAR(c->cov[2], 2.5 * 2.5 + 0.3, 1e-12);
}

TEST(Project, CulledBehindCameraOrInactive) {
  const PinholeCamera cam{100, 100, 31.5, 31.5, 64, 64};
  EXPECT_FALSE(project(unit_gaussian(Vec3(0, 0, -1), 0.05), CameraPose{}, cam));
  EXPECT_FALSE(project(unit_gaussian(Vec3(0, 0, 0.001), 0.05), CameraPose{}, cam));
  auto g = unit_gaussian(Vec3(0, 0, 2), 0.05);
  g.active = false;
  EXPECT_FALSE(project(g, CameraPose{}, cam));
  // Far outside the image: no pixel is touched.
  EXPECT_FALSE(project(unit_gaussian(Vec3(50, 0, 2), 0.05), CameraPose{}, cam));
}

TEST(Project, AnisotropicRotationMatchesDirectFormula) {
  const PinholeCamera cam{80, 90, 20, 22, 48, 40};
  const CameraPose pose = look_at(Vec3(1, -2, 0.5), Vec3(0.1, 0, 0));
  GaussianPrimitive g = unit_gaussian(Vec3(0.1, 0.05, -0.02), 0.0);
  g.scale = Vec3(0.02, 0.05, 0.1);
  g.quat = Vec4(0.8, 0.2, -0.4, 0.4).normalized();
  const auto s = project(g, pose, cam);
  ASSERT_TRUE(s);
  const Vec3 pc = pose.transform(g.mu);
  Eigen::Matrix<double, 2, 3> J;
  J << cam.fx / pc.z(), 0, -cam.fx * pc.x() / (pc.z() * pc.z()), 0, cam.fy / pc.z(), -cam.fy * pc.y() / (pc.z() * pc.z());
  const Mat3 R = quat_to_rotation(g.quat);
  const Mat3 S = R * g.scale.cwiseAbs2().asDiagonal() * R.transpose();
  const Mat2 c = J * pose.R * S * pose.R.transpose() * J.transpose();
  EXPECT_NEAR(s->cov[0], c(0, 0) + 0.3, 1e-12);
  EXPECT_NEAR(s->cov[1], c(0, 1), 1e-12);
  EXPECT_NEAR(s->cov[2], c(1, 1) + 0.3, 1e-12);
}

TEST(Rasterize, SingleSplatClosedForm) {
  const PinholeCamera cam = pixel_camera(9, 9);
  const RasterConfig cfg;
  const auto s = make_splat(Vec2(4, 4), Vec3(2.0, 0.0, 2.0), Vec3(1, 0.5, 0.2), 0.6, 1.0, cam, cfg);
  ASSERT_TRUE(s);
  const Splat2D sp[] = {*s};
  const RenderResult r = rasterize(sp, cam, cfg);
  for (int y = 0; y < 9; ++y)
    for (int x = 0; x < 9; ++x) {
      const double d2 = (x - 4.0) * (x - 4.0) + (y - 4.0) * (y - 4.0);
      const double a = 0.6 * std::exp(-0.25 * d2);
      const double expect = a < 1.0 / 255.0 ? 0.0 : a;
      EXPECT_NEAR(r.image.at(x, y, 0), expect, 1e-14);
      EXPECT_NEAR(r.image.at(x, y, 2), 0.2 * expect, 1e-14);
    }
}

TEST(Rasterize, TwoSplatsFrontToBack) {
  const PinholeCamera cam = pixel_camera(4, 4);
  const RasterConfig cfg;
  const Vec3 wide(1e4, 0.0, 1e4);  // effectively flat over the image
  const auto front = make_splat(Vec2(1.5, 1.5), wide, Vec3(1, 0, 0), 0.5, 1.0, cam, cfg);
  const auto back = make_splat(Vec2(1.5, 1.5), wide, Vec3(0, 1, 0), 0.5, 2.0, cam, cfg);
  ASSERT_TRUE(front && back);
  const Splat2D sp[] = {*back, *front};  // input order must not matter
  const RenderResult r = rasterize(sp, cam, cfg);
  EXPECT_NEAR(r.image.at(1, 1, 0), 0.5, 1e-3);
  EXPECT_NEAR(r.image.at(1, 1, 1), 0.25, 1e-3);
  EXPECT_NEAR(r.transmittance[5], 0.25, 1e-3);
}

TEST(Rasterize, AlphaClampAndEarlyTermination) {
  const PinholeCamera cam = pixel_camera(2, 2);
  const RasterConfig cfg;
  const Vec3 wide(1e6, 0.0, 1e6);
  std::vector<Splat2D> sp;
  for (int i = 0; i < 4; ++i) sp.push_back(*make_splat(Vec2(0.5, 0.5), wide, Vec3(1, 1, 1), 1.0, 1.0 + i, cam, cfg));
  const RenderResult r = rasterize(sp, cam, cfg);
  // 0.99 + 0.0099: the third splat would bring T below 1e-4 and stops the pixel.
  EXPECT_NEAR(r.image.at(0, 0, 0), 0.99 + 0.01 * 0.99, 1e-9);
  EXPECT_EQ(r.n_contrib[0], 2);
  EXPECT_NEAR(r.transmittance[0], 1e-4, 1e-9);
}

TEST(Rasterize, TinyAlphaSkipped) {
  const PinholeCamera cam = pixel_camera(3, 3);
  const RasterConfig cfg;
  EXPECT_FALSE(make_splat(Vec2(1, 1), Vec3(1, 0, 1), Vec3(1, 1, 1), 0.5 / 255.0, 1.0, cam, cfg));
}

TEST(Rasterize, EmptySceneIsBlack) {
  const PinholeCamera cam = pixel_camera(17, 5);
  const RenderResult r = rasterize({}, cam);
  for (double v : r.image.data) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(r.tiles_x, 2);
  EXPECT_EQ(r.tiles_y, 1);
}

TEST(Rasterize, MatchesReferenceOnRandomScenes) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 15; ++t) {
    const PinholeCamera cam = pixel_camera(20 + t * 3, 40 - t);
    RasterConfig cfg;
    cfg.tile_size = (t % 3 == 0) ? 8 : 16;
    const auto sp = random_splats(rng, 10 + 20 * t, cam, cfg);
    EXPECT_LE(max_abs_diff(rasterize(sp, cam, cfg).image, rasterize_reference(sp, cam, cfg)), 1e-12) << t;
  }
}

TEST(Rasterize, StableSortForEqualDepth) {
  const PinholeCamera cam = pixel_camera(3, 3);
  const RasterConfig cfg;
  const Vec3 wide(1e4, 0.0, 1e4);
  const auto a = make_splat(Vec2(1, 1), wide, Vec3(1, 0, 0), 0.5, 1.0, cam, cfg);
  const auto b = make_splat(Vec2(1, 1), wide, Vec3(0, 1, 0), 0.5, 1.0, cam, cfg);
  const Splat2D sp[] = {*a, *b};
  const RenderResult r = rasterize(sp, cam, cfg);
  EXPECT_GT(r.image.at(1, 1, 0), r.image.at(1, 1, 1));
  EXPECT_EQ(depth_sort(sp), (std::vector<std::size_t>{0, 1}));
}

TEST(Rasterize, ThreadCountDoesNotChangeResults) {
  std::mt19937_64 rng(5);
  const PinholeCamera cam = pixel_camera(48, 40);
  RasterConfig one, four;
  four.threads = 4;
  const auto sp = random_splats(rng, 150, cam);
  const RenderResult a = rasterize(sp, cam, one), b = rasterize(sp, cam, four);
  EXPECT_EQ(a.image.data, b.image.data);
  Image g(cam.width, cam.height);
  std::uniform_real_distribution<double> u(-1, 1);
  for (double& v : g.data) v = u(rng);
  const auto ga = rasterize_backward(sp, a, g, cam, one), gb = rasterize_backward(sp, b, g, cam, four);
  for (std::size_t i = 0; i < sp.size(); ++i) {
    EXPECT_EQ(ga[i].center, gb[i].center);
    EXPECT_EQ(ga[i].cov, gb[i].cov);
    EXPECT_EQ(ga[i].color, gb[i].color);
    EXPECT_EQ(ga[i].alpha, gb[i].alpha);
  }
}

TEST(Rasterize, RejectsNonFiniteAndBadConfig) {
  const PinholeCamera cam = pixel_camera(8, 8);
  auto s = *make_splat(Vec2(4, 4), Vec3(2, 0, 2), Vec3(1, 1, 1), 0.5, 1.0, cam, RasterConfig{});
  s.color[1] = std::nan("");
  const Splat2D sp[] = {s};
  EXPECT_THROW(rasterize(sp, cam), InvalidInput);
  RasterConfig bad;
  bad.tile_size = 0;
  EXPECT_THROW(rasterize({}, cam, bad), ConfigError);
}

TEST(RasterizeBackward, RequiresMatchingForward) {
  const PinholeCamera cam = pixel_camera(8, 8);
  std::mt19937_64 rng(1);
  const auto sp = random_splats(rng, 5, cam);
  RenderResult stale;
  EXPECT_THROW(rasterize_backward(sp, stale, Image(8, 8), cam), UsageError);
  const RenderResult r = rasterize(sp, cam);
  EXPECT_THROW(rasterize_backward(sp, r, Image(7, 8), cam), UsageError);
  EXPECT_THROW(rasterize_backward(std::span<const Splat2D>(sp).first(3), r, Image(8, 8), cam), UsageError);
}

// Central differences through the blend on splats without clamping. Splat
// centers are kept off the box edges so that small moves do not change the
// set of covered pixels.
TEST(RasterizeBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const PinholeCamera cam = pixel_camera(12, 10);
  RasterConfig cfg;
  cfg.alpha_min = 1e-12;  // boxes cover the whole image
  for (int t = 0; t < 10; ++t) {
    std::vector<Splat2D> sp;
    for (int i = 0; i < 4; ++i) {
      const double sx = 1.5 + 2 * u(rng), sy = 1.5 + 2 * u(rng), rho = 0.8 * u(rng) - 0.4;
      sp.push_back(*make_splat(Vec2(2 + 8 * u(rng), 2 + 6 * u(rng)), Vec3(sx * sx, rho * sx * sy, sy * sy),
                               Vec3(u(rng), u(rng), u(rng)), 0.2 + 0.6 * u(rng), 1.0 + i + u(rng), cam, cfg));
    }
    Image w(cam.width, cam.height);
    for (double& v : w.data) v = u(rng) - 0.5;
    auto loss = [&](const std::vector<Splat2D>& s) {
      const Image img = rasterize(s, cam, cfg).image;
      double l = 0.0;
      for (std::size_t i = 0; i < img.data.size(); ++i) l += img.data[i] * w.data[i];
      return l;
    };
    const RenderResult r = rasterize(sp, cam, cfg);
    const auto g = rasterize_backward(sp, r, w, cam, cfg);
    const double h = 1e-6;
    auto rebuild = [&](Splat2D s) { return *make_splat(s.center, s.cov, s.color, s.alpha, s.depth, cam, cfg); };
    for (std::size_t i = 0; i < sp.size(); ++i) {
      auto fd = [&](auto&& set) {
        auto p = sp, m = sp;
        set(p[i], h);
        set(m[i], -h);
        p[i] = rebuild(p[i]);
        m[i] = rebuild(m[i]);
        return (loss(p) - loss(m)) / (2 * h);
      };
      for (int c = 0; c < 2; ++c)
        EXPECT_NEAR(g[i].center[c], fd([&](Splat2D& s, double d) { s.center[c] += d; }), 1e-6);
      for (int c = 0; c < 3; ++c) {
        EXPECT_NEAR(g[i].cov[c], fd([&](Splat2D& s, double d) { s.cov[c] += d; }), 1e-6);
        EXPECT_NEAR(g[i].color[c], fd([&](Splat2D& s, double d) { s.color[c] += d; }), 1e-6);
      }
      EXPECT_NEAR(g[i].alpha, fd([&](Splat2D& s, double d) { s.alpha += d; }), 1e-6);
    }
  }
}

TEST(ProjectBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const PinholeCamera cam{60, 55, 15.5, 14.5, 32, 30};
  const CameraPose pose = look_at(Vec3(1.5, 1.0, 0.4), Vec3::Zero());
  const RasterConfig cfg;
  for (int t = 0; t < 10; ++t) {
    GaussianPrimitive g = unit_gaussian(0.1 * Vec3(u(rng), u(rng), u(rng)), 0.0);
    g.scale = Vec3(0.05 + 0.03 * u(rng), 0.05 + 0.03 * u(rng), 0.05 + 0.03 * u(rng));
    g.quat = Vec4(u(rng), u(rng), u(rng), u(rng));
    SplatGrad sg;
    sg.center = Vec2(u(rng), u(rng));
    sg.cov = Vec3(u(rng), u(rng), u(rng));
    auto obj = [&](const GaussianPrimitive& x) {
      const auto s = project(x, pose, cam, cfg);
      return sg.center.dot(s->center) + sg.cov.dot(s->cov);
    };
    const GaussianGrad d = project_backward(g, pose, cam, sg);
    const double h = 1e-6;
    auto fd = [&](auto&& set) {
      GaussianPrimitive p = g, m = g;
      set(p, h);
      set(m, -h);
      return (obj(p) - obj(m)) / (2 * h);
    };
    for (int c = 0; c < 3; ++c) {
      EXPECT_NEAR(d.mu[c], fd([&](GaussianPrimitive& x, double e) { x.mu[c] += e; }), 1e-5);
      EXPECT_NEAR(d.scale[c], fd([&](GaussianPrimitive& x, double e) { x.scale[c] += e; }), 1e-5);
    }
    for (int c = 0; c < 4; ++c)
      EXPECT_NEAR(d.quat[c], fd([&](GaussianPrimitive& x, double e) { x.quat[c] += e; }), 1e-5);
  }
}
