#pragma once

// Pinhole projection of 3D Gaussians and front-to-back alpha blending,
// forward and reverse, on the CPU. Pixel (x, y) is evaluated at the
// continuous coordinate (x, y); the background is black.

#include "segs/camera.hpp"
#include "segs/decoders.hpp"
#include "segs/image.hpp"
#include "segs/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

namespace segs {

struct RasterConfig {
  int tile_size = 16;
  double dilation = 0.3;  // px^2 added to the projected covariance
  double near_plane = 0.01;
  double alpha_max = 0.99;
  double alpha_min = 1.0 / 255.0;
  double transmittance_min = 1e-4;
  int threads = 1;

  void validate() const {
    if (tile_size < 1) throw ConfigError("raster: tile_size must be positive");
    if (!(dilation >= 0.0)) throw ConfigError("raster: dilation must be non-negative");
    if (!(alpha_min > 0.0) || !(alpha_max < 1.0) || !(alpha_min < alpha_max))
      throw ConfigError("raster: need 0 < alpha_min < alpha_max < 1");
    if (!(transmittance_min > 0.0) || !(transmittance_min < 1.0))
      throw ConfigError("raster: transmittance_min must lie in (0, 1)");
  }
};

struct Splat2D {
  Vec2 center = Vec2::Zero();
  Vec3 cov = Vec3::Zero();    // (xx, xy, yy)
  Vec3 conic = Vec3::Zero();  // inverse covariance (a, b, c)
  Vec3 color = Vec3::Zero();
  double alpha = 0.0;
  double depth = 0.0;
  int source = -1;  // index of the Gaussian this splat came from
  // Inclusive pixel box outside of which alpha * G < alpha_min.
  int x0 = 0, x1 = -1, y0 = 0, y1 = -1;
};

inline Mat3 quat_rotation_poly(const Vec4& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 R;
  R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return R;
}

/// Conic from covariance; returns false when the matrix is not positive definite.
inline bool conic_from_cov(const Vec3& cov, Vec3& conic) {
  const double det = cov[0] * cov[2] - cov[1] * cov[1];
  if (!(det > 0.0) || !(cov[0] > 0.0)) return false;
  conic = Vec3(cov[2] / det, -cov[1] / det, cov[0] / det);
  return true;
}

/// Fills the pixel box of a splat. The box covers every pixel where
/// alpha * exp(-q/2) can reach alpha_min, i.e. Mahalanobis radius
/// sqrt(2 ln(alpha / alpha_min)), so culling by box never changes the image.
inline bool compute_extent(Splat2D& s, const PinholeCamera& cam, const RasterConfig& cfg) {
  const double ratio = s.alpha / cfg.alpha_min;
  if (!(ratio >= 1.0)) return false;
  const double m = std::sqrt(2.0 * std::log(ratio));
  const double hx = m * std::sqrt(s.cov[0]) + 1.0;
  const double hy = m * std::sqrt(s.cov[2]) + 1.0;
  s.x0 = std::max(0, static_cast<int>(std::ceil(s.center.x() - hx)));
  s.x1 = std::min(cam.width - 1, static_cast<int>(std::floor(s.center.x() + hx)));
  s.y0 = std::max(0, static_cast<int>(std::ceil(s.center.y() - hy)));
  s.y1 = std::min(cam.height - 1, static_cast<int>(std::floor(s.center.y() + hy)));
  return s.x0 <= s.x1 && s.y0 <= s.y1;
}

/// Builds a splat from already-projected quantities (used by tests and by
/// `project`). Returns nullopt when the splat touches no pixel.
inline std::optional<Splat2D> make_splat(const Vec2& center, const Vec3& cov, const Vec3& color, double alpha,
                                         double depth, const PinholeCamera& cam, const RasterConfig& cfg) {
  Splat2D s;
  s.center = center;
  s.cov = cov;
  s.color = color;
  s.alpha = alpha;
  s.depth = depth;
  if (!center.allFinite() || !cov.allFinite() || !color.allFinite() || !std::isfinite(alpha) || !std::isfinite(depth))
    throw InvalidInput("splat: non-finite parameters");
  if (!conic_from_cov(cov, s.conic)) return std::nullopt;
  if (!compute_extent(s, cam, cfg)) return std::nullopt;
  return s;
}

/// Intermediate values of the projection; backward needs them.
struct Projection {
  Vec3 p_cam = Vec3::Zero();
  Eigen::Matrix<double, 2, 3> J;
  Mat3 Rq = Mat3::Identity();
  Mat3 sigma3 = Mat3::Zero();
};

inline Projection projection_terms(const GaussianPrimitive& g, const CameraPose& pose, const PinholeCamera& cam) {
  Projection pr;
  pr.p_cam = pose.transform(g.mu);
  const double x = pr.p_cam.x(), y = pr.p_cam.y(), z = pr.p_cam.z();
  pr.J << cam.fx / z, 0.0, -cam.fx * x / (z * z), 0.0, cam.fy / z, -cam.fy * y / (z * z);
  pr.Rq = quat_rotation_poly(g.quat);
  const Mat3 M = pr.Rq * g.scale.asDiagonal();
  pr.sigma3 = M * M.transpose();
  return pr;
}

/// EWA projection: center = pi(R mu + t), cov2d = J R Sigma R^T J^T + dilation I.
/// Culls Gaussians behind the near plane or touching no pixel.
inline std::optional<Splat2D> project(const GaussianPrimitive& g, const CameraPose& pose, const PinholeCamera& cam,
                                      const RasterConfig& cfg = {}) {
  if (!g.active) return std::nullopt;
  const Projection pr = projection_terms(g, pose, cam);
  const double z = pr.p_cam.z();
  if (!(z > cfg.near_plane)) return std::nullopt;
  const Vec2 center(cam.fx * pr.p_cam.x() / z + cam.cx, cam.fy * pr.p_cam.y() / z + cam.cy);
  const Eigen::Matrix<double, 2, 3> T = pr.J * pose.R;
  const Mat2 c2 = T * pr.sigma3 * T.transpose();
  const Vec3 cov(c2(0, 0) + cfg.dilation, c2(0, 1), c2(1, 1) + cfg.dilation);
  return make_splat(center, cov, g.color, g.alpha, z, cam, cfg);
}

/// Gradient of the loss with respect to one splat's parameters. `cov` is
/// with respect to (xx, xy, yy) where xy stands for both off-diagonals.
struct SplatGrad {
  Vec2 center = Vec2::Zero();
  Vec3 cov = Vec3::Zero();
  Vec3 color = Vec3::Zero();
  double alpha = 0.0;
};

/// Chains a splat gradient back to the Gaussian's mean, (unnormalized)
/// quaternion and scale. Color and alpha pass straight through.
inline GaussianGrad project_backward(const GaussianPrimitive& g, const CameraPose& pose, const PinholeCamera& cam,
                                     const SplatGrad& sg) {
  const Projection pr = projection_terms(g, pose, cam);
  const double x = pr.p_cam.x(), y = pr.p_cam.y(), z = pr.p_cam.z();
  const double fx = cam.fx, fy = cam.fy;
  const Eigen::Matrix<double, 2, 3> T = pr.J * pose.R;

  Mat2 G;
  G << sg.cov[0], 0.5 * sg.cov[1], 0.5 * sg.cov[1], sg.cov[2];
  const Mat3 dSigma = T.transpose() * G * T;
  const Eigen::Matrix<double, 2, 3> dT = 2.0 * G * T * pr.sigma3;
  const Eigen::Matrix<double, 2, 3> dJ = dT * pose.R.transpose();

  Vec3 dp = Vec3::Zero();
  const double z2 = z * z, z3 = z2 * z;
  dp.x() += dJ(0, 2) * (-fx / z2);
  dp.y() += dJ(1, 2) * (-fy / z2);
  dp.z() += dJ(0, 0) * (-fx / z2) + dJ(0, 2) * (2.0 * fx * x / z3) + dJ(1, 1) * (-fy / z2) +
            dJ(1, 2) * (2.0 * fy * y / z3);
  dp.x() += sg.center.x() * fx / z;
  dp.z() += sg.center.x() * (-fx * x / z2);
  dp.y() += sg.center.y() * fy / z;
  dp.z() += sg.center.y() * (-fy * y / z2);

  GaussianGrad out;
  out.mu = pose.R.transpose() * dp;
  out.color = sg.color;
  out.alpha = sg.alpha;

  const Mat3 M = pr.Rq * g.scale.asDiagonal();
  const Mat3 dM = 2.0 * dSigma * M;
  for (int j = 0; j < 3; ++j) out.scale[j] = dM.col(j).dot(pr.Rq.col(j));
  const Mat3 dR = dM * g.scale.asDiagonal();

  const double w = g.quat[0], qx = g.quat[1], qy = g.quat[2], qz = g.quat[3];
  out.quat[0] = 2 * (-qz * dR(0, 1) + qy * dR(0, 2) + qz * dR(1, 0) - qx * dR(1, 2) - qy * dR(2, 0) + qx * dR(2, 1));
  out.quat[1] = 2 * (qy * dR(0, 1) + qz * dR(0, 2) + qy * dR(1, 0) - 2 * qx * dR(1, 1) - w * dR(1, 2) +
                     qz * dR(2, 0) + w * dR(2, 1) - 2 * qx * dR(2, 2));
  out.quat[2] = 2 * (-2 * qy * dR(0, 0) + qx * dR(0, 1) + w * dR(0, 2) + qx * dR(1, 0) + qz * dR(1, 2) -
                     w * dR(2, 0) + qz * dR(2, 1) - 2 * qy * dR(2, 2));
  out.quat[3] = 2 * (-2 * qz * dR(0, 0) - w * dR(0, 1) + qx * dR(0, 2) + w * dR(1, 0) - 2 * qz * dR(1, 1) +
                     qy * dR(1, 2) + qx * dR(2, 0) + qy * dR(2, 1));
  return out;
}

/// Stable ascending order by depth; equal depths keep their input order.
inline std::vector<std::size_t> depth_sort(std::span<const Splat2D> splats) {
  std::vector<std::size_t> order(splats.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (const auto& s : splats)
    if (!std::isfinite(s.depth)) throw InvalidInput("depth_sort: non-finite depth");
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return splats[a].depth < splats[b].depth; });
  return order;
}

/// Per-pixel blend state. Returns the fragment opacity or a negative value
/// when the splat is skipped at this pixel.
struct Fragment {
  double delta = -1.0;  // clamped alpha * G
  double g = 0.0;       // Gaussian falloff
  bool clamped = false;
  double dx = 0.0, dy = 0.0;
};

inline Fragment evaluate_fragment(const Splat2D& s, double px, double py, const RasterConfig& cfg) {
  Fragment f;
  f.dx = px - s.center.x();
  f.dy = py - s.center.y();
  const double power = -0.5 * (s.conic[0] * f.dx * f.dx + s.conic[2] * f.dy * f.dy) - s.conic[1] * f.dx * f.dy;
  if (power > 0.0) return f;
  f.g = std::exp(power);
  const double raw = s.alpha * f.g;
  f.clamped = raw > cfg.alpha_max;
  const double d = f.clamped ? cfg.alpha_max : raw;
  if (d < cfg.alpha_min) return f;
  f.delta = d;
  return f;
}

/// Output of the tile rasterizer plus what the backward pass replays.
struct RenderResult {
  Image image;
  std::vector<double> transmittance;  // final T per pixel
  std::vector<int> n_contrib;         // blend list length used per pixel
  std::vector<std::vector<int>> tile_lists;  // splat indices per tile, depth order
  int tiles_x = 0, tiles_y = 0;
  std::size_t splat_count = 0;
  bool valid = false;
};

inline void check_splats(std::span<const Splat2D> splats) {
  for (const auto& s : splats)
    if (!s.center.allFinite() || !s.conic.allFinite() || !s.color.allFinite() || !std::isfinite(s.alpha) ||
        !std::isfinite(s.depth))
      throw InvalidInput("rasterize: non-finite splat");
}

/// Positions in a tile list whose boxes cover row y, in list order.
inline void row_positions(std::span<const Splat2D> splats, const std::vector<int>& list, int y, std::vector<int>& out) {
  out.clear();
  for (std::size_t pos = 0; pos < list.size(); ++pos) {
    const Splat2D& s = splats[static_cast<std::size_t>(list[pos])];
    if (y >= s.y0 && y <= s.y1) out.push_back(static_cast<int>(pos));
  }
}

/// Tile-based forward blend: C = sum_i c_i delta_i prod_{j<i} (1 - delta_j).
inline RenderResult rasterize(std::span<const Splat2D> splats, const PinholeCamera& cam,
                              const RasterConfig& cfg = {}) {
  cfg.validate();
  check_splats(splats);
  RenderResult r;
  r.image = Image(cam.width, cam.height, 0.0);
  r.transmittance.assign(r.image.pixel_count(), 1.0);
  r.n_contrib.assign(r.image.pixel_count(), 0);
  const int ts = cfg.tile_size;
  r.tiles_x = (cam.width + ts - 1) / ts;
  r.tiles_y = (cam.height + ts - 1) / ts;
  r.tile_lists.assign(static_cast<std::size_t>(r.tiles_x) * r.tiles_y, {});
  r.splat_count = splats.size();

  for (std::size_t idx : depth_sort(splats)) {
    const Splat2D& s = splats[idx];
    if (s.x0 > s.x1 || s.y0 > s.y1) continue;
    for (int ty = s.y0 / ts; ty <= s.y1 / ts; ++ty)
      for (int tx = s.x0 / ts; tx <= s.x1 / ts; ++tx)
        r.tile_lists[static_cast<std::size_t>(ty) * r.tiles_x + tx].push_back(static_cast<int>(idx));
  }

  parallel_for(r.tile_lists.size(), cfg.threads, [&](std::size_t tile) {
    const int tx = static_cast<int>(tile) % r.tiles_x, ty = static_cast<int>(tile) / r.tiles_x;
    const auto& list = r.tile_lists[tile];
    std::vector<int> row;
    for (int y = ty * ts; y < std::min(cam.height, (ty + 1) * ts); ++y) {
      row_positions(splats, list, y, row);
      for (int x = tx * ts; x < std::min(cam.width, (tx + 1) * ts); ++x) {
        double T = 1.0;
        Vec3 C = Vec3::Zero();
        int used = 0;
        for (int pos : row) {
          const Splat2D& s = splats[static_cast<std::size_t>(list[static_cast<std::size_t>(pos)])];
          if (x < s.x0 || x > s.x1) continue;
          const Fragment f = evaluate_fragment(s, x, y, cfg);
          if (f.delta < 0.0) continue;
          const double next_T = T * (1.0 - f.delta);
          if (next_T < cfg.transmittance_min) break;
          C += s.color * (f.delta * T);
          T = next_T;
          used = pos + 1;
        }
        const std::size_t p = static_cast<std::size_t>(y) * cam.width + x;
        for (int c = 0; c < 3; ++c) r.image.data[p * 3 + c] = C[c];
        r.transmittance[p] = T;
        r.n_contrib[p] = used;
      }
    }
  });
  r.valid = true;
  return r;
}

/// Reference blender: every pixel sorts and visits every splat, with the
/// same clamp/skip/termination rules and no tiles or boxes. Also the
/// ground-truth renderer for synthetic datasets.
inline Image rasterize_reference(std::span<const Splat2D> splats, const PinholeCamera& cam,
                                 const RasterConfig& cfg = {}) {
  check_splats(splats);
  Image img(cam.width, cam.height, 0.0);
  const auto order = depth_sort(splats);
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      double T = 1.0;
      Vec3 C = Vec3::Zero();
      for (std::size_t idx : order) {
        const Fragment f = evaluate_fragment(splats[idx], x, y, cfg);
        if (f.delta < 0.0) continue;
        const double next_T = T * (1.0 - f.delta);
        if (next_T < cfg.transmittance_min) break;
        C += splats[idx].color * (f.delta * T);
        T = next_T;
      }
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = C[c];
    }
  }
  return img;
}

/// Reverse of `rasterize`. Each pixel replays its blend list back to front,
/// recovering transmittance by division. Per-splat sums are formed per tile
/// and then reduced in tile order, so results do not depend on threads.
inline std::vector<SplatGrad> rasterize_backward(std::span<const Splat2D> splats, const RenderResult& fwd,
                                                 const Image& grad_image, const PinholeCamera& cam,
                                                 const RasterConfig& cfg = {}) {
  if (!fwd.valid || fwd.splat_count != splats.size() || fwd.image.width != cam.width ||
      fwd.image.height != cam.height || !grad_image.same_shape(fwd.image))
    throw UsageError("rasterize_backward: forward cache does not match inputs");

  struct Partial {
    Vec2 center = Vec2::Zero();
    Vec3 conic = Vec3::Zero();  // dL/d(Q00, Q01 (both entries), Q11) accumulated as dL/dQ full
    Vec3 color = Vec3::Zero();
    double alpha = 0.0;
  };
  const int ts = cfg.tile_size;
  std::vector<std::vector<Partial>> partials(fwd.tile_lists.size());

  parallel_for(fwd.tile_lists.size(), cfg.threads, [&](std::size_t tile) {
    const auto& list = fwd.tile_lists[tile];
    auto& acc = partials[tile];
    acc.assign(list.size(), Partial{});
    const int tx = static_cast<int>(tile) % fwd.tiles_x, ty = static_cast<int>(tile) / fwd.tiles_x;
    std::vector<int> row;
    for (int y = ty * ts; y < std::min(cam.height, (ty + 1) * ts); ++y) {
      row_positions(splats, list, y, row);
      for (int x = tx * ts; x < std::min(cam.width, (tx + 1) * ts); ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * cam.width + x;
        const Vec3 dC(grad_image.data[p * 3], grad_image.data[p * 3 + 1], grad_image.data[p * 3 + 2]);
        if (dC.isZero(0.0)) continue;
        double T = fwd.transmittance[p];
        Vec3 behind = Vec3::Zero();
        double last_delta = 0.0;
        Vec3 last_color = Vec3::Zero();
        for (auto it = row.rbegin(); it != row.rend(); ++it) {
          const int pos = *it;
          if (pos >= fwd.n_contrib[p]) continue;
          const Splat2D& s = splats[static_cast<std::size_t>(list[static_cast<std::size_t>(pos)])];
          if (x < s.x0 || x > s.x1) continue;
          const Fragment f = evaluate_fragment(s, x, y, cfg);
          if (f.delta < 0.0) continue;
          T /= (1.0 - f.delta);
          Partial& pa = acc[static_cast<std::size_t>(pos)];
          pa.color += dC * (f.delta * T);
          behind = last_delta * last_color + (1.0 - last_delta) * behind;
          last_delta = f.delta;
          last_color = s.color;
          const double d_delta = T * (s.color - behind).dot(dC);
          if (f.clamped) continue;
          pa.alpha += f.g * d_delta;
          const double d_power = s.alpha * f.g * d_delta;
          // power = -0.5 (a dx^2 + c dy^2) - b dx dy, dx = px - cx
          pa.center.x() += d_power * (s.conic[0] * f.dx + s.conic[1] * f.dy);
          pa.center.y() += d_power * (s.conic[1] * f.dx + s.conic[2] * f.dy);
          pa.conic[0] += d_power * (-0.5 * f.dx * f.dx);
          pa.conic[1] += d_power * (-0.5 * f.dx * f.dy);  // per off-diagonal entry
          pa.conic[2] += d_power * (-0.5 * f.dy * f.dy);
        }
      }
    }
  });

  std::vector<Partial> total(splats.size());
  for (std::size_t tile = 0; tile < fwd.tile_lists.size(); ++tile) {
    const auto& list = fwd.tile_lists[tile];
    for (std::size_t pos = 0; pos < list.size(); ++pos) {
      const Partial& pa = partials[tile][pos];
      Partial& t = total[static_cast<std::size_t>(list[pos])];
      t.center += pa.center;
      t.conic += pa.conic;
      t.color += pa.color;
      t.alpha += pa.alpha;
    }
  }

  std::vector<SplatGrad> out(splats.size());
  for (std::size_t i = 0; i < splats.size(); ++i) {
    const Splat2D& s = splats[i];
    const Partial& t = total[i];
    SplatGrad& g = out[i];
    g.center = t.center;
    g.color = t.color;
    g.alpha = t.alpha;
    // dL/dSigma = -Q (dL/dQ) Q with Q the conic matrix.
    Mat2 Q;
    Q << s.conic[0], s.conic[1], s.conic[1], s.conic[2];
    Mat2 GQ;
    GQ << t.conic[0], t.conic[1], t.conic[1], t.conic[2];
    const Mat2 dS = -Q * GQ * Q;
    g.cov = Vec3(dS(0, 0), dS(0, 1) + dS(1, 0), dS(1, 1));
  }
  return out;
}

}  // namespace segs
