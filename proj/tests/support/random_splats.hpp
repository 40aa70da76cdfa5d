#pragma once

#include "segs/rasterizer.hpp"

#include <random>
#include <vector>

namespace segs::testing {

/// Random projected splats over a W x H image. Depths are distinct with
/// probability one; a share of splats is made near-opaque to exercise the
/// clamp and early termination.
inline std::vector<Splat2D> random_splats(std::mt19937_64& rng, int n, const PinholeCamera& cam,
                                          const RasterConfig& cfg = {}) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Splat2D> out;
  while (static_cast<int>(out.size()) < n) {
    const Vec2 c(u(rng) * (cam.width + 8) - 4, u(rng) * (cam.height + 8) - 4);
    const double sx = 0.5 + 6.0 * u(rng), sy = 0.5 + 6.0 * u(rng);
    const double rho = 1.6 * u(rng) - 0.8;
    const Vec3 cov(sx * sx, rho * sx * sy, sy * sy);
    const double alpha = u(rng) < 0.2 ? 0.995 : 0.05 + 0.9 * u(rng);
    const Vec3 color(u(rng), u(rng), u(rng));
    if (auto s = make_splat(c, cov, color, alpha, 0.5 + 10.0 * u(rng), cam, cfg)) out.push_back(*s);
  }
  return out;
}

inline PinholeCamera pixel_camera(int w, int h) {
  PinholeCamera cam;
  cam.fx = cam.fy = w;
  cam.cx = (w - 1) / 2.0;
  cam.cy = (h - 1) / 2.0;
  cam.width = w;
  cam.height = h;
  return cam;
}

}  // namespace segs::testing
