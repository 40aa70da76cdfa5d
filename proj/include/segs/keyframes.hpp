#pragma once

// Keyframe selection rules shared by the dataset generator and the trainer.

#include "segs/camera.hpp"
#include "segs/scene.hpp"

#include <string>
#include <vector>

namespace segs {

struct KeyframeRule {
  enum class Kind { Flags, Every, Holdout, Covisibility };
  Kind kind = Kind::Holdout;
  int every = 5;               // Every: keep i % every == offset; Holdout: drop those
  int offset = 0;
  double covisibility = 0.9;   // new keyframe when shared fraction with the last one drops below this
  std::vector<bool> flags;     // Flags: taken verbatim

  static Kind parse_kind(const std::string& s) {
    if (s == "flags") return Kind::Flags;
    if (s == "every") return Kind::Every;
    if (s == "holdout") return Kind::Holdout;
    if (s == "covisibility") return Kind::Covisibility;
    throw ConfigError("unknown keyframe rule '" + s + "' (flags|every|holdout|covisibility)");
  }
  static std::string kind_name(Kind k) {
    switch (k) {
      case Kind::Flags: return "flags";
      case Kind::Every: return "every";
      case Kind::Holdout: return "holdout";
      case Kind::Covisibility: return "covisibility";
    }
    return "?";
  }
};

/// Indices of cloud points that project inside the image in front of the camera.
inline std::vector<bool> visible_points(const PointCloud& cloud, const CameraPose& pose, const PinholeCamera& cam) {
  std::vector<bool> vis(cloud.points.size(), false);
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    const Vec3 p = pose.transform(cloud.points[i]);
    if (!(p.z() > 0.0)) continue;
    const double u = cam.fx * p.x() / p.z() + cam.cx, v = cam.fy * p.y() / p.z() + cam.cy;
    vis[i] = u >= -0.5 && u < cam.width - 0.5 && v >= -0.5 && v < cam.height - 0.5;
  }
  return vis;
}

/// Keyframe flag per frame. Covisibility walks frames in order: the first
/// frame is a keyframe, and frame i becomes one when the fraction of its
/// visible points also visible in the last keyframe is below the threshold.
inline std::vector<bool> select_keyframes(std::size_t n_frames, const KeyframeRule& rule,
                                          const std::vector<CameraPose>& poses = {}, const PointCloud& cloud = {},
                                          const PinholeCamera& cam = {}) {
  std::vector<bool> kf(n_frames, false);
  switch (rule.kind) {
    case KeyframeRule::Kind::Flags:
      if (rule.flags.size() != n_frames) throw InvalidInput("keyframe flags: count does not match frames");
      kf = rule.flags;
      break;
    case KeyframeRule::Kind::Every:
    case KeyframeRule::Kind::Holdout:
      if (rule.every < 1) throw ConfigError("keyframe rule: 'every' must be >= 1");
      for (std::size_t i = 0; i < n_frames; ++i) {
        const bool hit = static_cast<int>(i % rule.every) == rule.offset % rule.every;
        kf[i] = rule.kind == KeyframeRule::Kind::Every ? hit : !hit;
      }
      break;
    case KeyframeRule::Kind::Covisibility: {
      if (poses.size() != n_frames) throw InvalidInput("covisibility rule: poses required for every frame");
      std::vector<bool> last;
      for (std::size_t i = 0; i < n_frames; ++i) {
        const auto vis = visible_points(cloud, poses[i], cam);
        if (i == 0) {
          kf[i] = true;
          last = vis;
          continue;
        }
        std::size_t seen = 0, shared = 0;
        for (std::size_t p = 0; p < vis.size(); ++p)
          if (vis[p]) {
            ++seen;
            if (last[p]) ++shared;
          }
        const double frac = seen ? static_cast<double>(shared) / static_cast<double>(seen) : 0.0;
        if (frac < rule.covisibility) {
          kf[i] = true;
          last = vis;
        }
      }
      break;
    }
  }
  return kf;
}

}  // namespace segs
