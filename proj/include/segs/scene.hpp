#pragma once

// Anchor-based scene representation: voxelized anchors, their learnable
// parameters, and the grow/prune refinement rules.

#include "segs/common.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace segs {

struct PointCloud {
  std::vector<Vec3> points;

  bool empty() const { return points.empty(); }
  std::size_t size() const { return points.size(); }
};

struct VoxelGridConfig {
  double epsilon = 0.001;  // voxel edge, meters

  void validate() const {
    if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("voxel grid: epsilon must be positive");
  }
};

/// Integer lattice coordinate round(p / eps). Occupancy and dedup run on
/// these keys, never on floating centers.
struct LatticeKey {
  std::int64_t x = 0;
  std::int64_t y = 0;
  std::int64_t z = 0;

  friend bool operator==(const LatticeKey&, const LatticeKey&) = default;
  friend auto operator<=>(const LatticeKey&, const LatticeKey&) = default;
};

struct LatticeKeyHash {
  std::size_t operator()(const LatticeKey& k) const noexcept {
    return static_cast<std::size_t>(mix_seed(static_cast<std::uint64_t>(k.x),
                                             static_cast<std::uint64_t>(k.y),
                                             static_cast<std::uint64_t>(k.z)));
  }
};

using LatticeSet = std::unordered_set<LatticeKey, LatticeKeyHash>;

// std::round rounds halves away from zero, which is the tie rule we want.
inline LatticeKey lattice_key(const Vec3& p, double eps) {
  return {static_cast<std::int64_t>(std::round(p.x() / eps)),
          static_cast<std::int64_t>(std::round(p.y() / eps)),
          static_cast<std::int64_t>(std::round(p.z() / eps))};
}

inline Vec3 lattice_center(const LatticeKey& k, double eps) {
  return Vec3(static_cast<double>(k.x) * eps, static_cast<double>(k.y) * eps, static_cast<double>(k.z) * eps);
}

/// Distinct voxel centers round(p / eps) * eps, in first-occurrence order.
inline std::vector<Vec3> voxelize(const PointCloud& cloud, const VoxelGridConfig& cfg) {
  cfg.validate();
  std::vector<Vec3> centers;
  LatticeSet seen;
  seen.reserve(cloud.size());
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    const Vec3& p = cloud.points[i];
    if (!p.allFinite()) throw InvalidInput("voxelize: non-finite coordinate at point " + std::to_string(i));
    const LatticeKey key = lattice_key(p, cfg.epsilon);
    if (seen.insert(key).second) centers.push_back(lattice_center(key, cfg.epsilon));
  }
  return centers;
}

using OffsetMatrix = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

/// Voxel-centered carrier of a context feature, a per-axis scale l_v and k
/// offsets. The center is fixed for the lifetime of the anchor; only
/// feature, offsets and log_scale are optimized.
struct Anchor {
  Vec3 center = Vec3::Zero();
  VecX feature;
  Vec3 log_scale = Vec3::Zero();  // l_v = exp(log_scale), strictly positive
  OffsetMatrix offsets;           // k x 3, in units of l_v
  bool active = true;

  Vec3 scale() const { return log_scale.array().exp(); }
  int k() const { return static_cast<int>(offsets.rows()); }
};

/// Gaussian centers mu_i = t_v + O_i * l_v (componentwise).
inline std::vector<Vec3> decode_positions(const Anchor& a) {
  const Vec3 l = a.scale();
  std::vector<Vec3> mu(static_cast<std::size_t>(a.k()));
  for (int i = 0; i < a.k(); ++i) mu[i] = a.center + a.offsets.row(i).transpose().cwiseProduct(l);
  return mu;
}

struct InitPolicy {
  double feature_range = 0.01;  // features ~ U(-r, r)
  double offset_range = 0.5;    // offsets ~ U(-r, r) in voxel units
  bool zero_offsets = false;
  double initial_scale = 0.0;   // l_v per axis; 0 means "use the voxel size"
};

inline Anchor make_anchor(const Vec3& center, int k, int feature_dim, double scale, const InitPolicy& init,
                          std::mt19937_64& rng) {
  std::uniform_real_distribution<double> feat(-init.feature_range, init.feature_range);
  std::uniform_real_distribution<double> off(-init.offset_range, init.offset_range);
  Anchor a;
  a.center = center;
  a.feature = VecX(feature_dim);
  for (int i = 0; i < feature_dim; ++i) a.feature[i] = feat(rng);
  a.offsets = OffsetMatrix::Zero(k, 3);
  if (!init.zero_offsets)
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < 3; ++j) a.offsets(i, j) = off(rng);
  a.log_scale = Vec3::Constant(std::log(scale));
  return a;
}

inline std::vector<Anchor> init_anchors(const std::vector<Vec3>& centers, int k, int feature_dim, double voxel_size,
                                        const InitPolicy& init, std::mt19937_64& rng) {
  if (k < 1) throw ConfigError("init_anchors: k must be >= 1");
  if (feature_dim < 1) throw ConfigError("init_anchors: feature_dim must be >= 1");
  const double scale = init.initial_scale > 0.0 ? init.initial_scale : voxel_size;
  if (!(scale > 0.0)) throw ConfigError("init_anchors: initial scale must be positive");
  std::vector<Anchor> out;
  out.reserve(centers.size());
  for (const Vec3& c : centers) out.push_back(make_anchor(c, k, feature_dim, scale, init, rng));
  return out;
}

/// Appends anchors for voxels of `cloud` that no existing anchor occupies.
/// Existing anchors come first and are untouched.
inline std::vector<Anchor> merge_new_keyframe_anchors(const std::vector<Anchor>& existing, const PointCloud& cloud,
                                                      const VoxelGridConfig& cfg, int k, int feature_dim,
                                                      const InitPolicy& init, std::mt19937_64& rng) {
  cfg.validate();
  LatticeSet occupied;
  for (const Anchor& a : existing) occupied.insert(lattice_key(a.center, cfg.epsilon));
  std::vector<Vec3> fresh;
  for (const Vec3& c : voxelize(cloud, cfg))
    if (occupied.insert(lattice_key(c, cfg.epsilon)).second) fresh.push_back(c);
  std::vector<Anchor> out = existing;
  auto added = init_anchors(fresh, k, feature_dim, cfg.epsilon, init, rng);
  out.insert(out.end(), std::make_move_iterator(added.begin()), std::make_move_iterator(added.end()));
  return out;
}

/// Per-anchor refinement statistics over one window of N_t iterations.
struct AnchorStats {
  double grad_accum = 0.0;     // sum of child screen-space gradient norms
  double opacity_accum = 0.0;  // sum over samples of the summed clamped child opacities
  int sample_count = 0;        // iterations in which the anchor was observed
  std::vector<double> child_grad_accum;
  std::vector<int> child_grad_count;

  explicit AnchorStats(int k = 0) : child_grad_accum(static_cast<std::size_t>(k), 0.0),
                                    child_grad_count(static_cast<std::size_t>(k), 0) {}

  void reset() {
    grad_accum = opacity_accum = 0.0;
    sample_count = 0;
    std::fill(child_grad_accum.begin(), child_grad_accum.end(), 0.0);
    std::fill(child_grad_count.begin(), child_grad_count.end(), 0);
  }

  double mean_opacity() const { return sample_count > 0 ? opacity_accum / sample_count : 0.0; }
};

struct RefinementConfig {
  double epsilon_g = 0.001;        // base grow-voxel size
  double tau_g = 0.0002;           // base gradient threshold
  int levels = 3;                  // M
  int window = 100;                // N_t
  double prune_opacity = 0.005;
  double candidate_keep_prob = 0.5;

  void validate() const {
    if (!(epsilon_g > 0.0) || !(tau_g > 0.0)) throw ConfigError("refinement: epsilon_g and tau_g must be positive");
    if (levels < 1 || window < 1) throw ConfigError("refinement: levels and window must be >= 1");
    if (!(prune_opacity > 0.0) || !(prune_opacity < 1.0)) throw ConfigError("refinement: prune_opacity must be in (0,1)");
    if (!(candidate_keep_prob >= 0.0) || candidate_keep_prob > 1.0)
      throw ConfigError("refinement: candidate_keep_prob must be in [0,1]");
  }
};

/// New anchors from the multi-resolution growing rule. Level m uses voxel
/// size epsilon_g / 4^(m-1) and threshold tau_g * 2^(m-1); a voxel is a
/// candidate when the mean of its Gaussians' window-averaged gradients
/// exceeds the threshold. Candidates already occupied by an anchor (old or
/// grown at a previous level) are dropped; survivors are kept with
/// probability candidate_keep_prob. Stats are reset afterwards.
inline std::vector<Anchor> grow_anchors(const std::vector<Anchor>& anchors, std::vector<AnchorStats>& stats,
                                        const RefinementConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  if (stats.size() != anchors.size()) throw UsageError("grow_anchors: stats/anchor count mismatch");

  struct Member {
    std::size_t anchor;
    Vec3 position;
    double grad;
  };
  std::vector<Member> members;
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    const auto mu = decode_positions(anchors[a]);
    const AnchorStats& s = stats[a];
    for (std::size_t i = 0; i < mu.size() && i < s.child_grad_count.size(); ++i)
      if (s.child_grad_count[i] > 0) members.push_back({a, mu[i], s.child_grad_accum[i] / s.child_grad_count[i]});
  }

  std::vector<Anchor> grown;
  std::bernoulli_distribution keep(cfg.candidate_keep_prob);
  double size = cfg.epsilon_g;
  double threshold = cfg.tau_g;
  for (int level = 1; level <= cfg.levels; ++level, size /= 4.0, threshold *= 2.0) {
    struct Cell {
      double sum = 0.0;
      int count = 0;
      std::size_t first_parent = 0;
    };
    std::unordered_map<LatticeKey, Cell, LatticeKeyHash> cells;
    std::vector<LatticeKey> order;
    for (const Member& m : members) {
      const LatticeKey key = lattice_key(m.position, size);
      auto [it, inserted] = cells.try_emplace(key);
      if (inserted) {
        it->second.first_parent = m.anchor;
        order.push_back(key);
      }
      it->second.sum += m.grad;
      it->second.count += 1;
    }
    LatticeSet occupied;
    for (const Anchor& a : anchors) occupied.insert(lattice_key(a.center, size));
    for (const Anchor& a : grown) occupied.insert(lattice_key(a.center, size));

    for (const LatticeKey& key : order) {
      const Cell& cell = cells.at(key);
      if (!(cell.sum / cell.count > threshold)) continue;
      if (occupied.contains(key)) continue;
      // Always draw, so the random stream does not depend on earlier outcomes.
      const bool kept = keep(rng);
      if (!kept) continue;
      occupied.insert(key);
      const Anchor& parent = anchors[cell.first_parent];
      Anchor a;
      a.center = lattice_center(key, size);
      a.feature = parent.feature;
      a.offsets = OffsetMatrix::Zero(parent.k(), 3);
      a.log_scale = Vec3::Constant(std::log(size));
      grown.push_back(std::move(a));
    }
  }
  for (auto& s : stats) s.reset();
  return grown;
}

struct PruneResult {
  std::vector<Anchor> anchors;
  std::vector<std::size_t> kept;  // indices into the input
};

/// Drops anchors whose mean opacity over the window is below the
/// threshold. Anchors without samples are kept: no evidence, no pruning.
inline PruneResult prune_anchors(const std::vector<Anchor>& anchors, const std::vector<AnchorStats>& stats,
                                 const RefinementConfig& cfg) {
  if (stats.size() != anchors.size()) throw UsageError("prune_anchors: stats/anchor count mismatch");
  PruneResult r;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const AnchorStats& s = stats[i];
    const bool prune = s.sample_count > 0 && s.mean_opacity() < cfg.prune_opacity;
    if (!prune) {
      r.anchors.push_back(anchors[i]);
      r.kept.push_back(i);
    }
  }
  return r;
}

}  // namespace segs
