#pragma once

// The optimization loop: keyframe sampling, decode -> project -> blend ->
// loss -> reverse pass -> Adam, anchor refinement and checkpoints.

#include "segs/adam.hpp"
#include "segs/config.hpp"
#include "segs/datakit.hpp"
#include "segs/decoders.hpp"
#include "segs/keyframes.hpp"
#include "segs/losses.hpp"
#include "segs/rasterizer.hpp"
#include "segs/scene.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace segs {

struct OptimizerConfig {
  double lr_feature = 0.0075;
  double lr_offset = 0.01;
  double lr_offset_final = 0.0001;  // exponential decay of the offset rate over the run
  double lr_scale = 0.007;
  double lr_mlp = 0.002;
  double lr_afme = 0.002;
  AdamConfig adam;

  double offset_lr(int iteration, int total) const {
    if (total <= 0 || lr_offset <= 0.0 || lr_offset_final <= 0.0) return lr_offset;
    const double t = std::clamp(static_cast<double>(iteration) / total, 0.0, 1.0);
    return std::exp((1.0 - t) * std::log(lr_offset) + t * std::log(lr_offset_final));
  }

  void validate() const {
    for (double lr : {lr_feature, lr_offset, lr_offset_final, lr_scale, lr_mlp, lr_afme})
      if (!(lr >= 0.0)) throw ConfigError("optimizer: learning rates must be non-negative");
    adam.validate();
  }
};

struct TrainConfig {
  int iterations = 30000;
  DecoderConfig model;
  double voxel_size = 0.001;
  InitPolicy init;
  LossWeights loss;
  FrequencyPyramidConfig fpr;
  RefinementConfig refine;
  bool refine_enabled = true;
  int refine_start = 500;   // refinement runs for refine_start <= it <= refine_end
  int refine_end = 15000;
  OptimizerConfig optim;
  RasterConfig raster;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0: final checkpoint only
  bool random_init = false;
  int random_init_count = 1000;      // used only when there is no cloud to match
  double random_init_extent = 1.0;   // half-size of the box used without a cloud
  bool incremental = false;
  std::optional<KeyframeRule> split;  // default: the dataset's keyframe flags

  void validate() const {
    if (iterations < 0) throw ConfigError("iterations must be >= 0");
    if (model.k < 1 || model.feature_dim < 1 || model.hidden < 0 || model.appearance_dim < 0 || model.afme_hidden < 0)
      throw ConfigError("model: k and feature_dim must be >= 1, other sizes >= 0");
    if (!(voxel_size > 0.0)) throw ConfigError("model.voxel_size must be positive");
    if (random_init_count < 1 || !(random_init_extent > 0.0)) throw ConfigError("init: random init sizes must be positive");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
    if (raster.threads < 1) throw ConfigError("render: threads must be >= 1");
    raster.validate();
    loss.validate();
    fpr.validate();
    refine.validate();
    optim.validate();
  }

  /// Empties the pyramid window.
  void disable_fpr() {
    fpr.start_iter = 1;
    fpr.end_iter = 0;
  }
};

struct Keyframe {
  Image image;
  CameraPose pose;
  PointCloud cloud;
  int id = 0;
};

struct TrainTestSplit {
  std::vector<Keyframe> train;
  std::vector<Keyframe> test;
};

/// Keyframes by rule go to train, the rest to test.
inline TrainTestSplit split_train_test(const std::vector<Keyframe>& frames, const KeyframeRule& rule,
                                       const PointCloud& cloud = {}, const PinholeCamera& cam = {}) {
  if (frames.size() < 2) throw InvalidInput("split_train_test: need at least 2 frames");
  std::vector<CameraPose> poses;
  for (const auto& f : frames) poses.push_back(f.pose);
  const auto flags = select_keyframes(frames.size(), rule, poses, cloud, cam);
  TrainTestSplit s;
  for (std::size_t i = 0; i < frames.size(); ++i) (flags[i] ? s.train : s.test).push_back(frames[i]);
  if (s.train.empty()) throw InvalidInput("split_train_test: rule selects no keyframes");
  if (s.test.empty()) throw InvalidInput("split_train_test: rule selects every frame");
  return s;
}

/// Frames of a dataset with per-frame clouds: the dataset points each view sees.
inline std::vector<Keyframe> dataset_frames(const Dataset& d) {
  std::vector<Keyframe> out;
  for (std::size_t i = 0; i < d.size(); ++i) {
    Keyframe k;
    k.image = d.images[i];
    k.pose = d.poses[i];
    k.id = static_cast<int>(i);
    const auto vis = visible_points(d.cloud, d.poses[i], d.camera);
    for (std::size_t p = 0; p < vis.size(); ++p)
      if (vis[p]) k.cloud.points.push_back(d.cloud.points[p]);
    out.push_back(std::move(k));
  }
  return out;
}

inline TrainTestSplit split_dataset(const Dataset& d, const std::optional<KeyframeRule>& rule) {
  KeyframeRule r;
  if (rule) {
    r = *rule;
  } else {
    r.kind = KeyframeRule::Kind::Flags;
    r.flags = d.keyframe;
  }
  return split_train_test(dataset_frames(d), r, d.cloud, d.camera);
}

struct TrainState {
  PinholeCamera camera;
  std::vector<Anchor> anchors;
  std::vector<AnchorMoments> anchor_moments;
  std::vector<AnchorStats> stats;
  DecoderParams decoders;
  MlpMoments m_opacity, m_color, m_rotation, m_scale, m_afme;
  int iteration = 0;        // completed steps
  int merged_keyframes = 0;  // incremental mode: keyframes whose clouds are merged

  std::size_t parameter_count() const {
    std::size_t n = decoders.opacity.parameter_count() + decoders.color.parameter_count() +
                    decoders.rotation.parameter_count() + decoders.scale.parameter_count() +
                    decoders.afme.parameter_count();
    for (const auto& a : anchors) n += static_cast<std::size_t>(a.feature.size() + a.offsets.size() + 3);
    return n;
  }
};

struct LossRecord {
  int iteration = 0;  // 1-based
  double l1 = 0.0, ssim = 0.0, vol = 0.0, hf = 0.0, total = 0.0;
};

namespace rng_tag {
constexpr std::uint64_t kInit = 1, kRandomAnchors = 2, kShuffle = 3, kGrow = 4, kMerge = 5;
}

inline void reset_moments(TrainState& s) {
  s.anchor_moments.clear();
  for (const auto& a : s.anchors) s.anchor_moments.push_back(AnchorMoments::zeros(a));
  s.stats.assign(s.anchors.size(), AnchorStats(s.decoders.cfg.k));
}

inline PointCloud merge_clouds(const std::vector<Keyframe>& frames, std::size_t count) {
  PointCloud c;
  for (std::size_t i = 0; i < count && i < frames.size(); ++i)
    c.points.insert(c.points.end(), frames[i].cloud.points.begin(), frames[i].cloud.points.end());
  return c;
}

/// Uniform anchors in the cube [-extent, extent]^3. Positions never look at
/// the cloud; only the count does, so the ablation compares equal budgets.
inline std::vector<Vec3> random_anchor_centers(const PointCloud& cloud, const TrainConfig& cfg) {
  const std::size_t count = cloud.points.empty() ? static_cast<std::size_t>(cfg.random_init_count)
                                                 : voxelize(cloud, {cfg.voxel_size}).size();
  std::mt19937_64 rng(mix_seed(cfg.seed, rng_tag::kRandomAnchors));
  std::uniform_real_distribution<double> u(-cfg.random_init_extent, cfg.random_init_extent);
  std::vector<Vec3> out(count);
  for (auto& p : out)
    for (int c = 0; c < 3; ++c) p[c] = u(rng);
  return out;
}

inline TrainState init_state(const TrainConfig& cfg, const std::vector<Keyframe>& train, const PinholeCamera& cam) {
  cfg.validate();
  if (train.empty()) throw InvalidInput("trainer: no training keyframes");
  TrainState s;
  s.camera = cam;
  std::mt19937_64 rng(mix_seed(cfg.seed, rng_tag::kInit));
  s.decoders = DecoderParams::init(cfg.model, rng);
  const std::size_t merged = cfg.incremental && !cfg.random_init ? 1 : train.size();
  const PointCloud cloud = merge_clouds(train, merged);
  const std::vector<Vec3> centers = cfg.random_init ? random_anchor_centers(cloud, cfg) : voxelize(cloud, {cfg.voxel_size});
  s.anchors = init_anchors(centers, cfg.model.k, cfg.model.feature_dim, cfg.voxel_size, cfg.init, rng);
  s.merged_keyframes = static_cast<int>(merged);
  s.m_opacity = MlpMoments::zeros(s.decoders.opacity);
  s.m_color = MlpMoments::zeros(s.decoders.color);
  s.m_rotation = MlpMoments::zeros(s.decoders.rotation);
  s.m_scale = MlpMoments::zeros(s.decoders.scale);
  s.m_afme = MlpMoments::zeros(s.decoders.afme);
  reset_moments(s);
  return s;
}

/// Anchors that can contribute to the image: a bounding sphere covering
/// every child's splat support is tested against the image frustum padded
/// by the rasterizer's dilation and box margin.
inline std::vector<std::size_t> visible_anchors(const std::vector<Anchor>& anchors, const CameraPose& pose,
                                                const PinholeCamera& cam, const RasterConfig& cfg) {
  const double margin = 3.0 * std::sqrt(cfg.dilation) + 2.0;
  const double u0 = -0.5 - margin, u1 = cam.width - 0.5 + margin;
  const double v0 = -0.5 - margin, v1 = cam.height - 0.5 + margin;
  const Vec3 planes[4] = {Vec3(cam.fx, 0.0, cam.cx - u0).normalized(), Vec3(-cam.fx, 0.0, u1 - cam.cx).normalized(),
                          Vec3(0.0, cam.fy, cam.cy - v0).normalized(), Vec3(0.0, -cam.fy, v1 - cam.cy).normalized()};
  const double support = std::sqrt(2.0 * std::log(cfg.alpha_max / cfg.alpha_min)) + 0.05;
  std::vector<std::size_t> out;
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    const Anchor& an = anchors[a];
    if (!an.active) continue;
    const Vec3 l = an.scale();
    double r = 0.0;
    for (int i = 0; i < an.k(); ++i) r = std::max(r, an.offsets.row(i).transpose().cwiseProduct(l).norm());
    r += support * l.maxCoeff();
    const Vec3 c = pose.transform(an.center);
    if (c.z() + r <= cfg.near_plane) continue;
    bool inside = true;
    for (const Vec3& n : planes)
      if (n.dot(c) < -r) inside = false;
    if (inside) out.push_back(a);
  }
  return out;
}

/// Everything one forward render produces; training reuses it for backward.
struct FrameRender {
  std::vector<std::size_t> anchor_index;  // decoded anchors, indices into state.anchors
  std::vector<Anchor> anchors;
  DecodedFrame decoded;
  std::vector<Splat2D> splats;
  RenderResult raster;
};

inline FrameRender render_frame(const TrainState& s, const CameraPose& pose, const RasterConfig& cfg,
                                const std::optional<CameraPose>& appearance_pose = std::nullopt) {
  FrameRender fr;
  fr.anchor_index = visible_anchors(s.anchors, pose, s.camera, cfg);
  fr.anchors.reserve(fr.anchor_index.size());
  for (std::size_t a : fr.anchor_index) fr.anchors.push_back(s.anchors[a]);
  fr.decoded = decode_frame(fr.anchors, s.decoders, pose, appearance_pose.value_or(pose));
  for (std::size_t j = 0; j < fr.decoded.gaussians.size(); ++j)
    if (auto sp = project(fr.decoded.gaussians[j], pose, s.camera, cfg)) {
      sp->source = static_cast<int>(j);
      fr.splats.push_back(*sp);
    }
  fr.raster = rasterize(fr.splats, s.camera, cfg);
  return fr;
}

inline Image render_view(const TrainState& s, const CameraPose& pose, const RasterConfig& cfg = {}) {
  return render_frame(s, pose, cfg).raster.image;
}

/// Gradients of one training step, keyed like the state.
struct StepGradients {
  FrameRender frame;
  LossTerms loss;
  DecoderGrads decoder;
  std::vector<GaussianGrad> gaussian;  // per decoded Gaussian
  std::vector<SplatGrad> splat;
};

inline StepGradients compute_gradients(const TrainState& s, const Keyframe& kf, const TrainConfig& cfg,
                                       int iteration) {
  StepGradients g;
  g.frame = render_frame(s, kf.pose, cfg.raster);
  const auto& gs = g.frame.decoded.gaussians;
  std::vector<std::size_t> active;
  std::vector<Vec3> scales;
  for (std::size_t j = 0; j < gs.size(); ++j)
    if (gs[j].active) {
      active.push_back(j);
      scales.push_back(gs[j].scale);
    }
  g.loss = total_loss(g.frame.raster.image, kf.image, scales, cfg.loss, cfg.fpr, iteration, true);
  g.splat = rasterize_backward(g.frame.splats, g.frame.raster, g.loss.grad_image, s.camera, cfg.raster);
  g.gaussian.assign(gs.size(), GaussianGrad{});
  for (std::size_t i = 0; i < g.frame.splats.size(); ++i) {
    const auto src = static_cast<std::size_t>(g.frame.splats[i].source);
    const GaussianGrad pg = project_backward(gs[src], kf.pose, s.camera, g.splat[i]);
    GaussianGrad& u = g.gaussian[src];
    u.mu += pg.mu;
    u.alpha += pg.alpha;
    u.color += pg.color;
    u.quat += pg.quat;
    u.scale += pg.scale;
  }
  for (std::size_t t = 0; t < active.size(); ++t) g.gaussian[active[t]].scale += g.loss.grad_scales[t];
  g.decoder = backward_decoders(g.frame.decoded, g.gaussian, g.frame.anchors, s.decoders);
  return g;
}

/// Loss of rendering `kf` without the reverse pass.
inline LossTerms forward_loss(const TrainState& s, const Keyframe& kf, const TrainConfig& cfg, int iteration) {
  const FrameRender fr = render_frame(s, kf.pose, cfg.raster);
  std::vector<Vec3> scales;
  for (const auto& g : fr.decoded.gaussians)
    if (g.active) scales.push_back(g.scale);
  return total_loss(fr.raster.image, kf.image, scales, cfg.loss, cfg.fpr, iteration, false);
}

inline void apply_gradients(TrainState& s, const StepGradients& g, const TrainConfig& cfg, int iteration) {
  const OptimizerConfig& o = cfg.optim;
  const long long t = iteration;
  s.m_opacity.step(s.decoders.opacity, g.decoder.opacity, o.lr_mlp, t, o.adam);
  s.m_color.step(s.decoders.color, g.decoder.color, o.lr_mlp, t, o.adam);
  s.m_rotation.step(s.decoders.rotation, g.decoder.rotation, o.lr_mlp, t, o.adam);
  s.m_scale.step(s.decoders.scale, g.decoder.scale, o.lr_mlp, t, o.adam);
  if (cfg.model.appearance_dim > 0) s.m_afme.step(s.decoders.afme, g.decoder.afme, o.lr_afme, t, o.adam);

  // Every anchor takes a step (zero gradient when unseen), as a dense
  // parameter tensor would.
  std::vector<const AnchorGrad*> grad_of(s.anchors.size(), nullptr);
  for (std::size_t i = 0; i < g.frame.anchor_index.size(); ++i) grad_of[g.frame.anchor_index[i]] = &g.decoder.anchors[i];
  const double lr_off = o.offset_lr(iteration, cfg.iterations);
  AnchorGrad zero;
  for (std::size_t a = 0; a < s.anchors.size(); ++a) {
    Anchor& an = s.anchors[a];
    AnchorMoments& m = s.anchor_moments[a];
    const AnchorGrad* ag = grad_of[a];
    if (!ag) {
      if (zero.feature.size() != an.feature.size() || zero.offsets.rows() != an.k()) {
        zero.feature = VecX::Zero(an.feature.size());
        zero.offsets = OffsetMatrix::Zero(an.k(), 3);
      }
      ag = &zero;
    }
    ++m.steps;
    adam_update(an.feature, ag->feature, m.m_feature, m.v_feature, o.lr_feature, m.steps, o.adam);
    adam_update(an.offsets, ag->offsets, m.m_offsets, m.v_offsets, lr_off, m.steps, o.adam);
    adam_update(an.log_scale, ag->log_scale, m.m_log_scale, m.v_log_scale, o.lr_scale, m.steps, o.adam);
  }
}

/// Window statistics for refinement. An anchor is observed when it passed
/// the visibility test; a child's gradient is the norm of its screen-space
/// center gradient in normalized device units.
inline void accumulate_stats(TrainState& s, const StepGradients& g) {
  const int k = s.decoders.cfg.k;
  const double sx = 0.5 * s.camera.width, sy = 0.5 * s.camera.height;
  for (std::size_t i = 0; i < g.frame.anchor_index.size(); ++i) {
    AnchorStats& st = s.stats[g.frame.anchor_index[i]];
    st.sample_count += 1;
    double op = 0.0;
    for (int c = 0; c < k; ++c) op += std::max(0.0, g.frame.decoded.opacity_out(c, static_cast<Eigen::Index>(i)));
    st.opacity_accum += op;
  }
  for (std::size_t j = 0; j < g.frame.splats.size(); ++j) {
    const auto src = static_cast<std::size_t>(g.frame.splats[j].source);
    const std::size_t local = src / static_cast<std::size_t>(k);
    const std::size_t child = src % static_cast<std::size_t>(k);
    AnchorStats& st = s.stats[g.frame.anchor_index[local]];
    const Vec2 c = g.splat[j].center;
    const double norm = std::hypot(c.x() * sx, c.y() * sy);
    st.grad_accum += norm;
    st.child_grad_accum[child] += norm;
    st.child_grad_count[child] += 1;
  }
}

/// Prune by the window's opacity, then grow from its gradients. Kept anchors
/// keep their moments; grown ones start fresh. Stats restart either way.
inline void refine_anchors(TrainState& s, const TrainConfig& cfg, int iteration) {
  const PruneResult pruned = prune_anchors(s.anchors, s.stats, cfg.refine);
  std::mt19937_64 rng(mix_seed(cfg.seed, rng_tag::kGrow, static_cast<std::uint64_t>(iteration)));
  std::vector<Anchor> grown = grow_anchors(s.anchors, s.stats, cfg.refine, rng);
  std::vector<AnchorMoments> moments;
  for (std::size_t i : pruned.kept) moments.push_back(std::move(s.anchor_moments[i]));
  s.anchors = pruned.anchors;
  for (auto& a : grown) {
    moments.push_back(AnchorMoments::zeros(a));
    s.anchors.push_back(std::move(a));
  }
  s.anchor_moments = std::move(moments);
  s.stats.assign(s.anchors.size(), AnchorStats(s.decoders.cfg.k));
}

inline bool is_refine_iteration(const TrainConfig& cfg, int iteration) {
  return cfg.refine_enabled && iteration >= cfg.refine_start && iteration <= cfg.refine_end &&
         iteration % cfg.refine.window == 0;
}

/// Which training keyframe the 0-based step `step` uses. Keyframes are
/// visited without replacement, reshuffled every epoch; in incremental mode
/// epoch e covers the first min(e + 1, n) keyframes. Pure in (seed, step), so
/// resuming needs no random state.
struct Schedule {
  std::size_t keyframe = 0;
  std::size_t epoch = 0;
  std::size_t active = 0;  // keyframes in play this epoch
};

inline Schedule schedule_step(const TrainConfig& cfg, std::size_t n_train, long long step) {
  Schedule sc;
  long long begin = 0;
  for (std::size_t e = 0;; ++e) {
    const std::size_t size = cfg.incremental ? std::min(e + 1, n_train) : n_train;
    if (step < begin + static_cast<long long>(size)) {
      std::vector<std::size_t> perm(size);
      std::iota(perm.begin(), perm.end(), 0);
      std::mt19937_64 rng(mix_seed(cfg.seed, rng_tag::kShuffle, e));
      std::shuffle(perm.begin(), perm.end(), rng);
      sc.keyframe = perm[static_cast<std::size_t>(step - begin)];
      sc.epoch = e;
      sc.active = size;
      return sc;
    }
    begin += static_cast<long long>(size);
    if (!cfg.incremental || size == n_train) {
      // Remaining epochs all have n_train entries.
      const long long rest = step - begin;
      const std::size_t e2 = e + 1 + static_cast<std::size_t>(rest / static_cast<long long>(n_train));
      const long long pos = rest % static_cast<long long>(n_train);
      std::vector<std::size_t> perm(n_train);
      std::iota(perm.begin(), perm.end(), 0);
      std::mt19937_64 rng(mix_seed(cfg.seed, rng_tag::kShuffle, e2));
      std::shuffle(perm.begin(), perm.end(), rng);
      sc.keyframe = perm[static_cast<std::size_t>(pos)];
      sc.epoch = e2;
      sc.active = n_train;
      return sc;
    }
  }
}

/// One optimizer iteration on keyframe `kf`. Returns the loss record of
/// the render before the update.
inline LossRecord train_step(TrainState& s, const Keyframe& kf, const TrainConfig& cfg) {
  const int it = s.iteration + 1;
  const StepGradients g = compute_gradients(s, kf, cfg, it);
  apply_gradients(s, g, cfg, it);
  accumulate_stats(s, g);
  s.iteration = it;
  if (is_refine_iteration(cfg, it)) refine_anchors(s, cfg, it);
  return {it, g.loss.l1, g.loss.ssim, g.loss.vol, g.loss.hf, g.loss.total};
}

/// Incremental mode: merges clouds of newly active keyframes.
inline void merge_incremental(TrainState& s, const std::vector<Keyframe>& train, std::size_t active,
                              const TrainConfig& cfg) {
  while (static_cast<std::size_t>(s.merged_keyframes) < active) {
    const Keyframe& kf = train[static_cast<std::size_t>(s.merged_keyframes)];
    std::mt19937_64 rng(mix_seed(cfg.seed, rng_tag::kMerge, static_cast<std::uint64_t>(s.merged_keyframes)));
    const std::size_t before = s.anchors.size();
    s.anchors = merge_new_keyframe_anchors(s.anchors, kf.cloud, {cfg.voxel_size}, cfg.model.k, cfg.model.feature_dim,
                                           cfg.init, rng);
    for (std::size_t a = before; a < s.anchors.size(); ++a) {
      s.anchor_moments.push_back(AnchorMoments::zeros(s.anchors[a]));
      s.stats.emplace_back(cfg.model.k);
    }
    ++s.merged_keyframes;
  }
}

// ---------------------------------------------------------------------------
// Evaluation

struct ViewMetrics {
  double psnr = 0.0;
  double ssim = 0.0;
  std::size_t views = 0;
};

/// Mean per-view PSNR and SSIM.
inline ViewMetrics evaluate_views(const TrainState& s, const std::vector<Keyframe>& frames, const RasterConfig& cfg) {
  ViewMetrics m;
  for (const auto& f : frames) {
    const Image r = render_view(s, f.pose, cfg);
    m.psnr += psnr(r, f.image);
    m.ssim += ssim(r, f.image);
  }
  m.views = frames.size();
  if (m.views) {
    m.psnr /= static_cast<double>(m.views);
    m.ssim /= static_cast<double>(m.views);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints: little-endian binary.
//   magic "SEGSCKPT", u32 version
//   u32 k, feature_dim, appearance_dim, hidden, afme_hidden
//   f64 fx fy cx cy, u32 width height
//   i64 iteration, i64 merged_keyframes
//   u64 anchor count; per anchor: f64 center[3], feature[F], offsets[k*3], log_scale[3], u8 active
//   5 MLP groups (opacity, color, rotation, scale, afme): u32 layers; per layer u32 rows, cols, f64 W (row-major), b
//   optimizer: per anchor i64 steps, then m/v of feature, offsets, log_scale;
//              per MLP group m then v in the MLP layout without dims
//   stats: per anchor f64 grad_accum, opacity_accum, i64 sample_count, f64 child_grad_accum[k], i64 child_grad_count[k]

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

constexpr char kCheckpointMagic[8] = {'S', 'E', 'G', 'S', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class BinWriter {
 public:
  explicit BinWriter(std::ostream& o) : out_(o) {}
  template <typename T>
  void pod(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void doubles(const double* p, std::size_t n) { out_.write(reinterpret_cast<const char*>(p), std::streamsize(n * 8)); }
  template <typename M>
  void mat(const M& m) {
    // Row-major regardless of the storage order.
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) pod<double>(m(r, c));
  }

 private:
  std::ostream& out_;
};

class BinReader {
 public:
  BinReader(std::istream& i, std::string name) : in_(i), name_(std::move(name)) {}
  template <typename T>
  T pod() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in_) throw ParseError("checkpoint " + name_ + ": truncated at offset " + std::to_string(offset_));
    offset_ += sizeof v;
    return v;
  }
  template <typename M>
  void mat(M& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = pod<double>();
  }
  std::uint32_t dim(const char* what, std::uint32_t limit = 1u << 24) {
    const auto v = pod<std::uint32_t>();
    if (v > limit) throw ParseError("checkpoint " + name_ + ": implausible " + what + " " + std::to_string(v));
    return v;
  }
  std::size_t offset() const { return offset_; }
  const std::string& name() const { return name_; }

 private:
  std::istream& in_;
  std::string name_;
  std::size_t offset_ = 0;
};

inline void write_mlp(BinWriter& w, const Mlp& m) {
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(m.layers.size()));
  for (const auto& l : m.layers) {
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(l.weight.rows()));
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(l.weight.cols()));
    w.mat(l.weight);
    w.mat(l.bias);
  }
}

inline Mlp read_mlp(BinReader& r) {
  Mlp m;
  const auto n = r.dim("layer count", 64);
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto rows = r.dim("rows"), cols = r.dim("cols");
    DenseLayer l{MatX(rows, cols), VecX(rows)};
    r.mat(l.weight);
    r.mat(l.bias);
    m.layers.push_back(std::move(l));
  }
  return m;
}

inline void write_grad(BinWriter& w, const MlpGrad& g) {
  for (std::size_t l = 0; l < g.weight.size(); ++l) {
    w.mat(g.weight[l]);
    w.mat(g.bias[l]);
  }
}

inline void read_grad(BinReader& r, MlpGrad& g) {
  for (std::size_t l = 0; l < g.weight.size(); ++l) {
    r.mat(g.weight[l]);
    r.mat(g.bias[l]);
  }
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const TrainState& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_checkpoint: cannot open " + path.string());
  detail::BinWriter w(out);
  out.write(kCheckpointMagic, 8);
  w.pod(kCheckpointVersion);
  const DecoderConfig& c = s.decoders.cfg;
  for (int v : {c.k, c.feature_dim, c.appearance_dim, c.hidden, c.afme_hidden}) w.pod<std::uint32_t>(std::uint32_t(v));
  for (double v : {s.camera.fx, s.camera.fy, s.camera.cx, s.camera.cy}) w.pod(v);
  w.pod<std::uint32_t>(std::uint32_t(s.camera.width));
  w.pod<std::uint32_t>(std::uint32_t(s.camera.height));
  w.pod<std::int64_t>(s.iteration);
  w.pod<std::int64_t>(s.merged_keyframes);
  w.pod<std::uint64_t>(s.anchors.size());
  for (const auto& a : s.anchors) {
    w.mat(a.center);
    w.mat(a.feature);
    w.mat(a.offsets);
    w.mat(a.log_scale);
    w.pod<std::uint8_t>(a.active ? 1 : 0);
  }
  for (const Mlp* m : {&s.decoders.opacity, &s.decoders.color, &s.decoders.rotation, &s.decoders.scale, &s.decoders.afme})
    detail::write_mlp(w, *m);
  for (const auto& m : s.anchor_moments) {
    w.pod<std::int64_t>(m.steps);
    w.mat(m.m_feature);
    w.mat(m.v_feature);
    w.mat(m.m_offsets);
    w.mat(m.v_offsets);
    w.mat(m.m_log_scale);
    w.mat(m.v_log_scale);
  }
  for (const MlpMoments* m : {&s.m_opacity, &s.m_color, &s.m_rotation, &s.m_scale, &s.m_afme}) {
    detail::write_grad(w, m->m);
    detail::write_grad(w, m->v);
  }
  for (const auto& st : s.stats) {
    w.pod(st.grad_accum);
    w.pod(st.opacity_accum);
    w.pod<std::int64_t>(st.sample_count);
    for (double v : st.child_grad_accum) w.pod(v);
    for (int v : st.child_grad_count) w.pod<std::int64_t>(v);
  }
  if (!out) throw IoError("save_checkpoint: write failed for " + path.string());
}

inline TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw ParseError("checkpoint " + path.string() + ": bad magic");
  detail::BinReader r(in, path.string());
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw ParseError("checkpoint " + path.string() + ": unsupported version " + std::to_string(version));
  TrainState s;
  DecoderConfig& c = s.decoders.cfg;
  c.k = int(r.dim("k", 4096));
  c.feature_dim = int(r.dim("feature_dim", 4096));
  c.appearance_dim = int(r.dim("appearance_dim", 4096));
  c.hidden = int(r.dim("hidden", 4096));
  c.afme_hidden = int(r.dim("afme_hidden", 4096));
  s.camera.fx = r.pod<double>();
  s.camera.fy = r.pod<double>();
  s.camera.cx = r.pod<double>();
  s.camera.cy = r.pod<double>();
  s.camera.width = int(r.dim("width", 1 << 16));
  s.camera.height = int(r.dim("height", 1 << 16));
  s.iteration = int(r.pod<std::int64_t>());
  s.merged_keyframes = int(r.pod<std::int64_t>());
  const auto n = r.pod<std::uint64_t>();
  if (n > (1ull << 26)) throw ParseError("checkpoint " + path.string() + ": implausible anchor count");
  for (std::uint64_t i = 0; i < n; ++i) {
    Anchor a;
    r.mat(a.center);
    a.feature = VecX(c.feature_dim);
    r.mat(a.feature);
    a.offsets = OffsetMatrix(c.k, 3);
    r.mat(a.offsets);
    r.mat(a.log_scale);
    a.active = r.pod<std::uint8_t>() != 0;
    s.anchors.push_back(std::move(a));
  }
  s.decoders.opacity = detail::read_mlp(r);
  s.decoders.color = detail::read_mlp(r);
  s.decoders.rotation = detail::read_mlp(r);
  s.decoders.scale = detail::read_mlp(r);
  s.decoders.afme = detail::read_mlp(r);
  try {
    s.decoders.validate();
  } catch (const ConfigError& e) {
    throw ParseError("checkpoint " + path.string() + ": " + e.what());
  }
  for (const auto& a : s.anchors) {
    AnchorMoments m = AnchorMoments::zeros(a);
    m.steps = r.pod<std::int64_t>();
    r.mat(m.m_feature);
    r.mat(m.v_feature);
    r.mat(m.m_offsets);
    r.mat(m.v_offsets);
    r.mat(m.m_log_scale);
    r.mat(m.v_log_scale);
    s.anchor_moments.push_back(std::move(m));
  }
  const std::pair<MlpMoments*, const Mlp*> groups[] = {{&s.m_opacity, &s.decoders.opacity},
                                                       {&s.m_color, &s.decoders.color},
                                                       {&s.m_rotation, &s.decoders.rotation},
                                                       {&s.m_scale, &s.decoders.scale},
                                                       {&s.m_afme, &s.decoders.afme}};
  for (const auto& [mo, net] : groups) {
    *mo = MlpMoments::zeros(*net);
    detail::read_grad(r, mo->m);
    detail::read_grad(r, mo->v);
  }
  for (std::size_t i = 0; i < s.anchors.size(); ++i) {
    AnchorStats st(c.k);
    st.grad_accum = r.pod<double>();
    st.opacity_accum = r.pod<double>();
    st.sample_count = int(r.pod<std::int64_t>());
    for (auto& v : st.child_grad_accum) v = r.pod<double>();
    for (auto& v : st.child_grad_count) v = int(r.pod<std::int64_t>());
    s.stats.push_back(std::move(st));
  }
  if (in.peek() != std::char_traits<char>::eof())
    throw ParseError("checkpoint " + path.string() + ": trailing bytes after offset " + std::to_string(r.offset() + 8));
  return s;
}

// ---------------------------------------------------------------------------
// Driver

struct RunOptions {
  std::filesystem::path out_dir;  // empty: nothing written
  std::optional<std::filesystem::path> resume;
  std::function<void(const LossRecord&)> on_step;
};

struct RunResult {
  TrainState state;
  std::vector<LossRecord> losses;
  ViewMetrics train;
  ViewMetrics test;
  double seconds = 0.0;
};

inline void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "iter,l1,ssim,vol,hf,total\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.iteration, r.l1, r.ssim, r.vol, r.hf, r.total);
    out << buf;
  }
}

inline Json metrics_json(const RunResult& r, const TrainConfig& cfg) {
  Json j;
  j["version"] = 1;
  j["iterations"] = r.state.iteration;
  j["seed"] = cfg.seed;
  j["anchors"] = r.state.anchors.size();
  j["parameters"] = r.state.parameter_count();
  j["train"] = {{"psnr", r.train.psnr}, {"ssim", r.train.ssim}, {"views", r.train.views}};
  j["test"] = {{"psnr", r.test.psnr}, {"ssim", r.test.ssim}, {"views", r.test.views}};
  j["final_loss"] = r.losses.empty() ? Json(nullptr) : Json(r.losses.back().total);
  j["afme"] = cfg.model.appearance_dim > 0;
  j["fpr_window"] = {cfg.fpr.start_iter, cfg.fpr.end_iter};
  j["random_init"] = cfg.random_init;
  j["incremental"] = cfg.incremental;
  j["seconds"] = r.seconds;
  return j;
}

inline RunResult run(const TrainConfig& cfg, const Dataset& data, const RunOptions& opts = {}) {
  cfg.validate();
  data.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const TrainTestSplit split = split_dataset(data, cfg.split);
  RunResult res;
  res.state = opts.resume ? load_checkpoint(*opts.resume) : init_state(cfg, split.train, data.camera);
  TrainState& s = res.state;
  if (opts.resume) {
    const DecoderConfig& c = s.decoders.cfg;
    if (c.k != cfg.model.k || c.feature_dim != cfg.model.feature_dim || c.appearance_dim != cfg.model.appearance_dim ||
        c.hidden != cfg.model.hidden || c.afme_hidden != cfg.model.afme_hidden)
      throw ConfigError("resume: checkpoint model dimensions differ from the config");
    if (s.camera.width != data.camera.width || s.camera.height != data.camera.height)
      throw ConfigError("resume: checkpoint image size differs from the dataset");
  }
  if (!opts.out_dir.empty()) std::filesystem::create_directories(opts.out_dir);

  while (s.iteration < cfg.iterations) {
    const Schedule sc = schedule_step(cfg, split.train.size(), s.iteration);
    if (cfg.incremental && !cfg.random_init) merge_incremental(s, split.train, sc.active, cfg);
    const LossRecord rec = train_step(s, split.train[sc.keyframe], cfg);
    res.losses.push_back(rec);
    if (opts.on_step) opts.on_step(rec);
    if (!opts.out_dir.empty() && cfg.checkpoint_every > 0 && s.iteration % cfg.checkpoint_every == 0 &&
        s.iteration < cfg.iterations) {
      char name[64];
      std::snprintf(name, sizeof name, "checkpoint_%06d.bin", s.iteration);
      save_checkpoint(opts.out_dir / name, s);
    }
  }
  res.train = evaluate_views(s, split.train, cfg.raster);
  res.test = evaluate_views(s, split.test, cfg.raster);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!opts.out_dir.empty()) {
    save_checkpoint(opts.out_dir / "checkpoint.bin", s);
    write_loss_csv(opts.out_dir / "loss.csv", res.losses);
    std::ofstream(opts.out_dir / "metrics.json") << metrics_json(res, cfg).dump(2) << "\n";
  }
  return res;
}

// ---------------------------------------------------------------------------
// Config file

inline std::vector<double> read_doubles(JsonReader& r, const std::string& key, std::vector<double> v) {
  r.read(key, v);
  return v;
}

inline TrainConfig parse_train_config(const Json& j) {
  TrainConfig c;
  JsonReader r(j, "");
  int version = 1;
  r.read("version", version);
  if (version != 1) r.fail("version", "unsupported version " + std::to_string(version));
  r.read("iterations", c.iterations);
  r.read("seed", c.seed);
  r.read("checkpoint_every", c.checkpoint_every);
  r.read("random_init", c.random_init);
  r.read("incremental", c.incremental);
  if (r.has("model")) {
    auto m = r.child("model");
    m.read("k", c.model.k);
    m.read("feature_dim", c.model.feature_dim);
    m.read("appearance_dim", c.model.appearance_dim);
    m.read("hidden", c.model.hidden);
    m.read("afme_hidden", c.model.afme_hidden);
    m.read("voxel_size", c.voxel_size);
    m.finish();
  }
  if (r.has("init")) {
    auto m = r.child("init");
    m.read("feature_range", c.init.feature_range);
    m.read("offset_range", c.init.offset_range);
    m.read("zero_offsets", c.init.zero_offsets);
    m.read("initial_scale", c.init.initial_scale);
    m.read("random_count", c.random_init_count);
    m.read("random_extent", c.random_init_extent);
    m.finish();
  }
  if (r.has("loss")) {
    auto m = r.child("loss");
    m.read("lambda_ssim", c.loss.lambda);
    m.read("lambda_vol", c.loss.lambda_vol);
    m.read("lambda_hf", c.loss.lambda_hf);
    if (m.has("fpr")) {
      auto f = m.child("fpr");
      f.read("scales", c.fpr.scales);
      f.read("weights", c.fpr.weights);
      f.read("cutoff", c.fpr.cutoff);
      f.read("start_iter", c.fpr.start_iter);
      f.read("end_iter", c.fpr.end_iter);
      f.finish();
    }
    m.finish();
  }
  if (r.has("refinement")) {
    auto m = r.child("refinement");
    m.read("enabled", c.refine_enabled);
    m.read("start_iter", c.refine_start);
    m.read("end_iter", c.refine_end);
    m.read("epsilon_g", c.refine.epsilon_g);
    m.read("tau_g", c.refine.tau_g);
    m.read("levels", c.refine.levels);
    m.read("window", c.refine.window);
    m.read("prune_opacity", c.refine.prune_opacity);
    m.read("candidate_keep_prob", c.refine.candidate_keep_prob);
    m.finish();
  }
  if (r.has("optimizer")) {
    auto m = r.child("optimizer");
    m.read("lr_feature", c.optim.lr_feature);
    m.read("lr_offset", c.optim.lr_offset);
    m.read("lr_offset_final", c.optim.lr_offset_final);
    m.read("lr_scale", c.optim.lr_scale);
    m.read("lr_mlp", c.optim.lr_mlp);
    m.read("lr_afme", c.optim.lr_afme);
    m.read("beta1", c.optim.adam.beta1);
    m.read("beta2", c.optim.adam.beta2);
    m.read("eps", c.optim.adam.eps);
    m.finish();
  }
  if (r.has("render")) {
    auto m = r.child("render");
    m.read("tile_size", c.raster.tile_size);
    m.read("threads", c.raster.threads);
    m.finish();
  }
  if (r.has("split")) {
    auto m = r.child("split");
    KeyframeRule rule;
    std::string kind = "flags";
    m.read("rule", kind);
    try {
      rule.kind = KeyframeRule::parse_kind(kind);
    } catch (const ConfigError& e) {
      m.fail("rule", e.what());
    }
    m.read("every", rule.every);
    m.read("offset", rule.offset);
    m.read("covisibility", rule.covisibility);
    m.finish();
    if (rule.kind != KeyframeRule::Kind::Flags) c.split = rule;
  }
  r.finish();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

}  // namespace segs
