#pragma once

// Tiny MLP decoders that turn anchors into renderable Gaussians, the
// pose-conditioned appearance encoder, and their reverse-mode gradients.

#include "segs/camera.hpp"
#include "segs/mlp.hpp"
#include "segs/scene.hpp"

#include <cmath>
#include <optional>
#include <vector>

namespace segs {

struct ViewContext {
  double distance = 0.0;                // delta_vc
  Vec3 direction = Vec3(0.0, 0.0, 1.0);  // (t_v - t_c) / delta_vc
};

/// +z is used when the camera sits exactly on the anchor.
inline ViewContext make_view_context(const Vec3& anchor_center, const Vec3& camera_center) {
  ViewContext v;
  const Vec3 d = anchor_center - camera_center;
  v.distance = d.norm();
  if (v.distance > 0.0) v.direction = d / v.distance;
  return v;
}

struct GaussianPrimitive {
  Vec3 mu = Vec3::Zero();
  double alpha = 0.0;
  Vec3 color = Vec3::Zero();
  Vec4 quat = Vec4(1, 0, 0, 0);
  Vec3 scale = Vec3::Ones();
  bool active = false;
};

/// Upstream gradient for one Gaussian.
struct GaussianGrad {
  Vec3 mu = Vec3::Zero();
  double alpha = 0.0;
  Vec3 color = Vec3::Zero();
  Vec4 quat = Vec4::Zero();
  Vec3 scale = Vec3::Zero();
};

struct DecoderConfig {
  int feature_dim = 32;
  int k = 10;
  int appearance_dim = 32;  // N_a; 0 disables the appearance input
  int hidden = 32;
  int afme_hidden = 0;      // 0: single linear layer

  int view_input_dim() const { return feature_dim + 4; }
  int color_input_dim() const { return view_input_dim() + appearance_dim; }
};

struct DecoderParams {
  DecoderConfig cfg;
  Mlp opacity;
  Mlp color;
  Mlp rotation;
  Mlp scale;
  Mlp afme;  // empty when appearance_dim == 0

  static DecoderParams init(const DecoderConfig& cfg, std::mt19937_64& rng) {
    DecoderParams p;
    p.cfg = cfg;
    p.opacity = Mlp::make(cfg.view_input_dim(), cfg.hidden, cfg.k, rng);
    p.color = Mlp::make(cfg.color_input_dim(), cfg.hidden, 3 * cfg.k, rng);
    p.rotation = Mlp::make(cfg.view_input_dim(), cfg.hidden, 4 * cfg.k, rng);
    p.scale = Mlp::make(cfg.view_input_dim(), cfg.hidden, 3 * cfg.k, rng);
    if (cfg.appearance_dim > 0) p.afme = Mlp::make(kPoseEncodingDim, cfg.afme_hidden, cfg.appearance_dim, rng);
    return p;
  }

  /// Rejects configurations whose layer shapes do not chain.
  void validate() const {
    auto check = [](const Mlp& m, int in, int out, const char* name) {
      if (m.input_dim() != in || m.output_dim() != out)
        throw ConfigError(std::string("decoder '") + name + "' has shape " + std::to_string(m.input_dim()) + "->" +
                          std::to_string(m.output_dim()) + ", expected " + std::to_string(in) + "->" +
                          std::to_string(out));
    };
    check(opacity, cfg.view_input_dim(), cfg.k, "opacity");
    check(color, cfg.color_input_dim(), 3 * cfg.k, "color");
    check(rotation, cfg.view_input_dim(), 4 * cfg.k, "rotation");
    check(scale, cfg.view_input_dim(), 3 * cfg.k, "scale");
    if (cfg.appearance_dim > 0) check(afme, kPoseEncodingDim, cfg.appearance_dim, "afme");
  }

  static constexpr int kPoseEncodingDim = 7;
};

/// [unit quaternion of R (w >= 0) | t] of the world-to-camera pose.
inline VecX encode_pose(const CameraPose& pose) {
  VecX e(DecoderParams::kPoseEncodingDim);
  e.head<4>() = rotation_to_quat(pose.R);
  e.tail<3>() = pose.t;
  return e;
}

/// Appearance embedding of a pose: afme(encode_pose(pose)).
inline VecX afme_embed(const CameraPose& pose, const Mlp& afme) { return afme.forward(encode_pose(pose)); }

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Everything produced by one decode pass, including what backward needs.
struct DecodedFrame {
  std::vector<GaussianPrimitive> gaussians;  // anchor-major: index = a * k + i
  int k = 0;

  MatX view_input;   // (F+4) x n
  MatX color_input;  // (F+4+N_a) x live
  MlpCache opacity_cache, color_cache, rotation_cache, scale_cache, afme_cache;
  MatX opacity_out;   // k x n, after tanh
  // The other heads run only on "live" anchors, those with at least one
  // active child; column c belongs to anchor live[c].
  std::vector<Eigen::Index> live;
  std::vector<Eigen::Index> live_col;  // per anchor: column in the head outputs, or -1
  MatX color_out;     // 3k x live, after sigmoid
  MatX rotation_raw;  // 4k x live, before normalization
  MatX scale_sig;     // 3k x live, sigmoid before multiplying by l_v
  VecX pose_encoding;
  VecX embedding;
  bool valid = false;
};

/// Decodes every anchor for a camera at `view_pose`. The appearance
/// embedding is computed from `appearance_pose`, which normally equals the
/// view pose; keeping them separate lets callers vary appearance alone.
inline DecodedFrame decode_frame(const std::vector<Anchor>& anchors, const DecoderParams& params,
                                 const CameraPose& view_pose, const CameraPose& appearance_pose) {
  const DecoderConfig& cfg = params.cfg;
  const Eigen::Index n = static_cast<Eigen::Index>(anchors.size());
  const int F = cfg.feature_dim;
  DecodedFrame f;
  f.k = cfg.k;
  f.view_input.resize(cfg.view_input_dim(), n);
  const Vec3 cam = view_pose.center();
  for (Eigen::Index a = 0; a < n; ++a) {
    const Anchor& an = anchors[static_cast<std::size_t>(a)];
    if (an.feature.size() != F || an.k() != cfg.k) throw ConfigError("decode: anchor dimensions do not match decoder");
    const ViewContext v = make_view_context(an.center, cam);
    f.view_input.block(0, a, F, 1) = an.feature;
    f.view_input(F, a) = v.distance;
    f.view_input.block(F + 1, a, 3, 1) = v.direction;
  }
  f.opacity_out = params.opacity.forward(f.view_input, &f.opacity_cache).array().tanh().matrix();

  const int k = cfg.k;
  f.live_col.assign(static_cast<std::size_t>(n), -1);
  for (Eigen::Index a = 0; a < n; ++a)
    if ((f.opacity_out.col(a).array() > 0.0).any()) {
      f.live_col[static_cast<std::size_t>(a)] = static_cast<Eigen::Index>(f.live.size());
      f.live.push_back(a);
    }
  const Eigen::Index nl = static_cast<Eigen::Index>(f.live.size());
  MatX view_live(cfg.view_input_dim(), nl);
  for (Eigen::Index c = 0; c < nl; ++c) view_live.col(c) = f.view_input.col(f.live[static_cast<std::size_t>(c)]);

  if (cfg.appearance_dim > 0) {
    f.pose_encoding = encode_pose(appearance_pose);
    f.embedding = params.afme.forward(f.pose_encoding, &f.afme_cache);
    f.color_input.resize(cfg.color_input_dim(), nl);
    f.color_input.topRows(cfg.view_input_dim()) = view_live;
    f.color_input.bottomRows(cfg.appearance_dim) = f.embedding.replicate(1, nl);
  } else {
    f.color_input = view_live;
  }

  f.color_out = params.color.forward(f.color_input, &f.color_cache).unaryExpr([](double x) { return sigmoid(x); });
  f.rotation_raw = params.rotation.forward(view_live, &f.rotation_cache);
  f.scale_sig = params.scale.forward(view_live, &f.scale_cache).unaryExpr([](double x) { return sigmoid(x); });

  f.gaussians.resize(static_cast<std::size_t>(n) * k);
  for (Eigen::Index a = 0; a < n; ++a) {
    const Anchor& an = anchors[static_cast<std::size_t>(a)];
    const Vec3 l = an.scale();
    const Eigen::Index col = f.live_col[static_cast<std::size_t>(a)];
    for (int i = 0; i < k; ++i) {
      GaussianPrimitive& g = f.gaussians[static_cast<std::size_t>(a) * k + i];
      g.mu = an.center + an.offsets.row(i).transpose().cwiseProduct(l);
      const double raw = f.opacity_out(i, a);
      g.active = raw > 0.0;
      g.alpha = g.active ? raw : 0.0;
      if (col < 0) {
        g.scale = l;  // placeholder; never rendered
        continue;
      }
      g.color = f.color_out.block(3 * i, col, 3, 1);
      const Vec4 q = f.rotation_raw.block(4 * i, col, 4, 1);
      const double qn = q.norm();
      g.quat = qn > 0.0 ? Vec4(q / qn) : Vec4(1, 0, 0, 0);
      g.scale = f.scale_sig.block(3 * i, col, 3, 1).cwiseProduct(l);
    }
  }
  f.valid = true;
  return f;
}

inline DecodedFrame decode_frame(const std::vector<Anchor>& anchors, const DecoderParams& params,
                                 const CameraPose& pose) {
  return decode_frame(anchors, params, pose, pose);
}

// Single-anchor views of the decoder heads. They share decode_frame's code
// path so there is exactly one definition of each head.

inline std::vector<Vec3> decode_color(const Anchor& anchor, const ViewContext& view, const VecX& embedding,
                                      const DecoderParams& params) {
  const DecoderConfig& cfg = params.cfg;
  if (embedding.size() != cfg.appearance_dim || params.color.input_dim() != cfg.color_input_dim())
    throw ConfigError("decode_color: input dimension must be feature_dim + 4 + N_a");
  VecX x(cfg.color_input_dim());
  x.head(cfg.feature_dim) = anchor.feature;
  x[cfg.feature_dim] = view.distance;
  x.segment(cfg.feature_dim + 1, 3) = view.direction;
  if (cfg.appearance_dim > 0) x.tail(cfg.appearance_dim) = embedding;
  const MatX y = params.color.forward(x);
  std::vector<Vec3> out(static_cast<std::size_t>(cfg.k));
  for (int i = 0; i < cfg.k; ++i)
    for (int c = 0; c < 3; ++c) out[i][c] = sigmoid(y(3 * i + c, 0));
  return out;
}

inline VecX view_input(const Anchor& anchor, const ViewContext& view) {
  VecX x(anchor.feature.size() + 4);
  x.head(anchor.feature.size()) = anchor.feature;
  x[anchor.feature.size()] = view.distance;
  x.tail<3>() = view.direction;
  return x;
}

/// tanh opacity per child; nullopt marks an inactive Gaussian (value <= 0).
inline std::vector<std::optional<double>> decode_opacity(const Anchor& anchor, const ViewContext& view,
                                                         const DecoderParams& params) {
  const MatX y = params.opacity.forward(view_input(anchor, view));
  std::vector<std::optional<double>> out(static_cast<std::size_t>(y.rows()));
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const double a = std::tanh(y(i, 0));
    if (a > 0.0) out[static_cast<std::size_t>(i)] = a;
  }
  return out;
}

inline Vec4 normalize_quat_block(const Vec4& q) {
  const double n = q.norm();
  return n > 0.0 ? Vec4(q / n) : Vec4(1, 0, 0, 0);
}

inline std::vector<Vec4> decode_rotation(const Anchor& anchor, const ViewContext& view, const DecoderParams& params) {
  const MatX y = params.rotation.forward(view_input(anchor, view));
  std::vector<Vec4> out(static_cast<std::size_t>(y.rows() / 4));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = normalize_quat_block(y.block(4 * i, 0, 4, 1));
  return out;
}

inline std::vector<Vec3> decode_scale(const Anchor& anchor, const ViewContext& view, const DecoderParams& params) {
  const MatX y = params.scale.forward(view_input(anchor, view));
  const Vec3 l = anchor.scale();
  std::vector<Vec3> out(static_cast<std::size_t>(y.rows() / 3));
  for (std::size_t i = 0; i < out.size(); ++i)
    for (int c = 0; c < 3; ++c) out[i][c] = sigmoid(y(3 * i + c, 0)) * l[c];
  return out;
}

struct AnchorGrad {
  VecX feature;
  OffsetMatrix offsets;
  Vec3 log_scale = Vec3::Zero();
};

struct DecoderGrads {
  MlpGrad opacity, color, rotation, scale, afme;
  std::vector<AnchorGrad> anchors;
  VecX embedding;      // dL/d(appearance embedding)
  VecX pose_encoding;  // dL/d(encode_pose(appearance_pose))
};

/// Reverse pass through positions, heads, activations and the appearance
/// encoder. `upstream` is indexed like DecodedFrame::gaussians.
inline DecoderGrads backward_decoders(const DecodedFrame& f, const std::vector<GaussianGrad>& upstream,
                                      const std::vector<Anchor>& anchors, const DecoderParams& params) {
  if (!f.valid) throw UsageError("backward_decoders: missing forward cache");
  const DecoderConfig& cfg = params.cfg;
  const int k = cfg.k;
  const Eigen::Index n = static_cast<Eigen::Index>(anchors.size());
  if (upstream.size() != f.gaussians.size() || f.view_input.cols() != n)
    throw UsageError("backward_decoders: gradient/cache size mismatch");

  DecoderGrads g;
  g.opacity = params.opacity.zero_grad();
  g.color = params.color.zero_grad();
  g.rotation = params.rotation.zero_grad();
  g.scale = params.scale.zero_grad();
  if (cfg.appearance_dim > 0) g.afme = params.afme.zero_grad();
  g.anchors.resize(anchors.size());

  const Eigen::Index nl = static_cast<Eigen::Index>(f.live.size());
  MatX d_opacity(k, n), d_color(3 * k, nl), d_rotation(4 * k, nl), d_scale(3 * k, nl);
  for (Eigen::Index a = 0; a < n; ++a) {
    const Anchor& an = anchors[static_cast<std::size_t>(a)];
    AnchorGrad& ag = g.anchors[static_cast<std::size_t>(a)];
    ag.feature = VecX::Zero(cfg.feature_dim);
    ag.offsets = OffsetMatrix::Zero(k, 3);
    const Vec3 l = an.scale();
    const Eigen::Index col = f.live_col[static_cast<std::size_t>(a)];
    for (int i = 0; i < k; ++i) {
      const GaussianGrad& u = upstream[static_cast<std::size_t>(a) * k + i];
      // mu = t + O * l, l = exp(log_scale)
      const Vec3 dmu_l = u.mu.cwiseProduct(l);
      ag.offsets.row(i) = dmu_l.transpose();
      ag.log_scale += dmu_l.cwiseProduct(an.offsets.row(i).transpose());

      const double op = f.opacity_out(i, a);
      d_opacity(i, a) = op > 0.0 ? u.alpha * (1.0 - op * op) : 0.0;
      if (col < 0) continue;

      for (int c = 0; c < 3; ++c) {
        const double s = f.color_out(3 * i + c, col);
        d_color(3 * i + c, col) = u.color[c] * s * (1.0 - s);
      }

      const Vec4 q = f.rotation_raw.block(4 * i, col, 4, 1);
      const double qn = q.norm();
      if (qn > 0.0) {
        const Vec4 qu = q / qn;
        d_rotation.block(4 * i, col, 4, 1) = (u.quat - qu * qu.dot(u.quat)) / qn;
      } else {
        d_rotation.block(4 * i, col, 4, 1).setZero();
      }

      for (int c = 0; c < 3; ++c) {
        const double s = f.scale_sig(3 * i + c, col);
        d_scale(3 * i + c, col) = u.scale[c] * l[c] * s * (1.0 - s);
        ag.log_scale[c] += u.scale[c] * s * l[c];
      }
    }
  }

  const MatX dx_op = params.opacity.backward(d_opacity, f.opacity_cache, g.opacity);
  const MatX dx_rot = params.rotation.backward(d_rotation, f.rotation_cache, g.rotation);
  const MatX dx_sc = params.scale.backward(d_scale, f.scale_cache, g.scale);
  const MatX dx_col = params.color.backward(d_color, f.color_cache, g.color);

  const int F = cfg.feature_dim;
  for (Eigen::Index a = 0; a < n; ++a) g.anchors[static_cast<std::size_t>(a)].feature += dx_op.block(0, a, F, 1);
  for (Eigen::Index c = 0; c < nl; ++c) {
    VecX& df = g.anchors[static_cast<std::size_t>(f.live[static_cast<std::size_t>(c)])].feature;
    df += dx_rot.block(0, c, F, 1);
    df += dx_sc.block(0, c, F, 1);
    df += dx_col.block(0, c, F, 1);
  }
  if (cfg.appearance_dim > 0) {
    g.embedding = dx_col.bottomRows(cfg.appearance_dim).rowwise().sum();
    g.pose_encoding = params.afme.backward(g.embedding, f.afme_cache, g.afme);
  }
  return g;
}

}  // namespace segs
