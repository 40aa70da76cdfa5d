#pragma once

// Finite-difference check of the whole training path on a single-anchor
// scene: total loss -> rasterizer -> projection -> decoders -> anchor
// parameters, decoder MLP weights and the appearance encoder.

#include "segs/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace segs::testing {

struct PipelineInstance {
  TrainState state;
  Keyframe frame;
  TrainConfig cfg;
  int iteration = 0;
};

namespace detail {

// The loss is piecewise smooth: ReLU units, the opacity sign test and the
// depth order all switch branches somewhere. Instances sitting within a
// probe step of a switch are redrawn.
inline bool away_from_kinks(const TrainState& s, const FrameRender& fr, const CameraPose& pose, double margin = 0.02) {
  const DecodedFrame& d = fr.decoded;
  const std::pair<const Mlp*, const MlpCache*> nets[] = {{&s.decoders.opacity, &d.opacity_cache},
                                                         {&s.decoders.color, &d.color_cache},
                                                         {&s.decoders.rotation, &d.rotation_cache},
                                                         {&s.decoders.scale, &d.scale_cache}};
  for (const auto& [net, cache] : nets)
    for (std::size_t l = 0; l + 1 < net->layers.size(); ++l) {
      const MatX pre = (net->layers[l].weight * cache->inputs[l]).colwise() + net->layers[l].bias;
      if (pre.size() && pre.cwiseAbs().minCoeff() < margin) return false;
    }
  if (d.opacity_out.size() && d.opacity_out.cwiseAbs().minCoeff() < margin) return false;
  std::vector<double> depth;
  for (const auto& g : d.gaussians) depth.push_back(pose.transform(g.mu).z());
  std::sort(depth.begin(), depth.end());
  for (std::size_t i = 1; i < depth.size(); ++i)
    if (depth[i] - depth[i - 1] < 1e-3) return false;
  return true;
}

}  // namespace detail

inline PipelineInstance make_pipeline_instance(std::uint64_t seed, int k = 4, int feature_dim = 6, int appearance = 3,
                                               int hidden = 8) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int attempt = 0;; ++attempt) {
    PipelineInstance p;
    p.cfg.model.k = k;
    p.cfg.model.feature_dim = feature_dim;
    p.cfg.model.appearance_dim = appearance;
    p.cfg.model.hidden = hidden;
    p.cfg.fpr.start_iter = 0;
    p.cfg.fpr.end_iter = 10;
    p.cfg.fpr.scales = {1.0, 0.5};
    p.cfg.fpr.weights = {1.0, 0.7};
    p.cfg.loss.lambda_vol = 0.5;  // large enough that the volume path matters
    p.cfg.loss.lambda_hf = 0.3;
    // The 1/255 skip makes the loss jump where a fragment crosses it; push
    // it out of reach of the probe steps.
    p.cfg.raster.alpha_min = 1e-12;
    p.iteration = 5;
    p.state.camera = PinholeCamera{26.0, 24.0, 11.7, 12.2, 24, 24};
    p.state.decoders = DecoderParams::init(p.cfg.model, rng);
    // Shift opacity biases up so most children are active.
    p.state.decoders.opacity.layers.back().bias.array() += 0.6;
    Anchor a;
    a.center = 0.05 * Vec3(u(rng), u(rng), u(rng));
    a.feature = VecX(feature_dim);
    for (int i = 0; i < feature_dim; ++i) a.feature[i] = u(rng);
    a.offsets = OffsetMatrix(k, 3);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < 3; ++j) a.offsets(i, j) = 1.5 * u(rng);
    a.log_scale = Vec3(std::log(0.12) + 0.3 * u(rng), std::log(0.12) + 0.3 * u(rng), std::log(0.12) + 0.3 * u(rng));
    p.state.anchors = {a};
    const Vec3 dir = Vec3(u(rng), u(rng), u(rng)).normalized();
    p.frame.pose = look_at(1.2 * dir + Vec3(0.02, -0.03, 0.01), Vec3::Zero(), std::abs(dir.z()) > 0.9 ? Vec3(1, 0, 0) : Vec3(0, 0, 1));
    const FrameRender fr = render_frame(p.state, p.frame.pose, p.cfg.raster);
    // Target at least 0.1 away from the render in every channel, so no L1
    // residual changes sign within a probe step.
    std::uniform_real_distribution<double> gap(0.1, 0.4);
    p.frame.image = fr.raster.image;
    for (double& v : p.frame.image.data) v = v > 0.5 ? v - gap(rng) : v + gap(rng);
    bool clamped = false;
    for (const auto& s : fr.splats) clamped |= s.alpha > 0.95;
    if (fr.splats.size() >= 2 && !clamped && detail::away_from_kinks(p.state, fr, p.frame.pose)) return p;
    if (attempt > 1000) throw std::runtime_error("make_pipeline_instance: no usable instance");
  }
}

struct FdReport {
  double max_rel_err = 0.0;
  std::string worst;
  int checks = 0;
};

namespace detail {

inline double rel_err(double a, double f) {
  const double scale = std::max(std::abs(a), std::abs(f));
  if (scale < 1e-9) return 0.0;  // both vanish to finite-difference resolution
  return std::abs(a - f) / scale;
}

struct Slot {
  double* value;
  double grad;
};

}  // namespace detail

/// Central differences, coordinate-wise for anchor parameters and along
/// random directions for each MLP. Returns the worst relative error.
/// Steps h, h/2 and h/4 are combined by two rounds of Richardson
/// extrapolation; the loss is O(1-10), so a plain central difference at
/// small h drowns components near 1e-6 in rounding noise.
inline FdReport check_pipeline_gradients(PipelineInstance& p, std::uint64_t seed, int directions = 3,
                                         double h = 1e-3) {
  const StepGradients g = compute_gradients(p.state, p.frame, p.cfg, p.iteration);
  auto loss = [&] { return forward_loss(p.state, p.frame, p.cfg, p.iteration).total; };
  FdReport rep;
  auto record = [&](double a, double f, const std::string& what) {
    const double e = detail::rel_err(a, f);
    ++rep.checks;
    if (e > rep.max_rel_err) {
      rep.max_rel_err = e;
      rep.worst = what + " analytic=" + std::to_string(a) + " fd=" + std::to_string(f);
    }
  };
  auto check_dir = [&](std::vector<detail::Slot>& slots, const std::vector<double>& dir, const std::string& what) {
    double analytic = 0.0;
    for (std::size_t i = 0; i < slots.size(); ++i) analytic += slots[i].grad * dir[i];
    std::vector<double> saved;
    for (auto& s : slots) saved.push_back(*s.value);
    auto at = [&](double t) {
      for (std::size_t i = 0; i < slots.size(); ++i) *slots[i].value = saved[i] + t * dir[i];
      return loss();
    };
    auto central = [&](double t) { return (at(t) - at(-t)) / (2.0 * t); };
    const double d1 = central(h), d2 = central(0.5 * h), d4 = central(0.25 * h);
    const double r12 = (4.0 * d2 - d1) / 3.0, r24 = (4.0 * d4 - d2) / 3.0;
    for (std::size_t i = 0; i < slots.size(); ++i) *slots[i].value = saved[i];
    record(analytic, (16.0 * r24 - r12) / 15.0, what);
  };

  Anchor& a = p.state.anchors[0];
  const AnchorGrad& ag = g.decoder.anchors.at(0);
  auto coord = [&](double* v, double grad, const std::string& what) {
    std::vector<detail::Slot> s{{v, grad}};
    check_dir(s, {1.0}, what);
  };
  for (Eigen::Index i = 0; i < a.feature.size(); ++i) coord(&a.feature[i], ag.feature[i], "feature[" + std::to_string(i) + "]");
  for (Eigen::Index i = 0; i < a.offsets.size(); ++i)
    coord(a.offsets.data() + i, ag.offsets.data()[i], "offset[" + std::to_string(i) + "]");
  for (int i = 0; i < 3; ++i) coord(&a.log_scale[i], ag.log_scale[i], "log_scale[" + std::to_string(i) + "]");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  const std::pair<Mlp*, const MlpGrad*> nets[] = {{&p.state.decoders.opacity, &g.decoder.opacity},
                                                  {&p.state.decoders.color, &g.decoder.color},
                                                  {&p.state.decoders.rotation, &g.decoder.rotation},
                                                  {&p.state.decoders.scale, &g.decoder.scale},
                                                  {&p.state.decoders.afme, &g.decoder.afme}};
  const char* names[] = {"opacity", "color", "rotation", "scale", "afme"};
  for (int n = 0; n < 5; ++n) {
    Mlp& net = *nets[n].first;
    const MlpGrad& mg = *nets[n].second;
    std::vector<detail::Slot> slots;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      for (Eigen::Index i = 0; i < net.layers[l].weight.size(); ++i)
        slots.push_back({net.layers[l].weight.data() + i, mg.weight[l].data()[i]});
      for (Eigen::Index i = 0; i < net.layers[l].bias.size(); ++i)
        slots.push_back({net.layers[l].bias.data() + i, mg.bias[l].data()[i]});
    }
    if (slots.empty()) continue;
    for (int d = 0; d < directions; ++d) {
      std::vector<double> dir(slots.size());
      double norm = 0.0;
      for (double& v : dir) {
        v = n01(rng);
        norm += v * v;
      }
      for (double& v : dir) v /= std::sqrt(norm);
      check_dir(slots, dir, std::string(names[n]) + " dir " + std::to_string(d));
    }
  }
  return rep;
}

}  // namespace segs::testing
