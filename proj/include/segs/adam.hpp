#pragma once

#include "segs/mlp.hpp"
#include "segs/scene.hpp"

#include <cmath>
#include <cstddef>

namespace segs {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-15;

  void validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("optimizer: betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("optimizer: eps must be positive");
  }
};

/// In-place Adam update of n parameters; `step` is 1-based.
inline void adam_update(double* param, const double* grad, double* m, double* v, std::size_t n, double lr,
                        long long step, const AdamConfig& cfg) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mh = m[i] / bc1;
    const double vh = v[i] / bc2;
    param[i] -= lr * mh / (std::sqrt(vh) + cfg.eps);
  }
}

template <typename P, typename G>
void adam_update(P& param, const G& grad, P& m, P& v, double lr, long long step, const AdamConfig& cfg) {
  adam_update(param.data(), grad.data(), m.data(), v.data(), static_cast<std::size_t>(param.size()), lr, step, cfg);
}

/// First and second moments shaped like an Mlp.
struct MlpMoments {
  MlpGrad m, v;

  static MlpMoments zeros(const Mlp& net) { return {net.zero_grad(), net.zero_grad()}; }

  void step(Mlp& net, const MlpGrad& g, double lr, long long t, const AdamConfig& cfg) {
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      adam_update(net.layers[l].weight, g.weight[l], m.weight[l], v.weight[l], lr, t, cfg);
      adam_update(net.layers[l].bias, g.bias[l], m.bias[l], v.bias[l], lr, t, cfg);
    }
  }
};

/// Moments of one anchor's learnable parameters. Anchors grown during
/// training start from zero moments and their own step counter.
struct AnchorMoments {
  VecX m_feature, v_feature;
  OffsetMatrix m_offsets, v_offsets;
  Vec3 m_log_scale = Vec3::Zero(), v_log_scale = Vec3::Zero();
  long long steps = 0;

  static AnchorMoments zeros(const Anchor& a) {
    AnchorMoments mo;
    mo.m_feature = mo.v_feature = VecX::Zero(a.feature.size());
    mo.m_offsets = mo.v_offsets = OffsetMatrix::Zero(a.k(), 3);
    return mo;
  }
};

}  // namespace segs
