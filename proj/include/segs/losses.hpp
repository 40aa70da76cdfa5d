#pragma once

// Training objective and image metrics. Every loss comes with its gradient
// with respect to the rendered image.

#include "segs/fft.hpp"
#include "segs/image.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace segs {

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) throw InvalidInput(std::string(what) + ": image shapes differ");
}

// ---------------------------------------------------------------------------
// L1

inline double l1_loss(const Image& render, const Image& gt, Image* grad = nullptr) {
  require_same_shape(render, gt, "l1_loss");
  const double n = static_cast<double>(render.data.size());
  double sum = 0.0;
  if (grad) *grad = Image(render.width, render.height, 0.0);
  for (std::size_t i = 0; i < render.data.size(); ++i) {
    const double d = render.data[i] - gt.data[i];
    sum += std::abs(d);
    if (grad) grad->data[i] = (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) / n;
  }
  return n > 0 ? sum / n : 0.0;
}

// ---------------------------------------------------------------------------
// SSIM: 11x11 Gaussian window, sigma 1.5, valid positions only, averaged
// over positions and channels. C1 = 0.01^2, C2 = 0.03^2 on unit range.

namespace detail {

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;

inline const std::vector<double>& ssim_kernel() {
  static const std::vector<double> k = [] {
    std::vector<double> w(kSsimWindow);
    double s = 0.0;
    for (int i = 0; i < kSsimWindow; ++i) {
      const double x = i - kSsimWindow / 2;
      w[i] = std::exp(-x * x / (2.0 * kSsimSigma * kSsimSigma));
      s += w[i];
    }
    for (auto& v : w) v /= s;
    return w;
  }();
  return k;
}

// Separable valid correlation with the SSIM kernel.
inline Plane filter_valid(const Plane& in) {
  const auto& k = ssim_kernel();
  const int K = kSsimWindow;
  const int ow = in.width - K + 1, oh = in.height - K + 1;
  Plane tmp(ow, in.height);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < K; ++i) s += k[i] * in.at(x + i, y);
      tmp.at(x, y) = s;
    }
  Plane out(ow, oh);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < K; ++i) s += k[i] * tmp.at(x, y + i);
      out.at(x, y) = s;
    }
  return out;
}

// Adjoint of filter_valid.
inline Plane filter_valid_adjoint(const Plane& g, int width, int height) {
  const auto& k = ssim_kernel();
  const int K = kSsimWindow;
  Plane tmp(g.width, height);
  for (int y = 0; y < g.height; ++y)
    for (int x = 0; x < g.width; ++x)
      for (int i = 0; i < K; ++i) tmp.at(x, y + i) += k[i] * g.at(x, y);
  Plane out(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < g.width; ++x)
      for (int i = 0; i < K; ++i) out.at(x + i, y) += k[i] * tmp.at(x, y);
  return out;
}

inline Plane mul(const Plane& a, const Plane& b) {
  Plane o(a.width, a.height);
  for (std::size_t i = 0; i < a.data.size(); ++i) o.data[i] = a.data[i] * b.data[i];
  return o;
}

}  // namespace detail

inline double ssim(const Image& render, const Image& gt, Image* grad = nullptr) {
  using namespace detail;
  require_same_shape(render, gt, "ssim");
  if (render.width < kSsimWindow || render.height < kSsimWindow)
    throw ConfigError("ssim: image smaller than the 11x11 window");
  if (grad) *grad = Image(render.width, render.height, 0.0);
  const int W = render.width, H = render.height;
  const double P = static_cast<double>(W - kSsimWindow + 1) * (H - kSsimWindow + 1);
  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    const Plane x = channel(render, c), y = channel(gt, c);
    const Plane mx = filter_valid(x), my = filter_valid(y);
    const Plane mxx = filter_valid(mul(x, x)), myy = filter_valid(mul(y, y)), mxy = filter_valid(mul(x, y));
    Plane g_mx(mx.width, mx.height), g_mxx(mx.width, mx.height), g_mxy(mx.width, mx.height);
    for (std::size_t i = 0; i < mx.data.size(); ++i) {
      const double ux = mx.data[i], uy = my.data[i];
      const double vx = mxx.data[i] - ux * ux, vy = myy.data[i] - uy * uy, cxy = mxy.data[i] - ux * uy;
      const double A1 = 2.0 * ux * uy + kSsimC1, A2 = 2.0 * cxy + kSsimC2;
      const double B1 = ux * ux + uy * uy + kSsimC1, B2 = vx + vy + kSsimC2;
      const double S = (A1 * A2) / (B1 * B2);
      total += S;
      if (grad) {
        const double dS_dux = 2.0 * uy * A2 / (B1 * B2) - S * 2.0 * ux / B1;
        const double dS_dvx = -S / B2;
        const double dS_dcxy = 2.0 * A1 / (B1 * B2);
        g_mx.data[i] = dS_dux - 2.0 * ux * dS_dvx - uy * dS_dcxy;
        g_mxx.data[i] = dS_dvx;
        g_mxy.data[i] = dS_dcxy;
      }
    }
    if (grad) {
      const Plane a = filter_valid_adjoint(g_mx, W, H);
      const Plane b = filter_valid_adjoint(g_mxx, W, H);
      const Plane d = filter_valid_adjoint(g_mxy, W, H);
      const double scale = 1.0 / (3.0 * P);
      for (std::size_t i = 0; i < x.data.size(); ++i)
        grad->data[i * 3 + c] = scale * (a.data[i] + 2.0 * x.data[i] * b.data[i] + y.data[i] * d.data[i]);
    }
  }
  return total / (3.0 * P);
}

// ---------------------------------------------------------------------------
// Volume regularizer: sum over Gaussians of the product of their scales.

inline double volume_loss(std::span<const Vec3> scales, std::vector<Vec3>* grad = nullptr) {
  double sum = 0.0;
  if (grad) grad->assign(scales.size(), Vec3::Zero());
  for (std::size_t i = 0; i < scales.size(); ++i) {
    const Vec3& s = scales[i];
    sum += s.prod();
    if (grad) (*grad)[i] = Vec3(s.y() * s.z(), s.x() * s.z(), s.x() * s.y());
  }
  return sum;
}

// ---------------------------------------------------------------------------
// Frequency pyramid

struct FrequencyPyramidConfig {
  std::vector<double> scales{1.0, 0.5, 0.25};
  std::vector<double> weights{1.0, 1.0, 1.0};
  double cutoff = 0.15;   // fraction of Nyquist
  int start_iter = 3000;  // active for start_iter <= iter <= end_iter
  int end_iter = 15000;
  bool low_pass = false;  // ablation only: keep the complement of the mask

  void validate() const {
    if (scales.empty()) throw ConfigError("fpr: at least one scale required");
    if (weights.size() != scales.size()) throw ConfigError("fpr: one weight per scale required");
    for (double w : weights)
      if (!(w > 0.0)) throw ConfigError("fpr: scale weights must be positive");
    for (double s : scales)
      if (!(s > 0.0) || s > 1.0) throw ConfigError("fpr: scales must lie in (0, 1]");
    if (!(cutoff > 0.0) || !(cutoff < 1.0)) throw ConfigError("fpr: cutoff must lie in (0, 1)");
  }
  bool active(int iter) const { return iter >= start_iter && iter <= end_iter; }
};

/// Ideal radial high-pass: bins with centered radius below cutoff * Nyquist
/// (per-axis normalized) get 0, the rest 1.
inline std::vector<double> high_pass_mask(int width, int height, double cutoff, bool low_pass = false) {
  std::vector<double> m(static_cast<std::size_t>(width) * height);
  for (int v = 0; v < height; ++v) {
    const double fv = (v <= height / 2 ? v : v - height) / static_cast<double>(height) / 0.5;
    for (int u = 0; u < width; ++u) {
      const double fu = (u <= width / 2 ? u : u - width) / static_cast<double>(width) / 0.5;
      const bool pass = std::sqrt(fu * fu + fv * fv) >= cutoff;
      m[static_cast<std::size_t>(v) * width + u] = (pass != low_pass) ? 1.0 : 0.0;
    }
  }
  return m;
}

inline std::vector<Complex> high_pass_spectrum(const Plane& p, double cutoff) {
  auto F = dft2d_real(p.data, p.width, p.height);
  const auto mask = high_pass_mask(p.width, p.height, cutoff);
  for (std::size_t i = 0; i < F.size(); ++i) F[i] *= mask[i];
  return F;
}

/// 1D bilinear resampling weights with half-pixel centers (align_corners
/// off): out[i] = w0 * in[i0] + w1 * in[i1].
struct ResampleTap {
  int i0, i1;
  double w0, w1;
};

inline std::vector<ResampleTap> bilinear_taps(int in, int out) {
  std::vector<ResampleTap> taps(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    const double l1 = src - i0;
    taps[i] = {i0, i1, 1.0 - l1, l1};
  }
  return taps;
}

inline Plane bilinear_resize(const Plane& p, int ow, int oh) {
  const auto tx = bilinear_taps(p.width, ow), ty = bilinear_taps(p.height, oh);
  Plane o(ow, oh);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      const auto& a = ty[y];
      const auto& b = tx[x];
      o.at(x, y) = a.w0 * (b.w0 * p.at(b.i0, a.i0) + b.w1 * p.at(b.i1, a.i0)) +
                   a.w1 * (b.w0 * p.at(b.i0, a.i1) + b.w1 * p.at(b.i1, a.i1));
    }
  return o;
}

inline Plane bilinear_resize_adjoint(const Plane& g, int iw, int ih) {
  const auto tx = bilinear_taps(iw, g.width), ty = bilinear_taps(ih, g.height);
  Plane o(iw, ih);
  for (int y = 0; y < g.height; ++y)
    for (int x = 0; x < g.width; ++x) {
      const auto& a = ty[y];
      const auto& b = tx[x];
      const double v = g.at(x, y);
      o.at(b.i0, a.i0) += a.w0 * b.w0 * v;
      o.at(b.i1, a.i0) += a.w0 * b.w1 * v;
      o.at(b.i0, a.i1) += a.w1 * b.w0 * v;
      o.at(b.i1, a.i1) += a.w1 * b.w1 * v;
    }
  return o;
}

struct FprResult {
  double value = 0.0;
  Image grad;                       // dL/drender, filled when requested
  std::vector<double> skipped_scales;  // scales whose image fell below 4x4
};

/// sum_s weight_s / N_s * sum_{u,v,c} |H (F(render_s) - F(gt_s))|, N_s = H_s W_s.
inline FprResult frequency_pyramid_loss(const Image& render, const Image& gt, const FrequencyPyramidConfig& cfg,
                                        bool want_grad = false) {
  require_same_shape(render, gt, "frequency_pyramid_loss");
  cfg.validate();
  FprResult r;
  if (want_grad) r.grad = Image(render.width, render.height, 0.0);
  for (std::size_t si = 0; si < cfg.scales.size(); ++si) {
    const double s = cfg.scales[si];
    const int w = static_cast<int>(std::floor(render.width * s + 1e-9));
    const int h = static_cast<int>(std::floor(render.height * s + 1e-9));
    if (w < 4 || h < 4) {
      r.skipped_scales.push_back(s);
      continue;
    }
    const auto mask = high_pass_mask(w, h, cfg.cutoff, cfg.low_pass);
    const double coef = cfg.weights[si] / (static_cast<double>(w) * h);
    for (int c = 0; c < 3; ++c) {
      Plane diff = channel(render, c);
      const Plane g = channel(gt, c);
      for (std::size_t i = 0; i < diff.data.size(); ++i) diff.data[i] -= g.data[i];
      const bool resized = (w != render.width || h != render.height);
      const Plane d = resized ? bilinear_resize(diff, w, h) : diff;
      auto F = dft2d_real(d.data, w, h);
      std::vector<Complex> unit(F.size(), Complex(0.0, 0.0));
      for (std::size_t i = 0; i < F.size(); ++i) {
        const Complex z = F[i] * mask[i];
        const double mag = std::abs(z);
        r.value += coef * mag;
        if (want_grad && mag > 0.0) unit[i] = mask[i] * z / mag;
      }
      if (!want_grad) continue;
      // d|Z_k|/dD_n summed over k = N * Re(IDFT(U))_n with U_k = H_k Z_k / |Z_k|.
      const auto back = dft2d(unit, w, h, true);
      Plane gd(w, h);
      const double N = static_cast<double>(w) * h;
      for (std::size_t i = 0; i < back.size(); ++i) gd.data[i] = coef * N * back[i].real();
      const Plane gfull = resized ? bilinear_resize_adjoint(gd, render.width, render.height) : gd;
      for (std::size_t i = 0; i < gfull.data.size(); ++i) r.grad.data[i * 3 + c] += gfull.data[i];
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Total objective

struct LossWeights {
  double lambda = 0.2;
  double lambda_vol = 0.01;
  double lambda_hf = 0.01;

  void validate() const {
    if (lambda < 0.0 || lambda > 1.0) throw ConfigError("loss: lambda must lie in [0, 1]");
    if (lambda_vol < 0.0 || lambda_hf < 0.0) throw ConfigError("loss: weights must be non-negative");
  }
};

struct LossTerms {
  double l1 = 0.0;
  double ssim = 1.0;
  double vol = 0.0;
  double hf = 0.0;
  double total = 0.0;
  bool hf_active = false;
  Image grad_image;
  std::vector<Vec3> grad_scales;
};

/// (1 - lambda) L1 + lambda (1 - SSIM) + lambda_vol L_vol + lambda_hf L_hf,
/// with the last term only inside the pyramid's active window.
inline LossTerms total_loss(const Image& render, const Image& gt, std::span<const Vec3> scales,
                            const LossWeights& w, const FrequencyPyramidConfig& fpr, int iter, bool want_grad = true) {
  w.validate();
  LossTerms t;
  Image g_l1, g_ssim;
  t.l1 = l1_loss(render, gt, want_grad ? &g_l1 : nullptr);
  t.ssim = ssim(render, gt, want_grad ? &g_ssim : nullptr);
  t.vol = volume_loss(scales, want_grad ? &t.grad_scales : nullptr);
  t.hf_active = fpr.active(iter) && w.lambda_hf > 0.0;
  FprResult hf;
  if (t.hf_active) {
    hf = frequency_pyramid_loss(render, gt, fpr, want_grad);
    t.hf = hf.value;
  }
  t.total = (1.0 - w.lambda) * t.l1 + w.lambda * (1.0 - t.ssim) + w.lambda_vol * t.vol +
            (t.hf_active ? w.lambda_hf * t.hf : 0.0);
  if (want_grad) {
    t.grad_image = Image(render.width, render.height, 0.0);
    for (std::size_t i = 0; i < t.grad_image.data.size(); ++i) {
      double v = (1.0 - w.lambda) * g_l1.data[i] - w.lambda * g_ssim.data[i];
      if (t.hf_active) v += w.lambda_hf * hf.grad.data[i];
      t.grad_image.data[i] = v;
    }
    for (auto& g : t.grad_scales) g *= w.lambda_vol;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Metrics

inline double mse(const Image& a, const Image& b) {
  require_same_shape(a, b, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    s += d * d;
  }
  return a.data.empty() ? 0.0 : s / static_cast<double>(a.data.size());
}

inline double psnr_from_mse(double m) {
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / m);
}

/// 10 log10(1 / MSE); +inf for identical images.
inline double psnr(const Image& render, const Image& gt) { return psnr_from_mse(mse(render, gt)); }

}  // namespace segs
