#pragma once

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "mobilesal/ops.hpp"

namespace mobilesal {

struct LossConfig {
  double lambda = 0.3;       // weight of the depth-restoration term
  double dice_smooth = 1.0;  // epsilon in the Dice ratio
  double bce_clamp = 1e-7;   // probability floor/ceiling before logs
  int ssim_window = 11;
  double ssim_sigma = 1.5;
  double ssim_k1 = 0.01;
  double ssim_k2 = 0.03;
  double ssim_range = 1.0;  // dynamic range L

  void validate() const {
    if (lambda < 0) throw StateError("loss config: lambda must be >= 0");
    if (!(bce_clamp > 0 && bce_clamp < 0.5)) {
      throw StateError("loss config: bce_clamp must be in (0, 0.5)");
    }
    if (ssim_window < 1 || ssim_window % 2 == 0) {
      throw StateError("loss config: ssim_window must be odd and >= 1");
    }
    if (ssim_sigma <= 0) throw StateError("loss config: ssim_sigma must be > 0");
  }
};

// Mean binary cross-entropy, predictions clamped to
// [bce_clamp, 1 - bce_clamp] before the logs. Differentiates with respect to
// the prediction only; the mask is a label.
template <typename S>
Tensor<S> bce_loss(const Tensor<S>& p, const Tensor<S>& gt, double clamp,
                   Graph<S>* g = nullptr) {
  if (!(p.shape() == gt.shape())) {
    throw ShapeError("bce_loss: shape mismatch " + p.shape().str() + " vs " +
                     gt.shape().str());
  }
  const Eigen::Index n = p.size();
  double sum = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double pc = std::min(std::max(static_cast<double>(p.data()[i]), clamp),
                               1.0 - clamp);
    const double gv = gt.data()[i];
    sum -= gv * std::log(pc) + (1.0 - gv) * std::log(1.0 - pc);
  }
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(sum / n));
  if (g) {
    Tensor<S> pc = p, gc = gt, outc = out;
    g->record("bce_loss", [pc, gc, outc, clamp]() mutable {
      if (!outc.has_grad()) return;
      const double go = outc.grad()[0];
      const Eigen::Index n = pc.size();
      auto& dp = pc.grad();
      for (Eigen::Index i = 0; i < n; ++i) {
        const double pv = pc.data()[i];
        if (pv <= clamp || pv >= 1.0 - clamp) continue;  // clamped coordinates
        const double gv = gc.data()[i];
        dp[i] += static_cast<S>(go * (-gv / pv + (1.0 - gv) / (1.0 - pv)) / n);
      }
    });
  }
  return out;
}

// Dice loss, computed per image and averaged over the batch:
//   1 - (2 sum(PG) + eps) / (sum P + sum G + eps)
template <typename S>
Tensor<S> dice_loss(const Tensor<S>& p, const Tensor<S>& gt, double smooth,
                    Graph<S>* g = nullptr) {
  if (!(p.shape() == gt.shape())) {
    throw ShapeError("dice_loss: shape mismatch " + p.shape().str() + " vs " +
                     gt.shape().str());
  }
  const auto& s = p.shape();
  const Eigen::Index per = s.c * s.h * s.w;
  std::vector<double> numer(s.n), denom(s.n);
  double total = 0;
  for (Eigen::Index b = 0; b < s.n; ++b) {
    double inter = 0, sp = 0, sg = 0;
    const S* pp = p.data() + b * per;
    const S* gp = gt.data() + b * per;
    for (Eigen::Index i = 0; i < per; ++i) {
      inter += static_cast<double>(pp[i]) * gp[i];
      sp += pp[i];
      sg += gp[i];
    }
    numer[b] = 2.0 * inter + smooth;
    denom[b] = sp + sg + smooth;
    total += 1.0 - numer[b] / denom[b];
  }
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(total / s.n));
  if (g) {
    Tensor<S> pc = p, gc = gt, outc = out;
    g->record("dice_loss", [pc, gc, outc, numer, denom]() mutable {
      if (!outc.has_grad()) return;
      const double go = outc.grad()[0];
      const auto& s = pc.shape();
      const Eigen::Index per = s.c * s.h * s.w;
      auto& dp = pc.grad();
      for (Eigen::Index b = 0; b < s.n; ++b) {
        const S* gp = gc.data() + b * per;
        const double d = denom[b], nu = numer[b];
        for (Eigen::Index i = 0; i < per; ++i) {
          // d/dP of (1 - nu/d) with nu = 2 sum(PG)+eps, d = sum P + sum G+eps
          const double grad = -(2.0 * gp[i] * d - nu) / (d * d);
          dp[b * per + i] += static_cast<S>(go * grad / s.n);
        }
      }
    });
  }
  return out;
}

namespace detail {

// Separable Gaussian correlation with zero padding, double precision.
inline void gauss_filter(const Eigen::ArrayXd& in, Eigen::ArrayXd& out,
                         Eigen::Index h, Eigen::Index w,
                         const std::vector<double>& kernel,
                         Eigen::ArrayXd& tmp) {
  const int k = static_cast<int>(kernel.size());
  const int r = k / 2;
  tmp.resize(h * w);
  out.resize(h * w);
  // horizontal
  for (Eigen::Index y = 0; y < h; ++y) {
    for (Eigen::Index x = 0; x < w; ++x) {
      double acc = 0;
      const int lo = static_cast<int>(std::max<Eigen::Index>(0, x - r) - x + r);
      const int hi =
          static_cast<int>(std::min<Eigen::Index>(w - 1, x + r) - x + r);
      for (int t = lo; t <= hi; ++t) {
        acc += kernel[t] * in[y * w + x + t - r];
      }
      tmp[y * w + x] = acc;
    }
  }
  // vertical
  for (Eigen::Index y = 0; y < h; ++y) {
    const int lo = static_cast<int>(std::max<Eigen::Index>(0, y - r) - y + r);
    const int hi =
        static_cast<int>(std::min<Eigen::Index>(h - 1, y + r) - y + r);
    for (Eigen::Index x = 0; x < w; ++x) {
      double acc = 0;
      for (int t = lo; t <= hi; ++t) {
        acc += kernel[t] * tmp[(y + t - r) * w + x];
      }
      out[y * w + x] = acc;
    }
  }
}

inline std::vector<double> gauss_kernel(int window, double sigma) {
  std::vector<double> k(window);
  const double c = (window - 1) / 2.0;
  double sum = 0;
  for (int i = 0; i < window; ++i) {
    k[i] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

// State shared between the SSIM forward pass and its backward closure.
struct SsimPlaneFields {
  Eigen::ArrayXd mu1, mu2, s11, s22, s12;
};

}  // namespace detail

// Mean structural similarity over single-channel maps with a Gaussian window
// (cropped and renormalized at borders, so images smaller than the window are
// fine). Returns a scalar in [-1, 1]; gradients flow to the first argument.
template <typename S>
Tensor<S> ssim(const Tensor<S>& x, const Tensor<S>& y, const LossConfig& cfg,
               Graph<S>* g = nullptr) {
  cfg.validate();
  if (!(x.shape() == y.shape())) {
    throw ShapeError("ssim: shape mismatch " + x.shape().str() + " vs " +
                     y.shape().str());
  }
  if (x.shape().c != 1) {
    throw ShapeError("ssim: expects single-channel maps, got " +
                     x.shape().str());
  }
  const auto& s = x.shape();
  const Eigen::Index h = s.h, w = s.w, hw = h * w;
  const auto kernel = detail::gauss_kernel(cfg.ssim_window, cfg.ssim_sigma);
  const double c1 = (cfg.ssim_k1 * cfg.ssim_range) * (cfg.ssim_k1 * cfg.ssim_range);
  const double c2 = (cfg.ssim_k2 * cfg.ssim_range) * (cfg.ssim_k2 * cfg.ssim_range);

  // Border renormalization: F(v) = G(v) / G(1).
  Eigen::ArrayXd norm, tmp;
  detail::gauss_filter(Eigen::ArrayXd::Ones(hw), norm, h, w, kernel, tmp);

  auto fields = std::make_shared<std::vector<detail::SsimPlaneFields>>(s.n);
  double total = 0;
  Eigen::ArrayXd xp(hw), yp(hw), f(hw);
  for (Eigen::Index b = 0; b < s.n; ++b) {
    for (Eigen::Index i = 0; i < hw; ++i) {
      xp[i] = x.data()[b * hw + i];
      yp[i] = y.data()[b * hw + i];
    }
    auto& pf = (*fields)[b];
    detail::gauss_filter(xp, f, h, w, kernel, tmp);
    pf.mu1 = f / norm;
    detail::gauss_filter(yp, f, h, w, kernel, tmp);
    pf.mu2 = f / norm;
    detail::gauss_filter(xp * xp, f, h, w, kernel, tmp);
    pf.s11 = f / norm - pf.mu1.square();
    detail::gauss_filter(yp * yp, f, h, w, kernel, tmp);
    pf.s22 = f / norm - pf.mu2.square();
    detail::gauss_filter(xp * yp, f, h, w, kernel, tmp);
    pf.s12 = f / norm - pf.mu1 * pf.mu2;
    Eigen::ArrayXd a1 = 2.0 * pf.mu1 * pf.mu2 + c1;
    Eigen::ArrayXd a2 = 2.0 * pf.s12 + c2;
    Eigen::ArrayXd b1 = pf.mu1.square() + pf.mu2.square() + c1;
    Eigen::ArrayXd b2 = pf.s11 + pf.s22 + c2;
    total += ((a1 * a2) / (b1 * b2)).sum();
  }
  const Eigen::Index count = s.n * hw;
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(total / count));

  if (g) {
    Tensor<S> xc = x, yc = y, outc = out;
    g->record("ssim", [xc, yc, outc, fields, norm, kernel, c1, c2]() mutable {
      if (!outc.has_grad()) return;
      const auto& s = xc.shape();
      const Eigen::Index h = s.h, w = s.w, hw = h * w;
      const double gscale =
          static_cast<double>(outc.grad()[0]) / static_cast<double>(s.n * hw);
      Eigen::ArrayXd tmp, filt, xp(hw), yp(hw);
      auto& dx = xc.grad();
      for (Eigen::Index b = 0; b < s.n; ++b) {
        const auto& pf = (*fields)[b];
        for (Eigen::Index i = 0; i < hw; ++i) {
          xp[i] = xc.data()[b * hw + i];
          yp[i] = yc.data()[b * hw + i];
        }
        Eigen::ArrayXd a1 = 2.0 * pf.mu1 * pf.mu2 + c1;
        Eigen::ArrayXd a2 = 2.0 * pf.s12 + c2;
        Eigen::ArrayXd b1 = pf.mu1.square() + pf.mu2.square() + c1;
        Eigen::ArrayXd b2 = pf.s11 + pf.s22 + c2;
        Eigen::ArrayXd inv_bb = 1.0 / (b1 * b2);
        Eigen::ArrayXd g_a1 = gscale * a2 * inv_bb;
        Eigen::ArrayXd g_a2 = gscale * a1 * inv_bb;
        Eigen::ArrayXd g_b1 = -gscale * a1 * a2 * inv_bb / b1;
        Eigen::ArrayXd g_b2 = -gscale * a1 * a2 * inv_bb / b2;
        Eigen::ArrayXd g_s12 = 2.0 * g_a2;
        Eigen::ArrayXd g_s11 = g_b2;
        Eigen::ArrayXd g_mu1 = 2.0 * pf.mu2 * g_a1 + 2.0 * pf.mu1 * g_b1 -
                               2.0 * pf.mu1 * g_s11 - pf.mu2 * g_s12;
        // dX = F^T(g_mu1) + 2x .* F^T(g_m11) + y .* F^T(g_m12)
        // with F^T(v) = G(v / norm) for the symmetric Gaussian.
        Eigen::ArrayXd acc(hw);
        detail::gauss_filter(g_mu1 / norm, filt, h, w, kernel, tmp);
        acc = filt;
        detail::gauss_filter(g_s11 / norm, filt, h, w, kernel, tmp);
        acc += 2.0 * xp * filt;
        detail::gauss_filter(g_s12 / norm, filt, h, w, kernel, tmp);
        acc += yp * filt;
        for (Eigen::Index i = 0; i < hw; ++i) {
          dx[b * hw + i] += static_cast<S>(acc[i]);
        }
      }
    });
  }
  return out;
}

// Depth-restoration loss: 1 - SSIM(restored, target); range [0, 2].
template <typename S>
Tensor<S> idr_loss(const Tensor<S>& restored, const Tensor<S>& target,
                   const LossConfig& cfg, Graph<S>* g = nullptr) {
  return affine(ssim(restored, target, cfg, g), S(-1), S(1), g);
}

// Hybrid training loss: sum of BCE + Dice over the five side outputs plus
// lambda times the depth-restoration term.
template <typename S>
struct TotalLossResult {
  Tensor<S> total;
  std::array<double, 5> bce{};
  std::array<double, 5> dice{};
  double sal_sum = 0;
  std::optional<double> idr;
};

template <typename S>
TotalLossResult<S> total_loss(std::span<const Tensor<S>, 5> preds,
                              const Tensor<S>& gt,
                              const std::type_identity_t<Tensor<S>>* restored,
                              const std::type_identity_t<Tensor<S>>* depth_gt,
                              const LossConfig& cfg, Graph<S>* g = nullptr) {
  cfg.validate();
  if (cfg.lambda > 0 && (!restored || !depth_gt)) {
    throw StateError("total_loss: lambda > 0 but no restored depth provided");
  }
  TotalLossResult<S> r;
  Tensor<S> acc;
  for (int i = 0; i < 5; ++i) {
    Tensor<S> b = bce_loss(preds[i], gt, cfg.bce_clamp, g);
    Tensor<S> d = dice_loss(preds[i], gt, cfg.dice_smooth, g);
    r.bce[i] = b.value();
    r.dice[i] = d.value();
    Tensor<S> term = add(b, d, g);
    acc = i == 0 ? term : add(acc, term, g);
  }
  r.sal_sum = acc.value();
  if (restored && depth_gt) {
    Tensor<S> idr = idr_loss(*restored, *depth_gt, cfg, g);
    r.idr = idr.value();
    acc = add(acc, affine(idr, static_cast<S>(cfg.lambda), S(0), g), g);
  }
  r.total = acc;
  return r;
}

}  // namespace mobilesal
