#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <optional>
#include <type_traits>
#include <vector>

#include "mobilesal/graph.hpp"
#include "mobilesal/tensor.hpp"

namespace mobilesal {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

// Geometry of a 2-D convolution. Padding is implicit "same": with
// pad = dilation*(kernel-1)/2 the spatial map is H -> ceil(H/stride).
struct ConvSpec {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;    // 1 or 3
  int stride = 1;    // 1 or 2
  int dilation = 1;  // >= 1
  int groups = 1;    // 1 (dense) or in_channels (depthwise)
  bool has_bias = false;

  int pad() const { return dilation * (kernel - 1) / 2; }

  bool depthwise() const { return groups > 1; }

  void validate() const {
    if (in_channels < 1 || out_channels < 1) {
      throw ShapeError("conv channel counts must be >= 1");
    }
    if (kernel != 1 && kernel != 3) {
      throw ShapeError("conv kernel must be 1 or 3, got " +
                       std::to_string(kernel));
    }
    if (stride != 1 && stride != 2) {
      throw ShapeError("conv stride must be 1 or 2, got " +
                       std::to_string(stride));
    }
    if (dilation < 1) throw ShapeError("conv dilation must be >= 1");
    if (groups != 1 && groups != in_channels) {
      throw ShapeError("conv groups must be 1 or in_channels");
    }
    if (groups > 1 && in_channels != out_channels) {
      throw ShapeError(
          "depthwise conv requires in_channels == out_channels, got " +
          std::to_string(in_channels) + " vs " + std::to_string(out_channels));
    }
  }
};

inline Eigen::Index ceil_div(Eigen::Index a, Eigen::Index b) {
  return (a + b - 1) / b;
}

namespace detail {

// Dense/strided convolution by direct summation; also the depthwise path.
// Covers everything the 1x1 GEMM fast path does not.
template <typename S>
void conv_loop_forward(const Tensor<S>& x, const Tensor<S>& w, const S* bias,
                       const ConvSpec& spec, Tensor<S>& out) {
  const auto& xs = x.shape();
  const auto& os = out.shape();
  const int k = spec.kernel, stride = spec.stride, dil = spec.dilation,
            p = spec.pad();
  const bool dw = spec.depthwise();
  const Eigen::Index cin_g = dw ? 1 : xs.c;
  for (Eigen::Index n = 0; n < xs.n; ++n) {
    for (Eigen::Index oc = 0; oc < os.c; ++oc) {
      const S* wp = w.data() + oc * cin_g * k * k;
      for (Eigen::Index oy = 0; oy < os.h; ++oy) {
        for (Eigen::Index ox = 0; ox < os.w; ++ox) {
          S acc = bias ? bias[oc] : S(0);
          for (Eigen::Index ic = 0; ic < cin_g; ++ic) {
            const Eigen::Index xc = dw ? oc : ic;
            for (int ky = 0; ky < k; ++ky) {
              const Eigen::Index iy = oy * stride - p + ky * dil;
              if (iy < 0 || iy >= xs.h) continue;
              for (int kx = 0; kx < k; ++kx) {
                const Eigen::Index ix = ox * stride - p + kx * dil;
                if (ix < 0 || ix >= xs.w) continue;
                acc += wp[(ic * k + ky) * k + kx] * x.at(n, xc, iy, ix);
              }
            }
          }
          out.at(n, oc, oy, ox) = acc;
        }
      }
    }
  }
}

template <typename S>
void conv_loop_backward(Tensor<S>& x, Tensor<S>& w, Tensor<S>* bias,
                        const ConvSpec& spec, const Tensor<S>& out) {
  const auto& xs = x.shape();
  const auto& os = out.shape();
  const int k = spec.kernel, stride = spec.stride, dil = spec.dilation,
            p = spec.pad();
  const bool dw = spec.depthwise();
  const Eigen::Index cin_g = dw ? 1 : xs.c;
  const auto& dy = out.grad();
  auto& dx = x.grad();
  auto& dwt = w.grad();
  S* db = bias ? bias->grad().data() : nullptr;
  for (Eigen::Index n = 0; n < xs.n; ++n) {
    for (Eigen::Index oc = 0; oc < os.c; ++oc) {
      const S* wp = w.data() + oc * cin_g * k * k;
      S* dwp = dwt.data() + oc * cin_g * k * k;
      for (Eigen::Index oy = 0; oy < os.h; ++oy) {
        for (Eigen::Index ox = 0; ox < os.w; ++ox) {
          const S go = dy[out.offset(n, oc, oy, ox)];
          if (db) db[oc] += go;
          for (Eigen::Index ic = 0; ic < cin_g; ++ic) {
            const Eigen::Index xc = dw ? oc : ic;
            for (int ky = 0; ky < k; ++ky) {
              const Eigen::Index iy = oy * stride - p + ky * dil;
              if (iy < 0 || iy >= xs.h) continue;
              for (int kx = 0; kx < k; ++kx) {
                const Eigen::Index ix = ox * stride - p + kx * dil;
                if (ix < 0 || ix >= xs.w) continue;
                const Eigen::Index wi = (ic * k + ky) * k + kx;
                dx[x.offset(n, xc, iy, ix)] += wp[wi] * go;
                dwp[wi] += x.at(n, xc, iy, ix) * go;
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2-D convolution with "same" zero padding.
//   x: (n, in_channels, h, w)
//   w: (out_channels, in_channels/groups, k, k)
//   bias: (1, out_channels, 1, 1) or nullptr
// Output: (n, out_channels, ceil(h/stride), ceil(w/stride)).
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w,
                 const std::type_identity_t<Tensor<S>>* bias,
                 const ConvSpec& spec, Graph<S>* g = nullptr) {
  spec.validate();
  const auto& xs = x.shape();
  if (xs.c != spec.in_channels) {
    throw ShapeError("conv2d: channel axis mismatch, input has " +
                     std::to_string(xs.c) + " channels, spec expects " +
                     std::to_string(spec.in_channels));
  }
  const Eigen::Index cin_g = spec.in_channels / spec.groups;
  TensorShape want{spec.out_channels, cin_g, spec.kernel, spec.kernel};
  if (!(w.shape() == want)) {
    throw ShapeError("conv2d: weight shape " + w.shape().str() +
                     " does not match spec " + want.str());
  }
  if (spec.has_bias) {
    if (!bias) throw ShapeError("conv2d: spec has bias but none given");
    if (!(bias->shape() == TensorShape{1, spec.out_channels, 1, 1})) {
      throw ShapeError("conv2d: bias channel axis mismatch " +
                       bias->shape().str());
    }
  } else if (bias) {
    throw ShapeError("conv2d: bias given but spec.has_bias is false");
  }

  Tensor<S> out({xs.n, spec.out_channels,
                 ceil_div(xs.h, spec.stride), ceil_div(xs.w, spec.stride)});

  const bool gemm_path =
      spec.kernel == 1 && spec.groups == 1 && spec.stride == 1;
  if (gemm_path) {
    const Eigen::Index hw = xs.plane();
    Eigen::Map<const MatRM<S>> W(w.data(), spec.out_channels, xs.c);
    for (Eigen::Index n = 0; n < xs.n; ++n) {
      Eigen::Map<const MatRM<S>> X(x.data() + n * xs.c * hw, xs.c, hw);
      Eigen::Map<MatRM<S>> Y(out.data() + n * spec.out_channels * hw,
                             spec.out_channels, hw);
      Y.noalias() = W * X;
      if (bias) {
        Eigen::Map<const VecX<S>> b(bias->data(), spec.out_channels);
        Y.colwise() += b;
      }
    }
  } else {
    detail::conv_loop_forward(x, w, bias ? bias->data() : nullptr, spec, out);
  }

  if (g) {
    Tensor<S> xc = x, wc = w, outc = out;
    std::optional<Tensor<S>> bc;
    if (bias) bc = *bias;
    g->record("conv2d", [xc, wc, bc, outc, spec, gemm_path]() mutable {
      if (!outc.has_grad()) return;
      if (gemm_path) {
        const auto& xs = xc.shape();
        const Eigen::Index hw = xs.plane();
        const Eigen::Index oc = spec.out_channels;
        Eigen::Map<const MatRM<S>> W(wc.data(), oc, xs.c);
        Eigen::Map<MatRM<S>> dW(wc.grad().data(), oc, xs.c);
        for (Eigen::Index n = 0; n < xs.n; ++n) {
          Eigen::Map<const MatRM<S>> X(xc.data() + n * xs.c * hw, xs.c, hw);
          Eigen::Map<const MatRM<S>> dY(outc.grad().data() + n * oc * hw, oc,
                                        hw);
          Eigen::Map<MatRM<S>> dX(xc.grad().data() + n * xs.c * hw, xs.c, hw);
          dX.noalias() += W.transpose() * dY;
          dW.noalias() += dY * X.transpose();
          if (bc) {
            Eigen::Map<VecX<S>> db(bc->grad().data(), oc);
            db.noalias() += dY.rowwise().sum();
          }
        }
      } else {
        detail::conv_loop_backward(xc, wc, bc ? &*bc : nullptr, spec, outc);
      }
    });
  }
  return out;
}

enum class BnMode { train, eval };

// Batch normalization over the (n, h, w) axes per channel. Parameter and
// running-stat tensors are (1, c, 1, 1). Train mode normalizes with biased
// batch statistics and updates the running stats by exponential moving
// average; eval mode normalizes with the running stats.
template <typename S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma,
                     const Tensor<S>& beta, Tensor<S>& run_mean,
                     Tensor<S>& run_var, BnMode mode, S momentum, S eps,
                     Graph<S>* g = nullptr) {
  const auto& xs = x.shape();
  const TensorShape pshape{1, xs.c, 1, 1};
  const Tensor<S>* per_channel[] = {&gamma, &beta, &run_mean, &run_var};
  for (const Tensor<S>* t : per_channel) {
    if (!(t->shape() == pshape)) {
      throw ShapeError("batch_norm: parameter channel axis mismatch, want " +
                       pshape.str() + " got " + t->shape().str());
    }
  }
  const Eigen::Index hw = xs.plane();
  const Eigen::Index m = xs.n * hw;

  VecX<S> mean(xs.c), inv_std(xs.c);
  if (mode == BnMode::train) {
    for (Eigen::Index c = 0; c < xs.c; ++c) {
      double sum = 0;
      for (Eigen::Index n = 0; n < xs.n; ++n) {
        Eigen::Map<const VecX<S>> plane(x.data() + x.offset(n, c, 0, 0), hw);
        sum += plane.template cast<double>().sum();
      }
      const double mu = sum / static_cast<double>(m);
      double ss = 0;
      for (Eigen::Index n = 0; n < xs.n; ++n) {
        Eigen::Map<const VecX<S>> plane(x.data() + x.offset(n, c, 0, 0), hw);
        ss += (plane.template cast<double>().array() - mu).square().sum();
      }
      const double var = ss / static_cast<double>(m);
      if (var + eps <= 0) {
        throw NumericError("batch_norm: non-positive variance after epsilon");
      }
      mean[c] = static_cast<S>(mu);
      inv_std[c] = static_cast<S>(1.0 / std::sqrt(var + eps));
      run_mean.data()[c] =
          (S(1) - momentum) * run_mean.data()[c] + momentum * static_cast<S>(mu);
      run_var.data()[c] =
          (S(1) - momentum) * run_var.data()[c] + momentum * static_cast<S>(var);
    }
  } else {
    for (Eigen::Index c = 0; c < xs.c; ++c) {
      const S v = run_var.data()[c] + eps;
      if (v <= 0) {
        throw NumericError("batch_norm: non-positive variance after epsilon");
      }
      mean[c] = run_mean.data()[c];
      inv_std[c] = S(1) / std::sqrt(v);
    }
  }

  Tensor<S> out(xs);
  for (Eigen::Index n = 0; n < xs.n; ++n) {
    for (Eigen::Index c = 0; c < xs.c; ++c) {
      const S scale = gamma.data()[c] * inv_std[c];
      const S shift = beta.data()[c] - mean[c] * scale;
      Eigen::Map<const VecX<S>> xin(x.data() + x.offset(n, c, 0, 0), hw);
      Eigen::Map<VecX<S>> yout(out.data() + out.offset(n, c, 0, 0), hw);
      yout = xin * scale;
      yout.array() += shift;
    }
  }

  if (g) {
    Tensor<S> xc = x, gc = gamma, bc = beta, outc = out;
    const bool train = mode == BnMode::train;
    g->record("batch_norm", [xc, gc, bc, outc, mean, inv_std, train]() mutable {
      if (!outc.has_grad()) return;
      const auto& xs = xc.shape();
      const Eigen::Index hw = xs.plane();
      const Eigen::Index m = xs.n * hw;
      const auto& dy = outc.grad();
      auto& dx = xc.grad();
      auto& dgamma = gc.grad();
      auto& dbeta = bc.grad();
      for (Eigen::Index c = 0; c < xs.c; ++c) {
        double sum_dy = 0, sum_dy_xhat = 0;
        for (Eigen::Index n = 0; n < xs.n; ++n) {
          const Eigen::Index off = xc.offset(n, c, 0, 0);
          for (Eigen::Index i = 0; i < hw; ++i) {
            const S xhat = (xc.data()[off + i] - mean[c]) * inv_std[c];
            sum_dy += dy[off + i];
            sum_dy_xhat += dy[off + i] * xhat;
          }
        }
        dgamma[c] += static_cast<S>(sum_dy_xhat);
        dbeta[c] += static_cast<S>(sum_dy);
        if (train) {
          const S k = gc.data()[c] * inv_std[c] / static_cast<S>(m);
          for (Eigen::Index n = 0; n < xs.n; ++n) {
            const Eigen::Index off = xc.offset(n, c, 0, 0);
            for (Eigen::Index i = 0; i < hw; ++i) {
              const S xhat = (xc.data()[off + i] - mean[c]) * inv_std[c];
              dx[off + i] += k * (static_cast<S>(m) * dy[off + i] -
                                  static_cast<S>(sum_dy) -
                                  xhat * static_cast<S>(sum_dy_xhat));
            }
          }
        } else {
          const S k = gc.data()[c] * inv_std[c];
          for (Eigen::Index n = 0; n < xs.n; ++n) {
            const Eigen::Index off = xc.offset(n, c, 0, 0);
            for (Eigen::Index i = 0; i < hw; ++i) {
              dx[off + i] += k * dy[off + i];
            }
          }
        }
      }
    });
  }
  return out;
}

// --- pointwise ---------------------------------------------------------------

template <typename S>
Tensor<S> relu(const Tensor<S>& x, Graph<S>* g = nullptr) {
  Tensor<S> out(x.shape());
  out.array() = x.array().max(S(0));
  if (g) {
    Tensor<S> xc = x, outc = out;
    g->record("relu", [xc, outc]() mutable {
      if (!outc.has_grad()) return;
      xc.add_grad(outc.grad() *
                  (xc.array() > S(0)).template cast<S>());
    });
  }
  return out;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x, Graph<S>* g = nullptr) {
  Tensor<S> out(x.shape());
  // exp(-|x|) keeps both branches overflow-free.
  auto t = (-x.array().abs()).exp();
  out.array() = (x.array() >= S(0)).select(S(1) / (S(1) + t), t / (S(1) + t));
  if (g) {
    Tensor<S> xc = x, outc = out;
    g->record("sigmoid", [xc, outc]() mutable {
      if (!outc.has_grad()) return;
      // d/dx sigmoid = y (1 - y)
      xc.add_grad(outc.grad() * outc.array() * (S(1) - outc.array()));
    });
  }
  return out;
}

enum class Activation { relu, sigmoid };

template <typename S>
Tensor<S> activation(const Tensor<S>& x, Activation kind,
                     Graph<S>* g = nullptr) {
  return kind == Activation::relu ? relu(x, g) : sigmoid(x, g);
}

enum class BinaryKind { mul, add };

// Elementwise multiply/add. Shapes must match, or b may be a per-channel
// (n, c, 1, 1) vector broadcast across the spatial axes.
template <typename S>
Tensor<S> elementwise_binary(const Tensor<S>& a, const Tensor<S>& b,
                             BinaryKind kind, Graph<S>* g = nullptr) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const bool same = as == bs;
  const bool bcast = !same && bs.n == as.n && bs.c == as.c && bs.h == 1 &&
                     bs.w == 1;
  if (!same && !bcast) {
    throw ShapeError("elementwise op: incompatible shapes " + as.str() +
                     " vs " + bs.str());
  }
  Tensor<S> out(as);
  const Eigen::Index hw = as.plane();
  if (same) {
    if (kind == BinaryKind::mul) {
      out.array() = a.array() * b.array();
    } else {
      out.array() = a.array() + b.array();
    }
  } else {
    for (Eigen::Index n = 0; n < as.n; ++n) {
      for (Eigen::Index c = 0; c < as.c; ++c) {
        Eigen::Map<const VecX<S>> ap(a.data() + a.offset(n, c, 0, 0), hw);
        Eigen::Map<VecX<S>> op(out.data() + out.offset(n, c, 0, 0), hw);
        const S bv = b.at(n, c, 0, 0);
        if (kind == BinaryKind::mul) {
          op = ap * bv;
        } else {
          op = ap.array() + bv;
        }
      }
    }
  }
  if (g) {
    Tensor<S> ac = a, bc = b, outc = out;
    g->record("elementwise", [ac, bc, outc, kind, same]() mutable {
      if (!outc.has_grad()) return;
      const auto& as = ac.shape();
      const Eigen::Index hw = as.plane();
      const auto& dy = outc.grad();
      if (same) {
        if (kind == BinaryKind::mul) {
          ac.add_grad(dy * bc.array());
          bc.add_grad(dy * ac.array());
        } else {
          ac.add_grad(dy);
          bc.add_grad(dy);
        }
      } else {
        auto& da = ac.grad();
        auto& db = bc.grad();
        for (Eigen::Index n = 0; n < as.n; ++n) {
          for (Eigen::Index c = 0; c < as.c; ++c) {
            const Eigen::Index off = ac.offset(n, c, 0, 0);
            Eigen::Map<const VecX<S>> dyp(dy.data() + off, hw);
            Eigen::Map<VecX<S>> dap(da.data() + off, hw);
            if (kind == BinaryKind::mul) {
              Eigen::Map<const VecX<S>> ap(ac.data() + off, hw);
              dap += dyp * bc.at(n, c, 0, 0);
              db[n * as.c + c] += dyp.dot(ap);
            } else {
              dap += dyp;
              db[n * as.c + c] += dyp.sum();
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b, Graph<S>* g = nullptr) {
  return elementwise_binary(a, b, BinaryKind::mul, g);
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b, Graph<S>* g = nullptr) {
  return elementwise_binary(a, b, BinaryKind::add, g);
}

// Concatenate along the channel axis; inputs must share n, h, w.
template <typename S>
Tensor<S> concat_channels(const std::vector<Tensor<S>>& xs,
                          Graph<S>* g = nullptr) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const auto& s0 = xs.front().shape();
  Eigen::Index ctotal = 0;
  for (const auto& x : xs) {
    const auto& s = x.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w) {
      throw ShapeError("concat_channels: spatial/batch axis mismatch " +
                       s.str() + " vs " + s0.str());
    }
    ctotal += s.c;
  }
  Tensor<S> out({s0.n, ctotal, s0.h, s0.w});
  const Eigen::Index hw = s0.plane();
  for (Eigen::Index n = 0; n < s0.n; ++n) {
    Eigen::Index coff = 0;
    for (const auto& x : xs) {
      const Eigen::Index chunk = x.shape().c * hw;
      std::copy_n(x.data() + n * chunk, chunk,
                  out.data() + (n * ctotal + coff) * hw);
      coff += x.shape().c;
    }
  }
  if (g) {
    std::vector<Tensor<S>> xc = xs;
    Tensor<S> outc = out;
    g->record("concat_channels", [xc, outc]() mutable {
      if (!outc.has_grad()) return;
      const auto& os = outc.shape();
      const Eigen::Index hw = os.plane();
      const auto& dy = outc.grad();
      for (Eigen::Index n = 0; n < os.n; ++n) {
        Eigen::Index coff = 0;
        for (auto& x : xc) {
          const Eigen::Index chunk = x.shape().c * hw;
          Eigen::Map<const VecX<S>> src(
              dy.data() + (n * os.c + coff) * hw, chunk);
          Eigen::Map<VecX<S>> dst(x.grad().data() + n * chunk, chunk);
          dst += src;
          coff += x.shape().c;
        }
      }
    });
  }
  return out;
}

namespace detail {

// One axis of a bilinear resample with half-pixel centers: for each output
// index, the two (clamped) source taps and the high-side weight.
template <typename S>
struct ResampleAxis {
  std::vector<Eigen::Index> lo, hi;
  std::vector<S> frac;
};

template <typename S>
ResampleAxis<S> resample_axis(Eigen::Index in, Eigen::Index out) {
  ResampleAxis<S> ax;
  ax.lo.resize(out);
  ax.hi.resize(out);
  ax.frac.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (Eigen::Index o = 0; o < out; ++o) {
    const double s = (static_cast<double>(o) + 0.5) * scale - 0.5;
    const double fl = std::floor(s);
    const auto i0 = static_cast<Eigen::Index>(fl);
    ax.lo[o] = std::clamp<Eigen::Index>(i0, 0, in - 1);
    ax.hi[o] = std::clamp<Eigen::Index>(i0 + 1, 0, in - 1);
    ax.frac[o] = static_cast<S>(s - fl);
  }
  return ax;
}

}  // namespace detail

// Bilinear interpolation to (out_h, out_w), half-pixel centers, clamped
// edge sampling (align-corners off).
template <typename S>
Tensor<S> bilinear_resize(const Tensor<S>& x, Eigen::Index out_h,
                          Eigen::Index out_w, Graph<S>* g = nullptr) {
  if (out_h < 1 || out_w < 1) {
    throw ShapeError("bilinear_resize: target extents must be >= 1");
  }
  const auto& xs = x.shape();
  const auto ay = detail::resample_axis<S>(xs.h, out_h);
  const auto ax = detail::resample_axis<S>(xs.w, out_w);
  Tensor<S> out({xs.n, xs.c, out_h, out_w});
  for (Eigen::Index n = 0; n < xs.n; ++n) {
    for (Eigen::Index c = 0; c < xs.c; ++c) {
      const S* xp = x.data() + x.offset(n, c, 0, 0);
      S* op = out.data() + out.offset(n, c, 0, 0);
      for (Eigen::Index oy = 0; oy < out_h; ++oy) {
        const S fy = ay.frac[oy];
        const S* row0 = xp + ay.lo[oy] * xs.w;
        const S* row1 = xp + ay.hi[oy] * xs.w;
        for (Eigen::Index ox = 0; ox < out_w; ++ox) {
          const S fx = ax.frac[ox];
          const S top = row0[ax.lo[ox]] * (S(1) - fx) + row0[ax.hi[ox]] * fx;
          const S bot = row1[ax.lo[ox]] * (S(1) - fx) + row1[ax.hi[ox]] * fx;
          op[oy * out_w + ox] = top * (S(1) - fy) + bot * fy;
        }
      }
    }
  }
  if (g) {
    Tensor<S> xc = x, outc = out;
    g->record("bilinear_resize", [xc, outc, ay, ax]() mutable {
      if (!outc.has_grad()) return;
      const auto& xs = xc.shape();
      const auto& os = outc.shape();
      const auto& dy = outc.grad();
      auto& dx = xc.grad();
      for (Eigen::Index n = 0; n < xs.n; ++n) {
        for (Eigen::Index c = 0; c < xs.c; ++c) {
          const Eigen::Index xoff = xc.offset(n, c, 0, 0);
          const Eigen::Index ooff = outc.offset(n, c, 0, 0);
          for (Eigen::Index oy = 0; oy < os.h; ++oy) {
            const S fy = ay.frac[oy];
            for (Eigen::Index ox = 0; ox < os.w; ++ox) {
              const S fx = ax.frac[ox];
              const S go = dy[ooff + oy * os.w + ox];
              dx[xoff + ay.lo[oy] * xs.w + ax.lo[ox]] +=
                  go * (S(1) - fy) * (S(1) - fx);
              dx[xoff + ay.lo[oy] * xs.w + ax.hi[ox]] += go * (S(1) - fy) * fx;
              dx[xoff + ay.hi[oy] * xs.w + ax.lo[ox]] += go * fy * (S(1) - fx);
              dx[xoff + ay.hi[oy] * xs.w + ax.hi[ox]] += go * fy * fx;
            }
          }
        }
      }
    });
  }
  return out;
}

// Spatial mean per (n, c); output (n, c, 1, 1).
template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x, Graph<S>* g = nullptr) {
  const auto& xs = x.shape();
  const Eigen::Index hw = xs.plane();
  Tensor<S> out({xs.n, xs.c, 1, 1});
  for (Eigen::Index n = 0; n < xs.n; ++n) {
    for (Eigen::Index c = 0; c < xs.c; ++c) {
      Eigen::Map<const VecX<S>> plane(x.data() + x.offset(n, c, 0, 0), hw);
      out.data()[n * xs.c + c] =
          static_cast<S>(plane.template cast<double>().sum() /
                         static_cast<double>(hw));
    }
  }
  if (g) {
    Tensor<S> xc = x, outc = out;
    g->record("global_avg_pool", [xc, outc]() mutable {
      if (!outc.has_grad()) return;
      const auto& xs = xc.shape();
      const Eigen::Index hw = xs.plane();
      const auto& dy = outc.grad();
      auto& dx = xc.grad();
      for (Eigen::Index n = 0; n < xs.n; ++n) {
        for (Eigen::Index c = 0; c < xs.c; ++c) {
          const S gv = dy[n * xs.c + c] / static_cast<S>(hw);
          Eigen::Map<VecX<S>> dxp(dx.data() + xc.offset(n, c, 0, 0), hw);
          dxp.array() += gv;
        }
      }
    });
  }
  return out;
}

// Fully-connected layer on (n, c, 1, 1) vectors: y = W x + b per batch row.
//   w: (out, c, 1, 1), b: (1, out, 1, 1) or nullptr.
template <typename S>
Tensor<S> fully_connected(const Tensor<S>& x, const Tensor<S>& w,
                          const std::type_identity_t<Tensor<S>>* b,
                          Graph<S>* g = nullptr) {
  const auto& xs = x.shape();
  if (xs.h != 1 || xs.w != 1) {
    throw ShapeError("fully_connected: spatial axes must be 1x1, got " +
                     xs.str());
  }
  const auto& ws = w.shape();
  if (ws.c != xs.c || ws.h != 1 || ws.w != 1) {
    throw ShapeError("fully_connected: inner dimension mismatch, weight " +
                     ws.str() + " vs input " + xs.str());
  }
  if (b && !(b->shape() == TensorShape{1, ws.n, 1, 1})) {
    throw ShapeError("fully_connected: bias axis mismatch " +
                     b->shape().str());
  }
  Tensor<S> out({xs.n, ws.n, 1, 1});
  Eigen::Map<const MatRM<S>> X(x.data(), xs.n, xs.c);
  Eigen::Map<const MatRM<S>> W(w.data(), ws.n, ws.c);
  Eigen::Map<MatRM<S>> Y(out.data(), xs.n, ws.n);
  Y.noalias() = X * W.transpose();
  if (b) {
    Eigen::Map<const VecX<S>> bv(b->data(), ws.n);
    Y.rowwise() += bv.transpose();
  }
  if (g) {
    Tensor<S> xc = x, wc = w, outc = out;
    std::optional<Tensor<S>> bc;
    if (b) bc = *b;
    g->record("fully_connected", [xc, wc, bc, outc]() mutable {
      if (!outc.has_grad()) return;
      const auto& xs = xc.shape();
      const auto& ws = wc.shape();
      Eigen::Map<const MatRM<S>> X(xc.data(), xs.n, xs.c);
      Eigen::Map<const MatRM<S>> W(wc.data(), ws.n, ws.c);
      Eigen::Map<const MatRM<S>> dY(outc.grad().data(), xs.n, ws.n);
      Eigen::Map<MatRM<S>> dX(xc.grad().data(), xs.n, xs.c);
      Eigen::Map<MatRM<S>> dW(wc.grad().data(), ws.n, ws.c);
      dX.noalias() += dY * W;
      dW.noalias() += dY.transpose() * X;
      if (bc) {
        Eigen::Map<VecX<S>> db(bc->grad().data(), ws.n);
        db.noalias() += dY.colwise().sum().transpose();
      }
    });
  }
  return out;
}

// Sum of all elements; output (1, 1, 1, 1).
template <typename S>
Tensor<S> reduce_sum(const Tensor<S>& x, Graph<S>* g = nullptr) {
  Tensor<S> out({1, 1, 1, 1});
  out.data()[0] =
      static_cast<S>(x.array().template cast<double>().sum());
  if (g) {
    Tensor<S> xc = x, outc = out;
    g->record("reduce_sum", [xc, outc]() mutable {
      if (!outc.has_grad()) return;
      xc.grad() += outc.grad()[0];
    });
  }
  return out;
}

// y = a*x + b with scalar constants.
template <typename S>
Tensor<S> affine(const Tensor<S>& x, S a, S b, Graph<S>* g = nullptr) {
  Tensor<S> out(x.shape());
  out.array() = x.array() * a + b;
  if (g) {
    Tensor<S> xc = x, outc = out;
    g->record("affine", [xc, outc, a]() mutable {
      if (!outc.has_grad()) return;
      xc.add_grad(outc.grad() * a);
    });
  }
  return out;
}

// Free-function form of the reverse sweep from a scalar loss.
template <typename S>
void backward(Graph<S>& graph, Tensor<S>& loss) {
  graph.backward(loss);
}

}  // namespace mobilesal
