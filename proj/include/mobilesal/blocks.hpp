#pragma once

#include <array>
#include <string>
#include <vector>

#include "mobilesal/ops.hpp"
#include "mobilesal/param_store.hpp"

namespace mobilesal {

// --- batch-norm parameter bundle ---------------------------------------------

template <typename S>
struct BatchNormParams {
  Tensor<S> gamma, beta, run_mean, run_var;
  S momentum = S(0.1);
  S eps = S(1e-5);
};

template <typename S>
BatchNormParams<S> make_batch_norm(ParamStore<S>& ps, const std::string& name,
                                   int c) {
  BatchNormParams<S> p;
  TensorShape s{1, c, 1, 1};
  p.gamma = ps.add(name + ".gamma", Tensor<S>::full(s, S(1)),
                   ParamKind::trainable, /*no_decay=*/true);
  p.beta = ps.add(name + ".beta", Tensor<S>(s), ParamKind::trainable,
                  /*no_decay=*/true);
  p.run_mean = ps.add(name + ".run_mean", Tensor<S>(s), ParamKind::buffer);
  p.run_var = ps.add(name + ".run_var", Tensor<S>::full(s, S(1)),
                     ParamKind::buffer);
  return p;
}

template <typename S>
Tensor<S> apply_bn(const Tensor<S>& x, BatchNormParams<S>& p, BnMode mode,
                   Graph<S>* g) {
  return batch_norm(x, p.gamma, p.beta, p.run_mean, p.run_var, mode,
                    p.momentum, p.eps, g);
}

// --- conv + BN unit -----------------------------------------------------------

template <typename S>
struct ConvBn {
  Tensor<S> w;
  ConvSpec spec;
  BatchNormParams<S> bn;
};

template <typename S>
ConvBn<S> make_conv_bn(ParamStore<S>& ps, const std::string& name, int in,
                       int out, int kernel, int stride, int dilation,
                       int groups, Pcg32& rng) {
  ConvBn<S> p;
  p.spec = ConvSpec{in, out, kernel, stride, dilation, groups, false};
  p.spec.validate();
  const int cin_g = in / groups;
  const Eigen::Index fan_in =
      static_cast<Eigen::Index>(cin_g) * kernel * kernel;
  p.w = ps.add(name + ".w",
               he_normal<S>({out, cin_g, kernel, kernel}, fan_in, rng));
  p.bn = make_batch_norm(ps, name + ".bn", out);
  return p;
}

template <typename S>
Tensor<S> conv_bn(const Tensor<S>& x, ConvBn<S>& p, BnMode mode, Graph<S>* g) {
  return apply_bn(conv2d(x, p.w, nullptr, p.spec, g), p.bn, mode, g);
}

template <typename S>
Tensor<S> conv_bn_relu(const Tensor<S>& x, ConvBn<S>& p, BnMode mode,
                       Graph<S>* g) {
  return relu(conv_bn(x, p, mode, g), g);
}

// Bare 1x1 convolution with bias (no BN).
template <typename S>
struct Conv1x1 {
  Tensor<S> w, b;
  ConvSpec spec;
};

template <typename S>
Conv1x1<S> make_conv1x1(ParamStore<S>& ps, const std::string& name, int in,
                        int out, Pcg32& rng, bool zero_init = false) {
  Conv1x1<S> p;
  p.spec = ConvSpec{in, out, 1, 1, 1, 1, true};
  p.w = ps.add(name + ".w", zero_init ? Tensor<S>({out, in, 1, 1})
                                      : he_normal<S>({out, in, 1, 1}, in, rng));
  p.b = ps.add(name + ".b", Tensor<S>({1, out, 1, 1}));
  return p;
}

template <typename S>
Tensor<S> apply_conv1x1(const Tensor<S>& x, Conv1x1<S>& p, Graph<S>* g) {
  return conv2d(x, p.w, &p.b, p.spec, g);
}

// --- inverted residual block --------------------------------------------------

// Expand 1x1 -> BN -> ReLU -> depthwise 3x3 (stride) -> BN -> ReLU ->
// squeeze 1x1 -> BN, plus the input when stride is 1 and channels match.
// Blocks with expansion 1 (MobileNetV2's first bottleneck) skip the expand
// convolution.
template <typename S>
struct IrbParams {
  int in_channels = 0, out_channels = 0, expansion = 1, stride = 1;
  bool has_expand = true;
  ConvBn<S> expand, depthwise, squeeze;

  int hidden() const { return has_expand ? expansion * in_channels : in_channels; }
  bool use_residual() const {
    return stride == 1 && in_channels == out_channels;
  }
};

template <typename S>
IrbParams<S> make_irb(ParamStore<S>& ps, const std::string& name, int in,
                      int out, int expansion, int stride, Pcg32& rng) {
  IrbParams<S> p;
  p.in_channels = in;
  p.out_channels = out;
  p.expansion = expansion;
  p.stride = stride;
  p.has_expand = expansion != 1;
  const int hid = p.hidden();
  if (p.has_expand) {
    p.expand = make_conv_bn(ps, name + ".expand", in, hid, 1, 1, 1, 1, rng);
  }
  p.depthwise =
      make_conv_bn(ps, name + ".dw", hid, hid, 3, stride, 1, hid, rng);
  p.squeeze = make_conv_bn(ps, name + ".squeeze", hid, out, 1, 1, 1, 1, rng);
  return p;
}

template <typename S>
Tensor<S> irb_forward(const Tensor<S>& x, IrbParams<S>& p, BnMode mode,
                      Graph<S>* g = nullptr) {
  if (x.shape().c != p.in_channels) {
    throw ShapeError("irb_forward: channel axis mismatch, input " +
                     std::to_string(x.shape().c) + " vs " +
                     std::to_string(p.in_channels));
  }
  Tensor<S> y = x;
  if (p.has_expand) y = conv_bn_relu(y, p.expand, mode, g);
  y = conv_bn_relu(y, p.depthwise, mode, g);
  y = conv_bn(y, p.squeeze, mode, g);
  if (p.use_residual()) y = add(y, x, g);
  return y;
}

// --- channel attention ---------------------------------------------------------

// v = sigmoid(FC2(ReLU(FC1(GAP(x))))), both FC layers preserving the channel
// count. Output is (n, c, 1, 1) with every component in (0, 1).
template <typename S>
struct AttentionParams {
  Tensor<S> fc1_w, fc1_b, fc2_w, fc2_b;
};

template <typename S>
AttentionParams<S> make_attention(ParamStore<S>& ps, const std::string& name,
                                  int c, Pcg32& rng) {
  AttentionParams<S> p;
  p.fc1_w = ps.add(name + ".fc1.w", he_normal<S>({c, c, 1, 1}, c, rng));
  p.fc1_b = ps.add(name + ".fc1.b", Tensor<S>({1, c, 1, 1}));
  p.fc2_w = ps.add(name + ".fc2.w", he_normal<S>({c, c, 1, 1}, c, rng));
  p.fc2_b = ps.add(name + ".fc2.b", Tensor<S>({1, c, 1, 1}));
  return p;
}

template <typename S>
Tensor<S> channel_attention(const Tensor<S>& x, AttentionParams<S>& p,
                            Graph<S>* g = nullptr) {
  Tensor<S> v = global_avg_pool(x, g);
  v = fully_connected(v, p.fc1_w, &p.fc1_b, g);
  v = relu(v, g);
  v = fully_connected(v, p.fc2_w, &p.fc2_b, g);
  return sigmoid(v, g);
}

// --- cross-modality fusion ------------------------------------------------------

// Fuses the coarsest RGB and depth features:
//   T   = IRB(c5 * d5)
//   v   = channel_attention(c5)
//   out = IRB(v * T * d5)
template <typename S>
struct CmfParams {
  IrbParams<S> pre, post;
  AttentionParams<S> attention;
};

template <typename S>
CmfParams<S> make_cmf(ParamStore<S>& ps, const std::string& name, int channels,
                      int expansion, Pcg32& rng) {
  CmfParams<S> p;
  p.pre = make_irb(ps, name + ".pre", channels, channels, expansion, 1, rng);
  p.post = make_irb(ps, name + ".post", channels, channels, expansion, 1, rng);
  p.attention = make_attention(ps, name + ".att", channels, rng);
  return p;
}

template <typename S>
Tensor<S> cmf_fuse(const Tensor<S>& c5, const Tensor<S>& d5, CmfParams<S>& p,
                   BnMode mode, Graph<S>* g = nullptr) {
  if (!(c5.shape() == d5.shape())) {
    throw ShapeError("cmf_fuse: stream shape mismatch " + c5.shape().str() +
                     " vs " + d5.shape().str());
  }
  Tensor<S> t = irb_forward(mul(c5, d5, g), p.pre, mode, g);
  Tensor<S> v = channel_attention(c5, p.attention, g);
  Tensor<S> gated = mul(mul(t, v, g), d5, g);
  return irb_forward(gated, p.post, mode, g);
}

// --- compact pyramid refinement --------------------------------------------------

// Expand 1x1 (M x), three parallel dilated depthwise 3x3 branches summed into
// one BN+ReLU, squeeze 1x1 with input residual, then a final 1x1 recalibrated
// by the channel attention of the input.
template <typename S>
struct CprParams {
  int channels = 0, expansion = 1;
  std::array<int, 3> dilations{1, 2, 3};
  Tensor<S> expand_w;
  std::array<Tensor<S>, 3> branch_w;
  BatchNormParams<S> sum_bn;
  Tensor<S> squeeze_w;
  Tensor<S> final_w;
  AttentionParams<S> attention;
};

template <typename S>
CprParams<S> make_cpr(ParamStore<S>& ps, const std::string& name, int channels,
                      int expansion, std::array<int, 3> dilations, Pcg32& rng) {
  CprParams<S> p;
  p.channels = channels;
  p.expansion = expansion;
  p.dilations = dilations;
  const int hid = channels * expansion;
  p.expand_w =
      ps.add(name + ".expand.w", he_normal<S>({hid, channels, 1, 1}, channels, rng));
  for (int i = 0; i < 3; ++i) {
    p.branch_w[i] = ps.add(name + ".branch" + std::to_string(i) + ".w",
                           he_normal<S>({hid, 1, 3, 3}, 9, rng));
  }
  p.sum_bn = make_batch_norm(ps, name + ".sum_bn", hid);
  p.squeeze_w =
      ps.add(name + ".squeeze.w", he_normal<S>({channels, hid, 1, 1}, hid, rng));
  p.final_w =
      ps.add(name + ".final.w", he_normal<S>({channels, channels, 1, 1}, channels, rng));
  p.attention = make_attention(ps, name + ".att", channels, rng);
  return p;
}

template <typename S>
Tensor<S> cpr_refine(const Tensor<S>& x, CprParams<S>& p, BnMode mode,
                     Graph<S>* g = nullptr) {
  if (x.shape().c != p.channels) {
    throw ShapeError("cpr_refine: channel axis mismatch, input " +
                     std::to_string(x.shape().c) + " vs " +
                     std::to_string(p.channels));
  }
  const int hid = p.channels * p.expansion;
  ConvSpec expand{p.channels, hid, 1, 1, 1, 1, false};
  Tensor<S> x1 = conv2d(x, p.expand_w, nullptr, expand, g);
  std::array<Tensor<S>, 3> branches;
  for (int i = 0; i < 3; ++i) {
    ConvSpec dw{hid, hid, 3, 1, p.dilations[i], hid, false};
    branches[i] = conv2d(x1, p.branch_w[i], nullptr, dw, g);
  }
  Tensor<S> x2 = add(add(branches[0], branches[1], g), branches[2], g);
  x2 = relu(apply_bn(x2, p.sum_bn, mode, g), g);
  ConvSpec squeeze{hid, p.channels, 1, 1, 1, 1, false};
  Tensor<S> x3 = add(conv2d(x2, p.squeeze_w, nullptr, squeeze, g), x, g);
  Tensor<S> v = channel_attention(x, p.attention, g);
  ConvSpec fin{p.channels, p.channels, 1, 1, 1, 1, false};
  return mul(conv2d(x3, p.final_w, nullptr, fin, g), v, g);
}

// --- implicit depth restoration head ----------------------------------------------

// Squeezes the five pyramid features to a common channel count, resizes all
// of them to the stride-8 level, fuses through a 1x1 merge and four IRBs, and
// emits a full-resolution single-channel map through sigmoid + upsampling.
// Training-only: never executed at inference.
template <typename S>
struct IdrParams {
  int mid_channels = 256;
  std::array<Conv1x1<S>, 5> squeeze;
  Conv1x1<S> merge;
  BatchNormParams<S> merge_bn;
  std::array<IrbParams<S>, 4> fuse;
  Conv1x1<S> out;
};

template <typename S>
IdrParams<S> make_idr(ParamStore<S>& ps, const std::string& name,
                      const std::array<int, 5>& in_channels, int mid,
                      int expansion, Pcg32& rng) {
  IdrParams<S> p;
  p.mid_channels = mid;
  for (int i = 0; i < 5; ++i) {
    p.squeeze[i] = make_conv1x1(ps, name + ".squeeze" + std::to_string(i),
                                in_channels[i], mid, rng);
  }
  p.merge = make_conv1x1(ps, name + ".merge", 5 * mid, mid, rng);
  p.merge_bn = make_batch_norm(ps, name + ".merge_bn", mid);
  for (int i = 0; i < 4; ++i) {
    p.fuse[i] =
        make_irb(ps, name + ".fuse" + std::to_string(i), mid, mid, expansion, 1, rng);
  }
  p.out = make_conv1x1(ps, name + ".out", mid, 1, rng);
  return p;
}

// `features` are C1..C4 plus the fused C5 feature, at strides 2,4,8,16,32.
template <typename S>
Tensor<S> idr_head(const std::array<Tensor<S>, 5>& features, IdrParams<S>& p,
                   Eigen::Index out_h, Eigen::Index out_w, BnMode mode,
                   Graph<S>* g = nullptr) {
  for (int i = 0; i + 1 < 5; ++i) {
    const auto& a = features[i].shape();
    const auto& b = features[i + 1].shape();
    if (b.h != ceil_div(a.h, 2) || b.w != ceil_div(a.w, 2)) {
      throw ShapeError("idr_head: inconsistent stride pyramid at level " +
                       std::to_string(i + 1) + ": " + a.str() + " then " +
                       b.str());
    }
  }
  const Eigen::Index fh = features[2].shape().h;
  const Eigen::Index fw = features[2].shape().w;
  std::vector<Tensor<S>> pooled;
  pooled.reserve(5);
  for (int i = 0; i < 5; ++i) {
    Tensor<S> s = apply_conv1x1(features[i], p.squeeze[i], g);
    pooled.push_back(bilinear_resize(s, fh, fw, g));
  }
  Tensor<S> y = concat_channels(pooled, g);
  y = relu(apply_bn(apply_conv1x1(y, p.merge, g), p.merge_bn, mode, g), g);
  for (auto& irb : p.fuse) y = irb_forward(y, irb, mode, g);
  y = sigmoid(apply_conv1x1(y, p.out, g), g);
  return bilinear_resize(y, out_h, out_w, g);
}

}  // namespace mobilesal
