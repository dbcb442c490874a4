#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "mobilesal/blocks.hpp"

namespace mobilesal {

// Round a channel count by the width multiplier, never below one.
inline int scale_channels(int c, double width_mult) {
  return std::max(1, static_cast<int>(std::lround(c * width_mult)));
}

struct MobileSalConfig {
  int input_h = 320;
  int input_w = 320;
  double width_mult = 1.0;
  int m_depth = 4;
  int m_cpr = 4;
  int m_idr = 6;
  std::array<int, 3> cpr_dilations{1, 2, 3};
  bool include_idr_at_inference = false;

  std::string canonical() const {
    char buf[192];
    std::snprintf(buf, sizeof(buf),
                  "msal-v1;in=%dx%d;wm=%.17g;md=%d;mc=%d;mi=%d;dil=%d,%d,%d;ii=%d",
                  input_h, input_w, width_mult, m_depth, m_cpr, m_idr,
                  cpr_dilations[0], cpr_dilations[1], cpr_dilations[2],
                  include_idr_at_inference ? 1 : 0);
    return buf;
  }

  uint64_t fingerprint() const {
    // FNV-1a over the canonical serialization
    uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : canonical()) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    return h;
  }
};

// --- architecture tables -------------------------------------------------------

// MobileNetV2 bottleneck settings (expansion, output channels, repeats,
// first-block stride), truncated after the 320-channel bottleneck.
struct MnetStage {
  int expansion, channels, repeats, stride;
};
inline constexpr std::array<MnetStage, 7> kMnetStages{{{1, 16, 1, 1},
                                                       {6, 24, 2, 2},
                                                       {6, 32, 3, 2},
                                                       {6, 64, 4, 2},
                                                       {6, 96, 3, 1},
                                                       {6, 160, 3, 2},
                                                       {6, 320, 1, 1}}};
inline constexpr int kMnetStemChannels = 32;
// Pyramid cut points: block indices after which C1..C5 are captured.
inline constexpr std::array<int, 5> kRgbCuts{0, 2, 5, 12, 16};

inline constexpr std::array<int, 5> kDepthChannels{16, 32, 64, 96, 320};
inline constexpr std::array<int, 5> kRgbPyramidChannels{16, 24, 32, 96, 320};
inline constexpr int kIdrChannels = 256;

// Concrete per-block view of the RGB backbone at a given width multiplier.
struct MnetBlockDims {
  int expansion, in_channels, out_channels, stride;
  bool has_expand;
  int hidden() const { return has_expand ? expansion * in_channels : in_channels; }
};

inline std::vector<MnetBlockDims> mobilenet_block_dims(double wm) {
  std::vector<MnetBlockDims> blocks;
  int cin = scale_channels(kMnetStemChannels, wm);
  for (const auto& st : kMnetStages) {
    const int cout = scale_channels(st.channels, wm);
    for (int r = 0; r < st.repeats; ++r) {
      blocks.push_back({st.expansion, cin, cout, r == 0 ? st.stride : 1,
                        st.expansion != 1});
      cin = cout;
    }
  }
  return blocks;
}

// Decoder channel widths per stage (index 0 = stage 1 ... 4 = stage 5),
// following the halve-and-concatenate rule from the top.
inline std::array<int, 5> decoder_channel_dims(double wm) {
  auto half = [](int c) { return std::max(1, c / 2); };
  std::array<int, 5> rgb{};
  for (int i = 0; i < 5; ++i) rgb[i] = scale_channels(kRgbPyramidChannels[i], wm);
  std::array<int, 5> dec{};
  dec[4] = rgb[4];
  for (int i = 3; i >= 0; --i) dec[i] = half(dec[i + 1]) + half(rgb[i]);
  return dec;
}

// --- parameter aggregates ------------------------------------------------------

template <typename S>
struct RgbStreamParams {
  ConvBn<S> stem;
  std::vector<IrbParams<S>> blocks;
};

template <typename S>
struct DepthStreamParams {
  std::array<std::array<IrbParams<S>, 2>, 5> stages;
};

template <typename S>
struct DecoderStageParams {
  Conv1x1<S> top_half, skip_half;
  CprParams<S> cpr;
};

template <typename S>
struct DecoderParams {
  CprParams<S> cpr5;
  std::array<DecoderStageParams<S>, 4> stages;  // index 0 = stage 4 ... 3 = stage 1
};

template <typename S>
struct HeadParams {
  std::array<Conv1x1<S>, 5> side;  // 1x1 to a single channel, zero-initialized
};

template <typename S>
struct BackbonePyramid {
  std::array<Tensor<S>, 5> level;  // strides 2, 4, 8, 16, 32
};

enum class RunMode { train, eval };
enum class SizeCheck { strict, relaxed };

template <typename S>
struct NetworkOutputs {
  std::array<Tensor<S>, 5> saliency;  // P1..P5, all at input resolution
  std::optional<Tensor<S>> restored_depth;
};

template <typename S>
struct MobileSalNet {
  MobileSalConfig config;
  ParamStore<S> store;
  RgbStreamParams<S> rgb;
  DepthStreamParams<S> depth;
  CmfParams<S> cmf;
  DecoderParams<S> decoder;
  HeadParams<S> heads;
  std::optional<IdrParams<S>> idr;

  bool has_idr() const { return idr.has_value(); }
};

// Builds the complete network. IDR parameters are registered last so that the
// non-IDR parameters are identical (same rng draws) with or without the
// branch.
template <typename S>
MobileSalNet<S> build_mobilesal(const MobileSalConfig& cfg, bool with_idr,
                                uint64_t seed) {
  MobileSalNet<S> net;
  net.config = cfg;
  Pcg32 rng(seed);
  auto& ps = net.store;
  const double wm = cfg.width_mult;

  // RGB stream: MobileNetV2 body
  const int stem_c = scale_channels(kMnetStemChannels, wm);
  net.rgb.stem = make_conv_bn(ps, "rgb.stem", 3, stem_c, 3, 2, 1, 1, rng);
  const auto blocks = mobilenet_block_dims(wm);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    char name[32];
    std::snprintf(name, sizeof(name), "rgb.b%02zu", i);
    net.rgb.blocks.push_back(
        make_irb(ps, name, b.in_channels, b.out_channels, b.expansion, b.stride, rng));
  }

  // depth stream: five stages of two IRBs
  int dc_in = 1;
  for (int s = 0; s < 5; ++s) {
    const int dc_out = scale_channels(kDepthChannels[s], wm);
    char n0[32], n1[32];
    std::snprintf(n0, sizeof(n0), "depth.s%d.b0", s);
    std::snprintf(n1, sizeof(n1), "depth.s%d.b1", s);
    net.depth.stages[s][0] = make_irb(ps, n0, dc_in, dc_out, cfg.m_depth, 2, rng);
    net.depth.stages[s][1] = make_irb(ps, n1, dc_out, dc_out, cfg.m_depth, 1, rng);
    dc_in = dc_out;
  }

  // cross-modality fusion at the coarsest level
  const int c5 = scale_channels(kRgbPyramidChannels[4], wm);
  net.cmf = make_cmf(ps, "cmf", c5, 4, rng);

  // decoder: CPR on the fused map, then halve+concat+CPR down the pyramid
  const auto dec = decoder_channel_dims(wm);
  auto half = [](int c) { return std::max(1, c / 2); };
  net.decoder.cpr5 = make_cpr(ps, "dec.cpr5", dec[4], cfg.m_cpr, cfg.cpr_dilations, rng);
  for (int stage = 4; stage >= 1; --stage) {
    auto& sp = net.decoder.stages[4 - stage];
    const int top_c = dec[stage];
    const int skip_c = scale_channels(kRgbPyramidChannels[stage - 1], wm);
    char nt[32], n2[32], n3[32];
    std::snprintf(nt, sizeof(nt), "dec.s%d.top", stage);
    std::snprintf(n2, sizeof(n2), "dec.s%d.skip", stage);
    std::snprintf(n3, sizeof(n3), "dec.s%d.cpr", stage);
    sp.top_half = make_conv1x1(ps, nt, top_c, half(top_c), rng);
    sp.skip_half = make_conv1x1(ps, n2, skip_c, half(skip_c), rng);
    sp.cpr = make_cpr(ps, n3, dec[stage - 1], cfg.m_cpr, cfg.cpr_dilations, rng);
  }

  // side-output heads, zero-initialized so the first predictions are 0.5
  for (int i = 0; i < 5; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "dec.head%d", i + 1);
    net.heads.side[i] =
        make_conv1x1(ps, name, dec[i], 1, rng, /*zero_init=*/true);
  }

  if (with_idr) {
    std::array<int, 5> in_chans{};
    for (int i = 0; i < 4; ++i) {
      in_chans[i] = scale_channels(kRgbPyramidChannels[i], wm);
    }
    in_chans[4] = c5;
    const int mid = scale_channels(kIdrChannels, wm);
    net.idr = make_idr(ps, "idr", in_chans, mid, cfg.m_idr, rng);
  }
  return net;
}

// --- forward passes -------------------------------------------------------------

template <typename S>
BackbonePyramid<S> rgb_stream_forward(const Tensor<S>& rgb,
                                      MobileSalNet<S>& net, RunMode mode,
                                      Graph<S>* g = nullptr) {
  if (rgb.shape().c != 3) {
    throw ShapeError("rgb stream expects 3 channels, got " + rgb.shape().str());
  }
  const BnMode bn = mode == RunMode::train ? BnMode::train : BnMode::eval;
  BackbonePyramid<S> pyr;
  Tensor<S> y = conv_bn_relu(rgb, net.rgb.stem, bn, g);
  int cut = 0;
  for (std::size_t i = 0; i < net.rgb.blocks.size(); ++i) {
    y = irb_forward(y, net.rgb.blocks[i], bn, g);
    if (cut < 5 && static_cast<int>(i) == kRgbCuts[cut]) {
      pyr.level[cut++] = y;
    }
  }
  return pyr;
}

template <typename S>
BackbonePyramid<S> depth_stream_forward(const Tensor<S>& depth,
                                        MobileSalNet<S>& net, RunMode mode,
                                        Graph<S>* g = nullptr) {
  if (depth.shape().c != 1) {
    throw ShapeError("depth stream expects 1 channel, got " +
                     depth.shape().str());
  }
  const BnMode bn = mode == RunMode::train ? BnMode::train : BnMode::eval;
  BackbonePyramid<S> pyr;
  Tensor<S> y = depth;
  for (int s = 0; s < 5; ++s) {
    y = irb_forward(y, net.depth.stages[s][0], bn, g);
    y = irb_forward(y, net.depth.stages[s][1], bn, g);
    pyr.level[s] = y;
  }
  return pyr;
}

// Refines the pyramid top-down. Returns the five refined decoder maps,
// index 0 = stage 1 (finest) ... 4 = stage 5 (coarsest).
template <typename S>
std::array<Tensor<S>, 5> decoder_forward(const BackbonePyramid<S>& rgb_pyr,
                                         const Tensor<S>& c5d,
                                         MobileSalNet<S>& net, RunMode mode,
                                         Graph<S>* g = nullptr) {
  const BnMode bn = mode == RunMode::train ? BnMode::train : BnMode::eval;
  std::array<Tensor<S>, 5> out;
  out[4] = cpr_refine(c5d, net.decoder.cpr5, bn, g);
  for (int stage = 4; stage >= 1; --stage) {
    auto& sp = net.decoder.stages[4 - stage];
    const Tensor<S>& skip = rgb_pyr.level[stage - 1];
    Tensor<S> up = bilinear_resize(out[stage], skip.shape().h, skip.shape().w, g);
    Tensor<S> cat = concat_channels<S>(
        {apply_conv1x1(up, sp.top_half, g), apply_conv1x1(skip, sp.skip_half, g)},
        g);
    out[stage - 1] = cpr_refine(cat, sp.cpr, bn, g);
  }
  return out;
}

// Full pipeline: both streams, fusion, decoder, side outputs, and (in train
// mode) the depth-restoration branch. Eval mode never touches the IDR
// parameters unless include_idr_at_inference is set.
template <typename S>
NetworkOutputs<S> forward_full(MobileSalNet<S>& net, const Tensor<S>& rgb,
                               const Tensor<S>& depth, RunMode mode,
                               Graph<S>* g = nullptr,
                               SizeCheck size_check = SizeCheck::strict) {
  const auto& rs = rgb.shape();
  const auto& ds = depth.shape();
  if (rs.n != ds.n || rs.h != ds.h || rs.w != ds.w) {
    throw ShapeError("forward_full: rgb/depth stream size mismatch " +
                     rs.str() + " vs " + ds.str());
  }
  if (size_check == SizeCheck::strict && (rs.h % 32 != 0 || rs.w % 32 != 0)) {
    throw ShapeError("forward_full: input size " + rs.str() +
                     " is not divisible by 32");
  }
  BackbonePyramid<S> cpyr = rgb_stream_forward(rgb, net, mode, g);
  BackbonePyramid<S> dpyr = depth_stream_forward(depth, net, mode, g);
  const BnMode bn = mode == RunMode::train ? BnMode::train : BnMode::eval;
  Tensor<S> c5d = cmf_fuse(cpyr.level[4], dpyr.level[4], net.cmf, bn, g);
  auto dec = decoder_forward(cpyr, c5d, net, mode, g);

  NetworkOutputs<S> out;
  for (int i = 0; i < 5; ++i) {
    Tensor<S> p = sigmoid(apply_conv1x1(dec[i], net.heads.side[i], g), g);
    out.saliency[i] = bilinear_resize(p, rs.h, rs.w, g);
  }
  const bool run_idr =
      mode == RunMode::train || net.config.include_idr_at_inference;
  if (run_idr && net.has_idr()) {
    std::array<Tensor<S>, 5> feats{cpyr.level[0], cpyr.level[1], cpyr.level[2],
                                   cpyr.level[3], c5d};
    out.restored_depth = idr_head(feats, *net.idr, rs.h, rs.w, bn, g);
  }
  return out;
}

// --- accounting ------------------------------------------------------------------

enum class Scope { all, rgb, depth, cmf, decoder, idr };

inline Scope scope_from_string(const std::string& s) {
  if (s == "all") return Scope::all;
  if (s == "rgb") return Scope::rgb;
  if (s == "depth") return Scope::depth;
  if (s == "cmf") return Scope::cmf;
  if (s == "decoder") return Scope::decoder;
  if (s == "idr") return Scope::idr;
  throw StateError("unknown parameter scope: " + s);
}

inline const char* scope_prefix(Scope s) {
  switch (s) {
    case Scope::rgb: return "rgb.";
    case Scope::depth: return "depth.";
    case Scope::cmf: return "cmf.";
    case Scope::decoder: return "dec.";
    case Scope::idr: return "idr.";
    default: return "";
  }
}

// Element count of the trainable parameters in a scope.
template <typename S>
long long count_params(const ParamStore<S>& store, Scope scope) {
  return store.count_elements(scope_prefix(scope));
}

// The deployed-model count: everything except the training-only IDR branch.
template <typename S>
long long count_params_inference(const ParamStore<S>& store) {
  return count_params(store, Scope::all) - count_params(store, Scope::idr);
}

struct MacBreakdown {
  long long rgb = 0, depth = 0, cmf = 0, decoder = 0, idr = 0;
  long long total() const { return rgb + depth + cmf + decoder + idr; }
};

// conv MACs = n * out_c * (in_c/groups) * k^2 * out_h * out_w
inline long long conv_macs(const ConvSpec& spec, long long out_h,
                           long long out_w, long long n = 1) {
  return n * spec.out_channels *
         (static_cast<long long>(spec.in_channels) / spec.groups) *
         spec.kernel * spec.kernel * out_h * out_w;
}

inline long long fc_macs(long long in, long long out, long long n = 1) {
  return n * in * out;
}

namespace detail {

struct MacWalk {
  long long macs = 0;
  void conv(int cin, int cout, int k, int groups, long long oh, long long ow) {
    macs += conv_macs(ConvSpec{cin, cout, k, 1, 1, groups, false}, oh, ow);
  }
  void elementwise(long long count) { macs += count; }

  void irb(int cin, int cout, int expansion, bool has_expand, int stride,
           long long& h, long long& w) {
    const int hid = has_expand ? expansion * cin : cin;
    if (has_expand) {
      conv(cin, hid, 1, 1, h, w);
      elementwise(2 * hid * h * w);  // BN + relu
    }
    const long long oh = (h + stride - 1) / stride;
    const long long ow = (w + stride - 1) / stride;
    conv(hid, hid, 3, hid, oh, ow);
    elementwise(2 * hid * oh * ow);
    conv(hid, cout, 1, 1, oh, ow);
    elementwise(cout * oh * ow);
    if (stride == 1 && cin == cout) elementwise(cout * oh * ow);  // residual
    h = oh;
    w = ow;
  }

  void attention(int c, long long h, long long w) {
    elementwise(c * h * w);  // GAP
    macs += fc_macs(c, c) * 2;
    elementwise(2 * c);  // relu + sigmoid
  }

  void cpr(int c, int expansion, long long h, long long w) {
    const int hid = c * expansion;
    conv(c, hid, 1, 1, h, w);
    for (int i = 0; i < 3; ++i) conv(hid, hid, 3, hid, h, w);
    elementwise(4 * hid * h * w);  // two adds + BN + relu
    conv(hid, c, 1, 1, h, w);
    elementwise(c * h * w);  // residual
    attention(c, h, w);
    conv(c, c, 1, 1, h, w);
    elementwise(c * h * w);  // recalibration
  }
};

}  // namespace detail

// Pure fusion cost of the CMF module on c5-sized features of the given
// spatial extent (used to compare fusion resolutions).
inline long long cmf_fusion_macs(const MobileSalConfig& cfg, long long h,
                                 long long w) {
  const int c = scale_channels(kRgbPyramidChannels[4], cfg.width_mult);
  detail::MacWalk walk;
  walk.elementwise(c * h * w);  // c5 * d5
  long long hh = h, ww = w;
  walk.irb(c, c, 4, true, 1, hh, ww);
  walk.attention(c, h, w);
  walk.elementwise(2 * c * h * w);  // v * T * d5
  hh = h;
  ww = w;
  walk.irb(c, c, 4, true, 1, hh, ww);
  return walk.macs;
}

// Analytic multiply-accumulate count of one forward pass at the configured
// input size (batch 1).
inline MacBreakdown count_flops(const MobileSalConfig& cfg, RunMode mode) {
  const double wm = cfg.width_mult;
  MacBreakdown mb;
  const long long H = cfg.input_h, W = cfg.input_w;
  auto ceil2 = [](long long v) { return (v + 1) / 2; };

  // RGB stream
  {
    detail::MacWalk walk;
    long long h = ceil2(H), w = ceil2(W);
    const int stem_c = scale_channels(kMnetStemChannels, wm);
    walk.conv(3, stem_c, 3, 1, h, w);
    walk.elementwise(2 * stem_c * h * w);
    for (const auto& b : mobilenet_block_dims(wm)) {
      walk.irb(b.in_channels, b.out_channels, b.expansion, b.has_expand,
               b.stride, h, w);
    }
    mb.rgb = walk.macs;
  }
  // spatial sizes of the five pyramid levels
  std::array<long long, 5> ph{}, pw{};
  {
    long long h = H, w = W;
    for (int i = 0; i < 5; ++i) {
      h = ceil2(h);
      w = ceil2(w);
      ph[i] = h;
      pw[i] = w;
    }
  }
  // depth stream
  {
    detail::MacWalk walk;
    long long h = H, w = W;
    int cin = 1;
    for (int s = 0; s < 5; ++s) {
      const int cout = scale_channels(kDepthChannels[s], wm);
      walk.irb(cin, cout, cfg.m_depth, true, 2, h, w);
      walk.irb(cout, cout, cfg.m_depth, true, 1, h, w);
      cin = cout;
    }
    mb.depth = walk.macs;
  }
  mb.cmf = cmf_fusion_macs(cfg, ph[4], pw[4]);
  // decoder + side outputs
  {
    detail::MacWalk walk;
    const auto dec = decoder_channel_dims(wm);
    auto half = [](int c) { return std::max(1, c / 2); };
    walk.cpr(dec[4], cfg.m_cpr, ph[4], pw[4]);
    for (int stage = 4; stage >= 1; --stage) {
      const int skip_c = scale_channels(kRgbPyramidChannels[stage - 1], wm);
      const long long h = ph[stage - 1], w = pw[stage - 1];
      walk.elementwise(dec[stage] * h * w);  // upsample
      walk.conv(dec[stage], half(dec[stage]), 1, 1, h, w);
      walk.conv(skip_c, half(skip_c), 1, 1, h, w);
      walk.cpr(dec[stage - 1], cfg.m_cpr, h, w);
    }
    for (int i = 0; i < 5; ++i) {
      walk.conv(dec[i], 1, 1, 1, ph[i], pw[i]);
      walk.elementwise(ph[i] * pw[i] + H * W);  // sigmoid + upsample
    }
    mb.decoder = walk.macs;
  }
  const bool run_idr = mode == RunMode::train || cfg.include_idr_at_inference;
  if (run_idr) {
    detail::MacWalk walk;
    const int mid = scale_channels(kIdrChannels, wm);
    for (int i = 0; i < 5; ++i) {
      const int cin = scale_channels(kRgbPyramidChannels[i], wm);
      walk.conv(cin, mid, 1, 1, ph[i], pw[i]);
      walk.elementwise(mid * ph[2] * pw[2]);  // resize to the stride-8 level
    }
    walk.conv(5 * mid, mid, 1, 1, ph[2], pw[2]);
    walk.elementwise(2 * mid * ph[2] * pw[2]);  // BN + relu
    long long h = ph[2], w = pw[2];
    for (int i = 0; i < 4; ++i) walk.irb(mid, mid, cfg.m_idr, true, 1, h, w);
    walk.conv(mid, 1, 1, 1, h, w);
    walk.elementwise(h * w + H * W);  // sigmoid + upsample
    mb.idr = walk.macs;
  }
  return mb;
}

}  // namespace mobilesal
