#include "mobilesal/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "mobilesal/checkpoint.hpp"
#include "mobilesal/ops.hpp"

namespace mobilesal {

namespace {

constexpr float kRgbMean[3] = {0.485f, 0.456f, 0.406f};
constexpr float kRgbStd[3] = {0.229f, 0.224f, 0.225f};

Eigen::Index ceil_to(Eigen::Index v, Eigen::Index m) {
  return ((v + m - 1) / m) * m;
}

}  // namespace

TensorF nearest_resize(const TensorF& x, Eigen::Index out_h, Eigen::Index out_w) {
  if (out_h < 1 || out_w < 1) {
    throw ShapeError("nearest_resize: target extents must be >= 1");
  }
  const auto& s = x.shape();
  TensorF out({s.n, s.c, out_h, out_w});
  for (Eigen::Index n = 0; n < s.n; ++n) {
    for (Eigen::Index c = 0; c < s.c; ++c) {
      for (Eigen::Index oy = 0; oy < out_h; ++oy) {
        const Eigen::Index sy = std::min<Eigen::Index>(
            s.h - 1, static_cast<Eigen::Index>((oy + 0.5) * s.h / out_h));
        for (Eigen::Index ox = 0; ox < out_w; ++ox) {
          const Eigen::Index sx = std::min<Eigen::Index>(
              s.w - 1, static_cast<Eigen::Index>((ox + 0.5) * s.w / out_w));
          out.at(n, c, oy, ox) = x.at(n, c, sy, sx);
        }
      }
    }
  }
  return out;
}

TensorF crop_hw(const TensorF& x, Eigen::Index y0, Eigen::Index x0,
                Eigen::Index h, Eigen::Index w) {
  const auto& s = x.shape();
  if (y0 < 0 || x0 < 0 || y0 + h > s.h || x0 + w > s.w) {
    throw ShapeError("crop_hw: window outside the image");
  }
  TensorF out({s.n, s.c, h, w});
  for (Eigen::Index n = 0; n < s.n; ++n) {
    for (Eigen::Index c = 0; c < s.c; ++c) {
      for (Eigen::Index y = 0; y < h; ++y) {
        std::copy_n(x.data() + x.offset(n, c, y0 + y, x0), w,
                    out.data() + out.offset(n, c, y, 0));
      }
    }
  }
  return out;
}

TensorF flip_w(const TensorF& x) {
  const auto& s = x.shape();
  TensorF out(s);
  for (Eigen::Index n = 0; n < s.n; ++n) {
    for (Eigen::Index c = 0; c < s.c; ++c) {
      for (Eigen::Index y = 0; y < s.h; ++y) {
        for (Eigen::Index xx = 0; xx < s.w; ++xx) {
          out.at(n, c, y, xx) = x.at(n, c, y, s.w - 1 - xx);
        }
      }
    }
  }
  return out;
}

TensorF normalize_rgb(const TensorF& rgb) {
  const auto& s = rgb.shape();
  if (s.c != 3) throw ShapeError("normalize_rgb: expects 3 channels");
  TensorF out(s);
  const Eigen::Index hw = s.plane();
  for (Eigen::Index n = 0; n < s.n; ++n) {
    for (int c = 0; c < 3; ++c) {
      const float* src = rgb.data() + rgb.offset(n, c, 0, 0);
      float* dst = out.data() + out.offset(n, c, 0, 0);
      for (Eigen::Index i = 0; i < hw; ++i) {
        dst[i] = (src[i] - kRgbMean[c]) / kRgbStd[c];
      }
    }
  }
  return out;
}

TensorF normalize_depth_minmax(const TensorF& depth) {
  const auto& s = depth.shape();
  TensorF out(s);
  const Eigen::Index per = s.c * s.plane();
  for (Eigen::Index n = 0; n < s.n; ++n) {
    const float* src = depth.data() + n * per;
    float* dst = out.data() + n * per;
    float lo = src[0], hi = src[0];
    for (Eigen::Index i = 1; i < per; ++i) {
      lo = std::min(lo, src[i]);
      hi = std::max(hi, src[i]);
    }
    if (hi > lo) {
      const float inv = 1.0f / (hi - lo);
      for (Eigen::Index i = 0; i < per; ++i) dst[i] = (src[i] - lo) * inv;
    } else {
      std::fill_n(dst, per, 0.0f);
    }
  }
  return out;
}

Sample flip_horizontal(const Sample& s) {
  return Sample{flip_w(s.rgb), flip_w(s.depth), flip_w(s.gt), s.id};
}

Sample crop_resize(const Sample& s, double area_ratio, double off_y,
                   double off_x) {
  const auto& sh = s.rgb.shape();
  const double f = std::sqrt(area_ratio);
  const Eigen::Index ch = std::max<Eigen::Index>(1, std::llround(sh.h * f));
  const Eigen::Index cw = std::max<Eigen::Index>(1, std::llround(sh.w * f));
  const Eigen::Index y0 = static_cast<Eigen::Index>(std::llround(off_y * (sh.h - ch)));
  const Eigen::Index x0 = static_cast<Eigen::Index>(std::llround(off_x * (sh.w - cw)));
  if (ch == sh.h && cw == sh.w) return Sample{s.rgb, s.depth, s.gt, s.id};
  Sample out;
  out.id = s.id;
  out.rgb = bilinear_resize(crop_hw(s.rgb, y0, x0, ch, cw), sh.h, sh.w);
  out.depth = bilinear_resize(crop_hw(s.depth, y0, x0, ch, cw), sh.h, sh.w);
  out.gt = nearest_resize(crop_hw(s.gt, y0, x0, ch, cw), sh.h, sh.w);
  return out;
}

Sample augment(const Sample& s, Pcg32& rng) {
  const bool flip = rng.uniform() < 0.5;
  const double ratio = rng.uniform(0.7, 1.0);
  const double oy = rng.uniform();
  const double ox = rng.uniform();
  Sample base = flip ? flip_horizontal(s) : s;
  return crop_resize(base, ratio, oy, ox);
}

Batch multi_scale_batch(const std::vector<Sample>& items, Pcg32& rng,
                        const std::vector<int>& scales) {
  if (items.empty()) throw DataError("multi_scale_batch: empty batch");
  if (scales.empty()) throw StateError("multi_scale_batch: no scales");
  const int scale = scales[rng.below(static_cast<uint32_t>(scales.size()))];
  const Eigen::Index s = scale;
  const auto b = static_cast<Eigen::Index>(items.size());
  Batch out;
  out.scale = scale;
  out.rgb = TensorF({b, 3, s, s});
  out.depth = TensorF({b, 1, s, s});
  out.gt = TensorF({b, 1, s, s});
  for (Eigen::Index i = 0; i < b; ++i) {
    const TensorF rgb = bilinear_resize(items[i].rgb, s, s);
    const TensorF depth = bilinear_resize(items[i].depth, s, s);
    const TensorF gt = nearest_resize(items[i].gt, s, s);
    std::copy_n(rgb.data(), rgb.size(), out.rgb.data() + i * 3 * s * s);
    std::copy_n(depth.data(), depth.size(), out.depth.data() + i * s * s);
    std::copy_n(gt.data(), gt.size(), out.gt.data() + i * s * s);
  }
  out.rgb = normalize_rgb(out.rgb);
  out.depth = normalize_depth_minmax(out.depth);
  return out;
}

// --- synthetic data --------------------------------------------------------------

namespace {

struct SynthObject {
  bool ellipse = true;
  double cx = 0, cy = 0, rx = 0, ry = 0;
  float color[3] = {0, 0, 0};
  double depth = 0.2;
};

bool inside(const SynthObject& o, double x, double y) {
  const double dx = (x - o.cx) / o.rx;
  const double dy = (y - o.cy) / o.ry;
  return o.ellipse ? dx * dx + dy * dy <= 1.0
                   : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
}

// 4x4 supersampled coverage
double coverage(const SynthObject& o, Eigen::Index px, Eigen::Index py) {
  int hit = 0;
  for (int sy = 0; sy < 4; ++sy) {
    for (int sx = 0; sx < 4; ++sx) {
      const double x = px + (sx + 0.5) / 4.0;
      const double y = py + (sy + 0.5) / 4.0;
      hit += inside(o, x, y);
    }
  }
  return hit / 16.0;
}

}  // namespace

std::vector<Sample> synth_dataset(int n, int size, Pcg32& rng) {
  if (n < 1) throw StateError("synth_dataset: n must be >= 1");
  if (size < 32 || size % 32 != 0) {
    throw StateError("synth_dataset: size must be a positive multiple of 32");
  }
  std::vector<Sample> out;
  out.reserve(n);
  for (int si = 0; si < n; ++si) {
    Sample s;
    char id[32];
    std::snprintf(id, sizeof(id), "synth_%04d", si);
    s.id = id;
    s.rgb = TensorF({1, 3, size, size});
    s.depth = TensorF({1, 1, size, size});
    s.gt = TensorF({1, 1, size, size});

    // background: bilinear color gradient + sine texture + mild noise
    double corners[3][4];
    for (auto& ch : corners) {
      for (double& v : ch) v = rng.uniform(0.2, 0.8);
    }
    const double fx = rng.uniform(1.0, 3.0), fy = rng.uniform(1.0, 3.0);
    const double phase = rng.uniform(0.0, 6.2831853);
    // depth ramp direction
    const double ang = rng.uniform(0.0, 6.2831853);
    const double dx = std::cos(ang), dy = std::sin(ang);
    const double d0 = rng.uniform(0.55, 0.70), d1 = rng.uniform(0.78, 0.95);

    const Eigen::Index plane = static_cast<Eigen::Index>(size) * size;
    for (Eigen::Index y = 0; y < size; ++y) {
      for (Eigen::Index x = 0; x < size; ++x) {
        const double u = static_cast<double>(x) / (size - 1);
        const double v = static_cast<double>(y) / (size - 1);
        const double tex =
            0.05 * std::sin(6.2831853 * (fx * u + fy * v) + phase);
        for (int c = 0; c < 3; ++c) {
          const double base = corners[c][0] * (1 - u) * (1 - v) +
                              corners[c][1] * u * (1 - v) +
                              corners[c][2] * (1 - u) * v + corners[c][3] * u * v;
          const double val = base + tex + rng.uniform(-0.02, 0.02);
          s.rgb.data()[c * plane + y * size + x] =
              static_cast<float>(std::clamp(val, 0.0, 1.0));
        }
        const double t = (u * dx + v * dy + 1.0) / 2.0;  // ramp in [0,1]
        s.depth.data()[y * size + x] = static_cast<float>(
            std::clamp(d0 + (d1 - d0) * t + rng.uniform(-0.01, 0.01), 0.0, 1.0));
      }
    }

    // 1-3 non-overlapping objects, nearer than the background
    const int want = 1 + static_cast<int>(rng.below(3));
    std::vector<SynthObject> objects;
    const double bg_mean =
        (corners[0][0] + corners[1][0] + corners[2][0] + corners[0][3] +
         corners[1][3] + corners[2][3]) /
        6.0;
    for (int k = 0; k < want; ++k) {
      for (int attempt = 0; attempt < 20; ++attempt) {
        SynthObject o;
        o.ellipse = rng.coin();
        o.rx = rng.uniform(0.10, 0.22) * size;
        o.ry = rng.uniform(0.10, 0.22) * size;
        o.cx = rng.uniform(o.rx + 2, size - o.rx - 2);
        o.cy = rng.uniform(o.ry + 2, size - o.ry - 2);
        for (float& c : o.color) {
          c = static_cast<float>(bg_mean > 0.5 ? rng.uniform(0.05, 0.30)
                                               : rng.uniform(0.70, 0.95));
        }
        o.depth = rng.uniform(0.08, 0.45);
        bool overlaps = false;
        for (const auto& prev : objects) {
          if (std::abs(o.cx - prev.cx) < o.rx + prev.rx + 3 &&
              std::abs(o.cy - prev.cy) < o.ry + prev.ry + 3) {
            overlaps = true;
            break;
          }
        }
        if (!overlaps) {
          objects.push_back(o);
          break;
        }
      }
    }

    for (const auto& o : objects) {
      const auto y_lo = static_cast<Eigen::Index>(std::max(0.0, o.cy - o.ry - 2));
      const auto y_hi = static_cast<Eigen::Index>(std::min<double>(size, o.cy + o.ry + 2));
      const auto x_lo = static_cast<Eigen::Index>(std::max(0.0, o.cx - o.rx - 2));
      const auto x_hi = static_cast<Eigen::Index>(std::min<double>(size, o.cx + o.rx + 2));
      for (Eigen::Index y = y_lo; y < y_hi; ++y) {
        for (Eigen::Index x = x_lo; x < x_hi; ++x) {
          const double alpha = coverage(o, x, y);
          if (alpha <= 0) continue;
          const Eigen::Index p = y * size + x;
          for (int c = 0; c < 3; ++c) {
            float& px = s.rgb.data()[c * plane + p];
            px = static_cast<float>(px * (1 - alpha) + o.color[c] * alpha);
          }
          if (alpha >= 0.5) {
            s.gt.data()[p] = 1.0f;
            s.depth.data()[p] = static_cast<float>(
                std::clamp(o.depth + rng.uniform(-0.008, 0.008), 0.0, 1.0));
          }
        }
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

// --- training loop ----------------------------------------------------------------

std::string epoch_log_json(const EpochLog& log) {
  char buf[240];
  std::snprintf(buf, sizeof(buf),
                "{\"epoch\":%d,\"lr\":%.17g,\"loss_total\":%.17g,"
                "\"loss_sal\":%.17g,\"loss_idr\":%.17g}",
                log.epoch, log.lr, log.total, log.sal, log.idr);
  return buf;
}

TrainResult train_loop(const std::vector<Sample>& data, MobileSalNet<float>& net,
                       const TrainConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  if (data.empty()) throw DataError("train_loop: empty dataset");
  if (cfg.lambda > 0 && !net.has_idr()) {
    throw StateError("train_loop: lambda > 0 but the network has no restoration branch");
  }
  LossConfig lcfg;
  lcfg.lambda = cfg.lambda;

  Pcg32 rng(cfg.seed);
  AdamState<float> adam = make_adam_state(net.store);
  TrainResult result;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = poly_lr(epoch, cfg);
    // Fisher-Yates with the run's generator
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.below(static_cast<uint32_t>(i))]);
    }
    double sum_total = 0, sum_sal = 0, sum_idr = 0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      std::vector<Sample> items;
      items.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        items.push_back(cfg.augment ? augment(data[order[i]], rng)
                                    : data[order[i]]);
      }
      Batch batch = multi_scale_batch(items, rng, cfg.scales);
      Graph<float> graph;
      auto out = forward_full(net, batch.rgb, batch.depth, RunMode::train, &graph);
      const TensorF* restored =
          out.restored_depth ? &*out.restored_depth : nullptr;
      auto loss = total_loss<float>(out.saliency, batch.gt, restored,
                                    restored ? &batch.depth : nullptr, lcfg,
                                    &graph);
      if (!std::isfinite(loss.total.value())) {
        throw NumericError("train_loop: non-finite loss at epoch " +
                           std::to_string(epoch) + ", batch " +
                           std::to_string(batches));
      }
      graph.backward(loss.total);
      net.store.ensure_grads();
      adam_step(net.store, adam, lr, cfg);
      sum_total += loss.total.value();
      sum_sal += loss.sal_sum;
      sum_idr += loss.idr.value_or(0.0);
      ++batches;
    }
    result.history.push_back({epoch, lr, sum_total / batches, sum_sal / batches,
                              sum_idr / batches});
    if (!out_dir.empty() && cfg.checkpoint_every > 0 &&
        (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs) {
      char name[64];
      std::snprintf(name, sizeof(name), "ckpt_epoch_%04d.msal", epoch + 1);
      save_checkpoint(net.store, net.config,
                      (std::filesystem::path(out_dir) / name).string());
    }
  }
  if (!out_dir.empty()) {
    const std::string path =
        (std::filesystem::path(out_dir) / "model.msal").string();
    save_checkpoint(net.store, net.config, path);
    result.checkpoint_path = path;
  }
  return result;
}

namespace {

TensorF reflect_pad_to(const TensorF& x, Eigen::Index th, Eigen::Index tw) {
  const auto& s = x.shape();
  if (s.h == th && s.w == tw) return x;
  TensorF out({s.n, s.c, th, tw});
  for (Eigen::Index n = 0; n < s.n; ++n) {
    for (Eigen::Index c = 0; c < s.c; ++c) {
      for (Eigen::Index y = 0; y < th; ++y) {
        Eigen::Index sy = y < s.h ? y : 2 * s.h - 2 - y;
        sy = std::clamp<Eigen::Index>(sy, 0, s.h - 1);
        for (Eigen::Index xx = 0; xx < tw; ++xx) {
          Eigen::Index sx = xx < s.w ? xx : 2 * s.w - 2 - xx;
          sx = std::clamp<Eigen::Index>(sx, 0, s.w - 1);
          out.at(n, c, y, xx) = x.at(n, c, sy, sx);
        }
      }
    }
  }
  return out;
}

}  // namespace

TensorF infer_saliency(MobileSalNet<float>& net, const TensorF& rgb,
                       const TensorF& depth) {
  const auto& rs = rgb.shape();
  const auto& ds = depth.shape();
  if (rs.n != 1 || rs.c != 3 || ds.n != 1 || ds.c != 1 || rs.h != ds.h ||
      rs.w != ds.w) {
    throw ShapeError("infer_saliency: expects one (1,3,h,w) rgb and matching (1,1,h,w) depth");
  }
  const Eigen::Index th = ceil_to(rs.h, 32);
  const Eigen::Index tw = ceil_to(rs.w, 32);
  TensorF nrgb = reflect_pad_to(normalize_rgb(rgb), th, tw);
  TensorF ndepth = reflect_pad_to(normalize_depth_minmax(depth), th, tw);
  auto out = forward_full(net, nrgb, ndepth, RunMode::eval);
  TensorF p1 = out.saliency[0];
  if (th != rs.h || tw != rs.w) p1 = crop_hw(p1, 0, 0, rs.h, rs.w);
  return p1;
}

}  // namespace mobilesal
