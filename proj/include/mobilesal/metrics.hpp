#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "mobilesal/tensor.hpp"

namespace mobilesal {

struct PrBin {
  double threshold = 0;
  double precision = 0;
  double recall = 0;
};

// 255 thresholds t = k/256, k = 1..255, precision/recall averaged per image.
struct PrecisionRecallCurve {
  std::array<PrBin, 255> bins{};
  std::size_t num_images = 0;
};

// Streaming per-image accumulation of the saliency metrics. Images are added
// one at a time (batched tensors contribute one image per batch entry);
// accumulation order is the call order, so results are deterministic.
class MetricsAccumulator {
 public:
  // pred in [0,1], gt binary {0,1}; shapes must match, single channel.
  void add(const TensorF& pred, const TensorF& gt);

  PrecisionRecallCurve curve() const;
  double mae() const;
  double mean_psnr() const;
  double mean_ssim() const;
  std::size_t images() const { return images_; }

  bool depth_metrics = false;  // also accumulate PSNR/SSIM per image

 private:
  std::array<double, 255> precision_sum_{};
  std::array<double, 255> recall_sum_{};
  double mae_sum_ = 0;
  double psnr_sum_ = 0;
  double ssim_sum_ = 0;
  std::size_t images_ = 0;
};

PrecisionRecallCurve f_measure_curve(const std::vector<TensorF>& preds,
                                     const std::vector<TensorF>& gts);

// max over bins of (1+b^2) P R / (b^2 P + R); beta_sq is the squared
// coefficient (0.3 by default).
double f_beta_max(const PrecisionRecallCurve& curve, double beta_sq = 0.3);

// Mean absolute error per image, averaged over the dataset.
double mae(const std::vector<TensorF>& preds, const std::vector<TensorF>& gts);
double mae_single(const TensorF& pred, const TensorF& gt);

// 10 log10(peak^2 / MSE), capped at 99 dB (the zero-MSE sentinel).
double psnr(const TensorF& a, const TensorF& b, double peak = 1.0);

struct MetricsReport {
  std::string dataset;
  std::size_t num_images = 0;
  double f_beta_max = 0;
  double mae = 0;
  std::optional<double> psnr;
  std::optional<double> ssim;
  PrecisionRecallCurve curve;

  std::string to_json() const;
};

}  // namespace mobilesal
