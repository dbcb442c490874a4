#include "mobilesal/metrics.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "mobilesal/losses.hpp"

namespace mobilesal {

void MetricsAccumulator::add(const TensorF& pred, const TensorF& gt) {
  if (!(pred.shape() == gt.shape())) {
    throw ShapeError("metrics: prediction/mask shape mismatch " +
                     pred.shape().str() + " vs " + gt.shape().str());
  }
  if (pred.shape().c != 1) {
    throw ShapeError("metrics: expects single-channel maps, got " +
                     pred.shape().str());
  }
  const auto& s = pred.shape();
  const Eigen::Index hw = s.plane();
  for (Eigen::Index b = 0; b < s.n; ++b) {
    const float* pp = pred.data() + b * hw;
    const float* gp = gt.data() + b * hw;

    // 256-bin histograms of prediction values split by ground truth; suffix
    // sums then give TP and predicted-positive counts at every threshold.
    std::array<long long, 256> fg{}, bg{};
    long long gt_total = 0;
    double abs_sum = 0;
    for (Eigen::Index i = 0; i < hw; ++i) {
      const double pv = pp[i];
      const bool is_fg = gp[i] >= 0.5f;
      const int bin = std::clamp(static_cast<int>(std::floor(pv * 256.0)), 0, 255);
      (is_fg ? fg : bg)[bin]++;
      gt_total += is_fg;
      abs_sum += std::abs(pv - gp[i]);
    }
    long long tp = 0, pp_count = 0;
    std::array<long long, 256> tp_at{}, pos_at{};
    for (int k = 255; k >= 1; --k) {
      tp += fg[k];
      pp_count += fg[k] + bg[k];
      tp_at[k] = tp;
      pos_at[k] = pp_count;
    }
    for (int k = 1; k <= 255; ++k) {
      const double prec =
          pos_at[k] > 0 ? static_cast<double>(tp_at[k]) / pos_at[k] : 0.0;
      const double rec =
          gt_total > 0 ? static_cast<double>(tp_at[k]) / gt_total : 1.0;
      precision_sum_[k - 1] += prec;
      recall_sum_[k - 1] += rec;
    }
    mae_sum_ += abs_sum / hw;
    if (depth_metrics) {
      TensorF p1({1, 1, s.h, s.w}), g1({1, 1, s.h, s.w});
      std::copy_n(pp, hw, p1.data());
      std::copy_n(gp, hw, g1.data());
      psnr_sum_ += psnr(p1, g1);
      ssim_sum_ += static_cast<double>(ssim(p1, g1, LossConfig{}).value());
    }
    ++images_;
  }
}

PrecisionRecallCurve MetricsAccumulator::curve() const {
  if (images_ == 0) throw DataError("metrics: empty dataset");
  PrecisionRecallCurve c;
  c.num_images = images_;
  for (int k = 1; k <= 255; ++k) {
    c.bins[k - 1].threshold = k / 256.0;
    c.bins[k - 1].precision = precision_sum_[k - 1] / images_;
    c.bins[k - 1].recall = recall_sum_[k - 1] / images_;
  }
  return c;
}

double MetricsAccumulator::mae() const {
  if (images_ == 0) throw DataError("metrics: empty dataset");
  return mae_sum_ / images_;
}

double MetricsAccumulator::mean_psnr() const {
  if (images_ == 0) throw DataError("metrics: empty dataset");
  return psnr_sum_ / images_;
}

double MetricsAccumulator::mean_ssim() const {
  if (images_ == 0) throw DataError("metrics: empty dataset");
  return ssim_sum_ / images_;
}

PrecisionRecallCurve f_measure_curve(const std::vector<TensorF>& preds,
                                     const std::vector<TensorF>& gts) {
  if (preds.size() != gts.size()) {
    throw DataError("f_measure_curve: prediction/mask count mismatch");
  }
  MetricsAccumulator acc;
  for (std::size_t i = 0; i < preds.size(); ++i) acc.add(preds[i], gts[i]);
  return acc.curve();
}

double f_beta_max(const PrecisionRecallCurve& curve, double beta_sq) {
  double best = 0;
  for (const auto& bin : curve.bins) {
    const double denom = beta_sq * bin.precision + bin.recall;
    if (denom <= 0) continue;
    best = std::max(best,
                    (1.0 + beta_sq) * bin.precision * bin.recall / denom);
  }
  return best;
}

double mae(const std::vector<TensorF>& preds, const std::vector<TensorF>& gts) {
  if (preds.size() != gts.size()) {
    throw DataError("mae: prediction/mask count mismatch");
  }
  MetricsAccumulator acc;
  for (std::size_t i = 0; i < preds.size(); ++i) acc.add(preds[i], gts[i]);
  return acc.mae();
}

double mae_single(const TensorF& pred, const TensorF& gt) {
  MetricsAccumulator acc;
  acc.add(pred, gt);
  return acc.mae();
}

double psnr(const TensorF& a, const TensorF& b, double peak) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError("psnr: shape mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
  }
  const double mse =
      (a.array().cast<double>() - b.array().cast<double>()).square().sum() /
      a.size();
  if (mse == 0.0) return 99.0;
  return std::min(10.0 * std::log10(peak * peak / mse), 99.0);
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["dataset"] = dataset;
  j["num_images"] = num_images;
  j["f_beta_max"] = f_beta_max;
  j["mae"] = mae;
  if (psnr) j["psnr"] = *psnr;
  if (ssim) j["ssim"] = *ssim;
  auto curve_json = nlohmann::ordered_json::array();
  for (const auto& bin : curve.bins) {
    curve_json.push_back({{"t", bin.threshold},
                          {"precision", bin.precision},
                          {"recall", bin.recall}});
  }
  j["curve"] = curve_json;
  return j.dump(2);
}

}  // namespace mobilesal
