#pragma once

#include <string>
#include <vector>

#include "mobilesal/blocks.hpp"
#include "mobilesal/grad_check.hpp"
#include "mobilesal/losses.hpp"

namespace mobilesal {

struct BlockCheck {
  std::string name;
  double max_rel_error = 0;
  int coords = 0;
  bool passed = false;
};

namespace detail {

template <typename S>
Tensor<S> uniform_tensor(TensorShape s, Pcg32& rng, double lo, double hi) {
  Tensor<S> t(s);
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    t.data()[i] = static_cast<S>(rng.uniform(lo, hi));
  }
  return t;
}

inline std::vector<GradCheckItem> store_items(ParamStore<double>& ps) {
  std::vector<GradCheckItem> items;
  for (auto& e : ps.entries()) {
    if (e.kind == ParamKind::trainable) items.push_back({e.name, e.tensor});
  }
  return items;
}

inline BlockCheck run_one(const std::string& name,
                          const std::function<Tensor<double>(Graph<double>*)>& f,
                          std::vector<GradCheckItem> items, double tolerance,
                          int coords_per_tensor) {
  Pcg32 rng(0xC0FFEE);
  auto rep =
      grad_check(f, std::move(items), 1e-5, tolerance, coords_per_tensor, rng);
  return {name, rep.max_rel_error, rep.coords_checked, rep.passed};
}

}  // namespace detail

// Finite-difference suites for every parameterized block, run in 64-bit mode.
// `which` is one of: all, irb, cmf, cpr, idr, losses.
inline std::vector<BlockCheck> run_grad_suite(const std::string& which,
                                              double tolerance = 1e-4,
                                              int coords_per_tensor = 6) {
  using detail::run_one;
  using detail::store_items;
  using detail::uniform_tensor;
  std::vector<BlockCheck> results;
  const bool all = which == "all";
  if (!all && which != "irb" && which != "cmf" && which != "cpr" &&
      which != "idr" && which != "losses") {
    throw StateError("unknown gradcheck block: " + which);
  }

  if (all || which == "irb") {
    for (int stride : {1, 2}) {
      Pcg32 rng(101 + stride);
      ParamStore<double> ps;
      auto irb = make_irb(ps, "irb", 4, stride == 1 ? 4 : 6, 4, stride, rng);
      auto x = uniform_tensor<double>({1, 4, 6, 6}, rng, -1.5, 1.5);
      auto probe = uniform_tensor<double>(
          {1, stride == 1 ? 4 : 6, stride == 1 ? 6 : 3, stride == 1 ? 6 : 3},
          rng, -1, 1);
      auto f = [&](Graph<double>* g) {
        return reduce_sum(mul(irb_forward(x, irb, BnMode::train, g), probe, g), g);
      };
      auto items = store_items(ps);
      items.push_back({"input", x});
      results.push_back(run_one("irb_stride" + std::to_string(stride), f,
                                std::move(items), tolerance, coords_per_tensor));
    }
  }
  if (all || which == "cmf") {
    Pcg32 rng(211);
    ParamStore<double> ps;
    auto cmf = make_cmf(ps, "cmf", 6, 2, rng);
    auto c5 = uniform_tensor<double>({1, 6, 4, 4}, rng, -1.5, 1.5);
    auto d5 = uniform_tensor<double>({1, 6, 4, 4}, rng, -1.5, 1.5);
    auto probe = uniform_tensor<double>({1, 6, 4, 4}, rng, -1, 1);
    auto f = [&](Graph<double>* g) {
      return reduce_sum(mul(cmf_fuse(c5, d5, cmf, BnMode::train, g), probe, g), g);
    };
    auto items = store_items(ps);
    items.push_back({"c5", c5});
    items.push_back({"d5", d5});
    results.push_back(
        run_one("cmf", f, std::move(items), tolerance, coords_per_tensor));
  }
  if (all || which == "cpr") {
    Pcg32 rng(307);
    ParamStore<double> ps;
    auto cpr = make_cpr(ps, "cpr", 8, 4, {1, 2, 3}, rng);
    auto x = uniform_tensor<double>({1, 8, 6, 6}, rng, -1.5, 1.5);
    auto probe = uniform_tensor<double>({1, 8, 6, 6}, rng, -1, 1);
    auto f = [&](Graph<double>* g) {
      return reduce_sum(mul(cpr_refine(x, cpr, BnMode::train, g), probe, g), g);
    };
    auto items = store_items(ps);
    items.push_back({"input", x});
    results.push_back(
        run_one("cpr", f, std::move(items), tolerance, coords_per_tensor));
  }
  if (all || which == "idr") {
    Pcg32 rng(401);
    ParamStore<double> ps;
    const std::array<int, 5> chans{4, 6, 8, 12, 16};
    auto idr = make_idr(ps, "idr", chans, 8, 6, rng);
    std::array<Tensor<double>, 5> feats;
    // Fusion happens at the stride-8 level (8x8 here). Degenerately small
    // planes leave some channels with near-zero batch variance, which makes
    // the train-mode statistics ill conditioned for finite differences.
    Eigen::Index hw = 32;
    for (int i = 0; i < 5; ++i) {
      feats[i] = uniform_tensor<double>({2, chans[i], hw, hw}, rng, -1.5, 1.5);
      hw = (hw + 1) / 2;
    }
    auto probe = uniform_tensor<double>({2, 1, 64, 64}, rng, -1, 1);
    auto f = [&](Graph<double>* g) {
      return reduce_sum(
          mul(idr_head(feats, idr, 64, 64, BnMode::train, g), probe, g), g);
    };
    auto items = store_items(ps);
    items.push_back({"c1", feats[0]});
    items.push_back({"c5d", feats[4]});
    results.push_back(
        run_one("idr", f, std::move(items), tolerance, coords_per_tensor));
  }
  if (all || which == "losses") {
    Pcg32 rng(503);
    LossConfig cfg;
    auto p = uniform_tensor<double>({1, 1, 8, 8}, rng, 0.05, 0.95);
    Tensor<double> gt({1, 1, 8, 8});
    for (Eigen::Index i = 0; i < gt.size(); ++i) gt.data()[i] = rng.coin();
    auto f_bce = [&](Graph<double>* g) {
      return bce_loss(p, gt, cfg.bce_clamp, g);
    };
    results.push_back(
        run_one("bce", f_bce, {{"p", p}}, tolerance, 4 * coords_per_tensor));
    auto f_dice = [&](Graph<double>* g) {
      return dice_loss(p, gt, cfg.dice_smooth, g);
    };
    results.push_back(
        run_one("dice", f_dice, {{"p", p}}, tolerance, 4 * coords_per_tensor));
    auto dr = uniform_tensor<double>({1, 1, 8, 8}, rng, 0.1, 0.9);
    auto dg = uniform_tensor<double>({1, 1, 8, 8}, rng, 0.1, 0.9);
    auto f_ssim = [&](Graph<double>* g) { return idr_loss(dr, dg, cfg, g); };
    results.push_back(
        run_one("ssim", f_ssim, {{"dr", dr}}, tolerance, 4 * coords_per_tensor));
  }
  return results;
}

}  // namespace mobilesal
