#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mobilesal/grad_check.hpp"
#include "mobilesal/losses.hpp"
#include "mobilesal/metrics.hpp"
#include "reference.hpp"

using namespace mobilesal;

namespace {

template <typename S>
Tensor<S> random_tensor(TensorShape s, Pcg32& rng, double lo, double hi) {
  Tensor<S> t(s);
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    t.data()[i] = static_cast<S>(rng.uniform(lo, hi));
  }
  return t;
}

template <typename S>
Tensor<S> random_mask(TensorShape s, Pcg32& rng) {
  Tensor<S> t(s);
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    t.data()[i] = rng.coin() ? S(1) : S(0);
  }
  return t;
}

}  // namespace

TEST_CASE("bce closed forms") {
  auto g = Tensor<double>::from({1, 1, 2, 2}, {1, 0, 1, 1});
  auto p_half = Tensor<double>::full({1, 1, 2, 2}, 0.5);
  CHECK(bce_loss(p_half, g, 1e-7).value() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-9));

  auto p_perfect = g.clone();
  CHECK(bce_loss(p_perfect, g, 1e-7).value() <= 1.01e-7);

  auto g2 = Tensor<double>::full({1, 1, 3, 3}, 0.0);
  CHECK(bce_loss(Tensor<double>::full({1, 1, 3, 3}, 0.5), g2, 1e-7).value() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-9));

  Pcg32 rng(5);
  auto p = random_tensor<double>({2, 1, 4, 4}, rng, 0.02, 0.98);
  auto gt = random_mask<double>({2, 1, 4, 4}, rng);
  CHECK(bce_loss(p, gt, 1e-7).value() ==
        doctest::Approx(refimpl::bce(p, gt, 1e-7)).epsilon(1e-10));

  CHECK_THROWS_AS(bce_loss(p, Tensor<double>({2, 1, 4, 5}), 1e-7), ShapeError);
}

TEST_CASE("dice closed forms") {
  Pcg32 rng(7);
  auto g = random_mask<double>({2, 1, 5, 5}, rng);
  g.data()[3] = 1;  // nonempty foreground
  auto p = g.clone();
  CHECK(dice_loss(p, g, 1.0).value() == doctest::Approx(0.0).epsilon(1e-6));

  // disjoint masks, |P| = |G| = 100, eps = 1 -> 1 - 1/201
  Tensor<double> pd({1, 1, 20, 20});
  Tensor<double> gd({1, 1, 20, 20});
  for (int i = 0; i < 100; ++i) pd.data()[i] = 1;
  for (int i = 100; i < 200; ++i) gd.data()[i] = 1;
  CHECK(dice_loss(pd, gd, 1.0).value() ==
        doctest::Approx(1.0 - 1.0 / 201.0).epsilon(1e-9));

  auto zero = Tensor<double>({1, 1, 4, 4});
  CHECK(dice_loss(zero, zero.clone(), 1.0).value() == doctest::Approx(0.0));

  auto pr = random_tensor<double>({3, 1, 4, 4}, rng, 0.0, 1.0);
  auto gr = random_mask<double>({3, 1, 4, 4}, rng);
  CHECK(dice_loss(pr, gr, 1.0).value() ==
        doctest::Approx(refimpl::dice(pr, gr, 1.0)).epsilon(1e-10));
}

TEST_CASE("ssim self-similarity, symmetry, constant-map closed form") {
  Pcg32 rng(11);
  LossConfig cfg;
  auto x = random_tensor<double>({1, 1, 16, 16}, rng, 0.0, 1.0);
  CHECK(ssim(x, x, cfg).value() == doctest::Approx(1.0).epsilon(1e-6));

  auto y = random_tensor<double>({1, 1, 16, 16}, rng, 0.0, 1.0);
  CHECK(ssim(x, y, cfg).value() ==
        doctest::Approx(ssim(y, x, cfg).value()).epsilon(1e-12));

  // constant maps: variances vanish, SSIM = (2 c1 c2 + C1)/(c1^2 + c2^2 + C1)
  auto ca = Tensor<double>::full({1, 1, 20, 20}, 0.2);
  auto cb = Tensor<double>::full({1, 1, 20, 20}, 0.8);
  const double c1 = 1e-4;
  const double expect = (2 * 0.2 * 0.8 + c1) / (0.2 * 0.2 + 0.8 * 0.8 + c1);
  const double got = ssim(ca, cb, cfg).value();
  CHECK(got == doctest::Approx(expect).epsilon(1e-9));
  CHECK(std::abs(got - 0.47073) < 1e-4);

  // window truncation path: image smaller than 11x11
  auto sx = random_tensor<double>({1, 1, 7, 5}, rng, 0.0, 1.0);
  CHECK(ssim(sx, sx, cfg).value() == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(ssim(sx, sx, cfg).value() <= 1.0 + 1e-9);

  CHECK_THROWS_AS(ssim(x, Tensor<double>({1, 1, 8, 8}), cfg), ShapeError);
  CHECK_THROWS_AS(ssim(Tensor<double>({1, 2, 8, 8}),
                       Tensor<double>({1, 2, 8, 8}), cfg),
                  ShapeError);
}

TEST_CASE("idr_loss values") {
  Pcg32 rng(13);
  LossConfig cfg;
  auto d = random_tensor<double>({1, 1, 12, 12}, rng, 0.0, 1.0);
  CHECK(idr_loss(d, d, cfg).value() == doctest::Approx(0.0).epsilon(1e-6));

  auto ca = Tensor<double>::full({1, 1, 20, 20}, 0.2);
  auto cb = Tensor<double>::full({1, 1, 20, 20}, 0.8);
  CHECK(std::abs(idr_loss(ca, cb, cfg).value() - 0.52927) < 1e-4);

  auto r = idr_loss(d, random_tensor<double>({1, 1, 12, 12}, rng, 0.0, 1.0), cfg);
  CHECK(r.value() >= 0.0);
  CHECK(r.value() <= 2.0);
}

TEST_CASE("total_loss composition and edge cases") {
  Pcg32 rng(17);
  TensorShape s{2, 1, 8, 8};
  std::array<Tensor<double>, 5> preds;
  for (auto& p : preds) p = random_tensor<double>(s, rng, 0.02, 0.98);
  auto gt = random_mask<double>(s, rng);
  auto dr = random_tensor<double>(s, rng, 0.0, 1.0);
  auto dg = random_tensor<double>(s, rng, 0.0, 1.0);

  LossConfig cfg;
  cfg.lambda = 0.3;
  auto r = total_loss<double>(preds, gt, &dr, &dg, cfg);

  // independent term-by-term oracle
  double expect = 0;
  for (int i = 0; i < 5; ++i) {
    expect += refimpl::bce(preds[i], gt, cfg.bce_clamp) +
              refimpl::dice(preds[i], gt, cfg.dice_smooth);
  }
  const double idr_term = 1.0 - ssim(dr, dg, cfg).value();
  CHECK(r.total.value() ==
        doctest::Approx(expect + 0.3 * idr_term).epsilon(1e-9));
  CHECK(r.sal_sum == doctest::Approx(expect).epsilon(1e-9));
  CHECK(*r.idr == doctest::Approx(idr_term).epsilon(1e-9));

  SUBCASE("lambda 0 reduces to the saliency sum") {
    LossConfig c0;
    c0.lambda = 0.0;
    auto r0 = total_loss<double>(preds, gt, &dr, &dg, c0);
    CHECK(r0.total.value() == doctest::Approx(expect).epsilon(1e-9));
    auto r0b = total_loss<double>(preds, gt, nullptr, nullptr, c0);
    CHECK(r0b.total.value() == doctest::Approx(expect).epsilon(1e-9));
    CHECK(!r0b.idr.has_value());
  }
  SUBCASE("perfect predictions vanish") {
    std::array<Tensor<double>, 5> perfect;
    for (auto& p : perfect) p = gt.clone();
    auto rp = total_loss<double>(perfect, gt, &dg, &dg, cfg);
    CHECK(rp.total.value() <= 1e-5);
  }
  SUBCASE("missing restored depth with lambda > 0 is a state error") {
    CHECK_THROWS_AS(total_loss<double>(preds, gt, nullptr, nullptr, cfg),
                    StateError);
  }
}

TEST_CASE("loss gradients match finite differences") {
  Pcg32 rng(23);
  TensorShape s{2, 1, 6, 6};
  auto gt = random_mask<double>(s, rng);

  SUBCASE("bce w.r.t. interior predictions") {
    auto p = random_tensor<double>(s, rng, 0.05, 0.95);
    auto f = [&](Graph<double>* g) { return bce_loss(p, gt, 1e-7, g); };
    Pcg32 crng(1);
    auto rep = grad_check(f, {{"p", p}}, 1e-6, 1e-4, 30, crng);
    CHECK(rep.passed);
  }
  SUBCASE("dice") {
    auto p = random_tensor<double>(s, rng, 0.05, 0.95);
    auto f = [&](Graph<double>* g) { return dice_loss(p, gt, 1.0, g); };
    Pcg32 crng(2);
    auto rep = grad_check(f, {{"p", p}}, 1e-6, 1e-4, 30, crng);
    CHECK(rep.passed);
  }
  SUBCASE("ssim, including the truncated-window path") {
    LossConfig cfg;
    for (auto hw : {8, 16}) {
      auto x = random_tensor<double>({1, 1, hw, hw}, rng, 0.1, 0.9);
      auto y = random_tensor<double>({1, 1, hw, hw}, rng, 0.1, 0.9);
      auto f = [&](Graph<double>* g) { return ssim(x, y, cfg, g); };
      Pcg32 crng(3);
      auto rep = grad_check(f, {{"x", x}}, 1e-6, 1e-4, 24, crng);
      CHECK(rep.passed);
    }
  }
  SUBCASE("total loss end to end") {
    std::array<Tensor<double>, 5> preds;
    for (auto& p : preds) p = random_tensor<double>(s, rng, 0.05, 0.95);
    auto dr = random_tensor<double>(s, rng, 0.1, 0.9);
    auto dg = random_tensor<double>(s, rng, 0.1, 0.9);
    LossConfig cfg;
    auto f = [&](Graph<double>* g) {
      return total_loss<double>(preds, gt, &dr, &dg, cfg, g).total;
    };
    Pcg32 crng(4);
    auto rep = grad_check(f, {{"p0", preds[0]}, {"p4", preds[4]}, {"dr", dr}},
                          1e-6, 1e-4, 16, crng);
    CHECK(rep.passed);
  }
}

TEST_CASE("losses are nonnegative; bce/dice asymmetric, mae/ssim symmetric") {
  Pcg32 rng(31);
  for (int iter = 0; iter < 20; ++iter) {
    auto p = random_tensor<double>({1, 1, 6, 6}, rng, 0.0, 1.0);
    auto g = random_mask<double>({1, 1, 6, 6}, rng);
    CHECK(bce_loss(p, g, 1e-7).value() >= 0.0);
    CHECK(dice_loss(p, g, 1.0).value() >= 0.0);
  }
  auto p = Tensor<double>::from({1, 1, 1, 2}, {0.9, 0.2});
  auto g = Tensor<double>::from({1, 1, 1, 2}, {1.0, 0.0});
  CHECK(bce_loss(p, g, 1e-7).value() != bce_loss(g, p, 1e-7).value());
  // The Dice ratio is algebraically symmetric in its arguments; the
  // asymmetry is in role only (gradients flow to the prediction side).
  CHECK(dice_loss(p, g, 1.0).value() ==
        doctest::Approx(dice_loss(g, p, 1.0).value()).epsilon(1e-12));
  {
    Graph<double> gr;
    auto loss = dice_loss(p, g, 1.0, &gr);
    gr.backward(loss);
    CHECK(p.has_grad());
    CHECK(!g.has_grad());
  }

  auto pf = p.cast<float>();
  auto gf = g.cast<float>();
  CHECK(mae_single(pf, gf) == mae_single(gf, pf));
}

TEST_CASE("f-measure curve on reference images") {
  SUBCASE("perfect binary prediction") {
    Pcg32 rng(37);
    auto g = random_mask<float>({1, 1, 8, 8}, rng);
    g.data()[0] = 1.0f;
    auto curve = f_measure_curve({g.clone()}, {g.clone()});
    for (const auto& bin : curve.bins) {
      CHECK(bin.precision == doctest::Approx(1.0));
      CHECK(bin.recall == doctest::Approx(1.0));
    }
    CHECK(f_beta_max(curve) == doctest::Approx(1.0));
  }
  SUBCASE("all-ones prediction, half foreground") {
    TensorF p = TensorF::full({1, 1, 4, 4}, 1.0f);
    TensorF g({1, 1, 4, 4});
    for (int i = 0; i < 8; ++i) g.data()[i] = 1.0f;
    auto curve = f_measure_curve({p}, {g});
    for (const auto& bin : curve.bins) {
      CHECK(bin.precision == doctest::Approx(0.5));
      CHECK(bin.recall == doctest::Approx(1.0));
    }
    // constant precision 0.5, recall 1: F = 1.3*0.5 / (0.3*0.5 + 1)
    CHECK(f_beta_max(curve) == doctest::Approx(0.65 / 1.15).epsilon(1e-9));
    CHECK(std::abs(f_beta_max(curve) - 0.5652) < 1e-4);
  }
  SUBCASE("2x2 exhaustive threshold oracle") {
    auto p = TensorF::from({1, 1, 2, 2}, {0.9f, 0.6f, 0.4f, 0.1f});
    auto g = TensorF::from({1, 1, 2, 2}, {1.0f, 1.0f, 0.0f, 0.0f});
    auto curve = f_measure_curve({p}, {g});
    const auto& at_half = curve.bins[127];  // t = 128/256 = 0.5
    CHECK(at_half.threshold == doctest::Approx(0.5));
    CHECK(at_half.precision == doctest::Approx(1.0));
    CHECK(at_half.recall == doctest::Approx(1.0));
    const auto& near_03 = curve.bins[76];  // t = 77/256, nearest to 0.3
    CHECK(near_03.precision == doctest::Approx(2.0 / 3.0));
    CHECK(near_03.recall == doctest::Approx(1.0));
  }
  SUBCASE("empty dataset errors") {
    MetricsAccumulator acc;
    CHECK_THROWS_AS(acc.curve(), DataError);
  }
}

TEST_CASE("f_beta_max invariant under bin-preserving rescaling") {
  Pcg32 rng(41);
  auto p = random_tensor<float>({1, 1, 10, 10}, rng, 0.0, 1.0);
  auto g = random_mask<float>({1, 1, 10, 10}, rng);
  auto p2 = p.clone();
  for (Eigen::Index i = 0; i < p2.size(); ++i) {
    const int bin = std::min(255, static_cast<int>(std::floor(p2.data()[i] * 256.0)));
    p2.data()[i] = (bin + 0.37f) / 256.0f;  // same bin, different value
  }
  auto c1 = f_measure_curve({p}, {g});
  auto c2 = f_measure_curve({p2}, {g});
  for (int k = 0; k < 255; ++k) {
    CHECK(c1.bins[k].precision == c2.bins[k].precision);
    CHECK(c1.bins[k].recall == c2.bins[k].recall);
  }
  CHECK(f_beta_max(c1) == f_beta_max(c2));
  CHECK(f_beta_max(c1) >= 0.0);
  CHECK(f_beta_max(c1) <= 1.0);
}

TEST_CASE("mae values") {
  auto p = TensorF::from({1, 1, 1, 2}, {0.25f, 0.75f});
  auto g = TensorF::from({1, 1, 1, 2}, {0.0f, 1.0f});
  CHECK(mae_single(p, g) == doctest::Approx(0.25));
  CHECK(mae_single(g, g) == doctest::Approx(0.0));
  CHECK(mae_single(TensorF::full({1, 1, 3, 3}, 1.0f),
                   TensorF({1, 1, 3, 3})) == doctest::Approx(1.0));
}

TEST_CASE("psnr values") {
  Pcg32 rng(43);
  auto x = random_tensor<float>({1, 1, 5, 5}, rng, 0.0, 1.0);
  CHECK(psnr(x, x) == doctest::Approx(99.0));
  auto y = x.clone();
  y.array() += 0.1f;
  CHECK(psnr(x, y) == doctest::Approx(20.0).epsilon(1e-4));
}

TEST_CASE("metrics report JSON schema") {
  Pcg32 rng(47);
  auto p = random_tensor<float>({1, 1, 6, 6}, rng, 0.0, 1.0);
  auto g = random_mask<float>({1, 1, 6, 6}, rng);
  MetricsAccumulator acc;
  acc.add(p, g);
  MetricsReport report;
  report.dataset = "toy";
  report.num_images = acc.images();
  report.curve = acc.curve();
  report.f_beta_max = f_beta_max(report.curve);
  report.mae = acc.mae();
  const std::string json = report.to_json();
  CHECK(json.find("\"dataset\"") != std::string::npos);
  CHECK(json.find("\"f_beta_max\"") != std::string::npos);
  CHECK(json.find("\"curve\"") != std::string::npos);
  CHECK(json.find("\"precision\"") != std::string::npos);
  // full 255-bin curve
  std::size_t count = 0, pos = 0;
  while ((pos = json.find("\"t\":", pos)) != std::string::npos) {
    ++count;
    pos += 4;
  }
  CHECK(count == 255);
}
