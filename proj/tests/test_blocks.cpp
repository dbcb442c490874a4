#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mobilesal/blocks.hpp"
#include "mobilesal/grad_suites.hpp"

using namespace mobilesal;

namespace {

template <typename S>
Tensor<S> random_tensor(TensorShape s, Pcg32& rng, double lo = -2.0,
                        double hi = 2.0) {
  Tensor<S> t(s);
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    t.data()[i] = static_cast<S>(rng.uniform(lo, hi));
  }
  return t;
}

template <typename S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  REQUIRE(a.shape() == b.shape());
  return (a.array() - b.array()).abs().maxCoeff();
}

template <typename S>
void zero_weights(ParamStore<S>& ps) {
  for (auto& e : ps.entries()) {
    if (e.name.ends_with(".w")) e.tensor.array() = S(0);
  }
}

}  // namespace

TEST_CASE("irb zero branch is a pure residual") {
  Pcg32 rng(3);
  ParamStore<float> ps;
  auto irb = make_irb(ps, "irb", 4, 4, 4, 1, rng);
  zero_weights(ps);
  auto x = random_tensor<float>({2, 4, 5, 5}, rng);
  auto y = irb_forward(x, irb, BnMode::eval);
  CHECK(max_abs_diff(x, y) == 0.0f);
}

TEST_CASE("irb stride 2 halves the spatial extents") {
  Pcg32 rng(5);
  ParamStore<float> ps;
  auto irb = make_irb(ps, "irb", 4, 8, 4, 2, rng);
  auto x = random_tensor<float>({1, 4, 16, 16}, rng);
  auto y = irb_forward(x, irb, BnMode::eval);
  CHECK(y.shape() == TensorShape{1, 8, 8, 8});
}

TEST_CASE("irb matches a step-by-step composition of tensor-core ops") {
  Pcg32 rng(7);
  ParamStore<float> ps;
  auto irb = make_irb(ps, "irb", 4, 4, 4, 1, rng);
  auto x = random_tensor<float>({1, 4, 6, 6}, rng);
  auto y = irb_forward(x, irb, BnMode::eval);

  auto step = conv2d(x, irb.expand.w, nullptr, irb.expand.spec);
  step = batch_norm(step, irb.expand.bn.gamma, irb.expand.bn.beta,
                    irb.expand.bn.run_mean, irb.expand.bn.run_var, BnMode::eval,
                    0.1f, 1e-5f);
  step = relu(step);
  step = conv2d(step, irb.depthwise.w, nullptr, irb.depthwise.spec);
  step = batch_norm(step, irb.depthwise.bn.gamma, irb.depthwise.bn.beta,
                    irb.depthwise.bn.run_mean, irb.depthwise.bn.run_var,
                    BnMode::eval, 0.1f, 1e-5f);
  step = relu(step);
  step = conv2d(step, irb.squeeze.w, nullptr, irb.squeeze.spec);
  step = batch_norm(step, irb.squeeze.bn.gamma, irb.squeeze.bn.beta,
                    irb.squeeze.bn.run_mean, irb.squeeze.bn.run_var,
                    BnMode::eval, 0.1f, 1e-5f);
  step = add(step, x);
  CHECK(max_abs_diff(y, step) < 1e-6);

  CHECK_THROWS_AS(irb_forward(random_tensor<float>({1, 3, 6, 6}, rng), irb,
                              BnMode::eval),
                  ShapeError);
}

TEST_CASE("irb preserves spatial size at stride 1 across extents") {
  Pcg32 rng(9);
  ParamStore<float> ps;
  auto irb = make_irb(ps, "irb", 2, 2, 4, 1, rng);
  for (int h : {4, 5, 9, 16, 21, 33}) {
    for (int w : {4, 7, 12, 33}) {
      auto x = random_tensor<float>({1, 2, h, w}, rng);
      auto y = irb_forward(x, irb, BnMode::eval);
      CHECK(y.shape() == TensorShape{1, 2, h, w});
    }
  }
}

TEST_CASE("channel_attention closed forms and range") {
  Pcg32 rng(13);

  SUBCASE("all-zero FCs give 0.5 everywhere") {
    ParamStore<float> ps;
    auto att = make_attention(ps, "att", 5, rng);
    att.fc1_w.array() = 0;
    att.fc2_w.array() = 0;
    auto x = random_tensor<float>({2, 5, 4, 4}, rng);
    auto v = channel_attention(x, att);
    CHECK(v.shape() == TensorShape{2, 5, 1, 1});
    CHECK((v.array() - 0.5f).abs().maxCoeff() < 1e-7);
  }

  SUBCASE("identity FCs on constant channels give sigmoid(relu(c))") {
    ParamStore<float> ps;
    auto att = make_attention(ps, "att", 3, rng);
    att.fc1_w.array() = 0;
    att.fc2_w.array() = 0;
    for (int i = 0; i < 3; ++i) {
      att.fc1_w.at(i, i, 0, 0) = 1.0f;
      att.fc2_w.at(i, i, 0, 0) = 1.0f;
    }
    const float cs[3] = {-0.7f, 0.3f, 2.0f};
    Tensor<float> x({1, 3, 4, 4});
    for (int c = 0; c < 3; ++c) {
      for (int i = 0; i < 16; ++i) x.data()[c * 16 + i] = cs[c];
    }
    auto v = channel_attention(x, att);
    for (int c = 0; c < 3; ++c) {
      const double expect = 1.0 / (1.0 + std::exp(-std::max(0.0f, cs[c])));
      CHECK(v.at(0, c, 0, 0) == doctest::Approx(expect).epsilon(1e-6));
    }
  }

  SUBCASE("components stay strictly inside (0,1) under input scaling") {
    // 64-bit keeps the sigmoid away from representable 0/1 at these scales;
    // in float a saturated preactivation rounds to exactly 1.
    ParamStore<double> ps;
    auto att = make_attention(ps, "att", 4, rng);
    auto x = random_tensor<double>({1, 4, 6, 6}, rng);
    for (double scale : {0.01, 1.0, 7.0}) {
      auto xs = x.clone();
      xs.array() *= scale;
      auto v = channel_attention(xs, att);
      CHECK(v.array().minCoeff() > 0.0);
      CHECK(v.array().maxCoeff() < 1.0);
    }
    // extreme scaling still never leaves [0,1]
    auto xs = x.clone();
    xs.array() *= 1e4;
    auto v = channel_attention(xs, att);
    CHECK(v.array().minCoeff() >= 0.0);
    CHECK(v.array().maxCoeff() <= 1.0);
  }
}

TEST_CASE("cmf_fuse shape contract, determinism, composition oracle") {
  Pcg32 rng(17);
  ParamStore<float> ps;
  auto cmf = make_cmf(ps, "cmf", 8, 4, rng);
  auto c5 = random_tensor<float>({2, 8, 5, 5}, rng);
  auto d5 = random_tensor<float>({2, 8, 5, 5}, rng);

  auto out = cmf_fuse(c5, d5, cmf, BnMode::eval);
  CHECK(out.shape() == c5.shape());

  auto out2 = cmf_fuse(c5, d5, cmf, BnMode::eval);
  CHECK(max_abs_diff(out, out2) == 0.0f);

  // explicit composition: IRB(v * IRB(c5*d5) * d5)
  auto t = irb_forward(mul(c5, d5), cmf.pre, BnMode::eval);
  auto v = channel_attention(c5, cmf.attention);
  auto expect = irb_forward(mul(mul(t, v), d5), cmf.post, BnMode::eval);
  CHECK(max_abs_diff(out, expect) < 1e-6);

  CHECK_THROWS_AS(
      cmf_fuse(c5, random_tensor<float>({2, 8, 4, 5}, rng), cmf, BnMode::eval),
      ShapeError);

  for (auto [n, h, w] : {std::tuple{1, 3, 3}, {3, 7, 4}, {2, 10, 10}}) {
    auto a = random_tensor<float>({n, 8, h, w}, rng);
    auto b = random_tensor<float>({n, 8, h, w}, rng);
    CHECK(cmf_fuse(a, b, cmf, BnMode::eval).shape() == a.shape());
  }
}

TEST_CASE("cpr zero weights and identity final conv") {
  Pcg32 rng(19);

  SUBCASE("all weights zero gives zero output") {
    ParamStore<float> ps;
    auto cpr = make_cpr(ps, "cpr", 6, 4, {1, 2, 3}, rng);
    zero_weights(ps);
    auto x = random_tensor<float>({1, 6, 6, 6}, rng);
    auto y = cpr_refine(x, cpr, BnMode::eval);
    CHECK(y.array().abs().maxCoeff() == 0.0f);
  }

  SUBCASE("zero branches with identity final conv expose X3 == x") {
    ParamStore<float> ps;
    auto cpr = make_cpr(ps, "cpr", 6, 4, {1, 2, 3}, rng);
    zero_weights(ps);
    for (int c = 0; c < 6; ++c) cpr.final_w.at(c, c, 0, 0) = 1.0f;
    auto x = random_tensor<float>({1, 6, 6, 6}, rng);
    auto y = cpr_refine(x, cpr, BnMode::eval);
    // v' is 0.5 everywhere (zero attention), so y = 0.5 * x
    auto half = x.clone();
    half.array() *= 0.5f;
    CHECK(max_abs_diff(y, half) < 1e-6);
  }
}

TEST_CASE("cpr preserves channels and spatial extents") {
  Pcg32 rng(23);
  ParamStore<float> ps;
  auto cpr = make_cpr(ps, "cpr", 5, 4, {1, 2, 3}, rng);
  for (int h : {4, 6, 15, 33}) {
    auto x = random_tensor<float>({1, 5, h, h}, rng);
    auto y = cpr_refine(x, cpr, BnMode::eval);
    CHECK(y.shape() == x.shape());
  }
  CHECK_THROWS_AS(
      cpr_refine(random_tensor<float>({1, 4, 6, 6}, rng), cpr, BnMode::eval),
      ShapeError);
}

TEST_CASE("cpr matches the step-by-step composition oracle") {
  Pcg32 rng(29);
  ParamStore<float> ps;
  auto cpr = make_cpr(ps, "cpr", 8, 4, {1, 2, 3}, rng);
  auto x = random_tensor<float>({1, 8, 6, 6}, rng);
  auto y = cpr_refine(x, cpr, BnMode::eval);

  const int hid = 32;
  auto x1 = conv2d(x, cpr.expand_w, nullptr, ConvSpec{8, hid, 1, 1, 1, 1, false});
  std::array<Tensor<float>, 3> br;
  for (int i = 0; i < 3; ++i) {
    br[i] = conv2d(x1, cpr.branch_w[i], nullptr,
                   ConvSpec{hid, hid, 3, 1, cpr.dilations[i], hid, false});
    CHECK(br[i].shape() == TensorShape{1, hid, 6, 6});  // same padding
  }
  auto x2 = add(add(br[0], br[1]), br[2]);
  x2 = relu(batch_norm(x2, cpr.sum_bn.gamma, cpr.sum_bn.beta,
                       cpr.sum_bn.run_mean, cpr.sum_bn.run_var, BnMode::eval,
                       0.1f, 1e-5f));
  auto x3 = add(conv2d(x2, cpr.squeeze_w, nullptr,
                       ConvSpec{hid, 8, 1, 1, 1, 1, false}),
                x);
  auto v = channel_attention(x, cpr.attention);
  auto expect =
      mul(conv2d(x3, cpr.final_w, nullptr, ConvSpec{8, 8, 1, 1, 1, 1, false}), v);
  CHECK(max_abs_diff(y, expect) < 1e-6);
}

TEST_CASE("idr_head shape pipeline and output range") {
  Pcg32 rng(31);
  ParamStore<float> ps;
  const std::array<int, 5> chans{4, 6, 8, 12, 16};
  auto idr = make_idr(ps, "idr", chans, 8, 6, rng);
  std::array<Tensor<float>, 5> feats;
  Eigen::Index hw = 32;  // 64x64 input -> strides 2..32 give 32,16,8,4,2
  for (int i = 0; i < 5; ++i) {
    feats[i] = random_tensor<float>({2, chans[i], hw, hw}, rng);
    hw /= 2;
  }
  CHECK(feats[2].shape().h == 8);  // fusion happens at the stride-8 level
  auto dr = idr_head(feats, idr, 64, 64, BnMode::eval);
  CHECK(dr.shape() == TensorShape{2, 1, 64, 64});
  // terminal sigmoid: nothing outside [0,1] regardless of parameters
  // (float can round a saturated sigmoid to exactly 0 or 1)
  CHECK(dr.array().minCoeff() >= 0.0f);
  CHECK(dr.array().maxCoeff() <= 1.0f);

  SUBCASE("inconsistent stride pyramid is rejected") {
    auto broken = feats;
    broken[3] = random_tensor<float>({2, 12, 5, 5}, rng);
    CHECK_THROWS_AS(idr_head(broken, idr, 64, 64, BnMode::eval), ShapeError);
  }
}

TEST_CASE("idr_head has no cross-batch leakage") {
  Pcg32 rng(37);
  ParamStore<float> ps;
  const std::array<int, 5> chans{2, 3, 4, 6, 8};
  auto idr = make_idr(ps, "idr", chans, 4, 6, rng);

  auto build = [&](Pcg32& r) {
    std::array<Tensor<float>, 5> feats;
    Eigen::Index hw = 16;
    for (int i = 0; i < 5; ++i) {
      feats[i] = random_tensor<float>({2, chans[i], hw, hw}, r);
      hw = (hw + 1) / 2;
    }
    return feats;
  };
  auto feats = build(rng);

  // swap the two batch entries of every level
  std::array<Tensor<float>, 5> swapped;
  for (int i = 0; i < 5; ++i) {
    swapped[i] = Tensor<float>(feats[i].shape());
    const Eigen::Index chunk = feats[i].size() / 2;
    std::copy_n(feats[i].data() + chunk, chunk, swapped[i].data());
    std::copy_n(feats[i].data(), chunk, swapped[i].data() + chunk);
  }
  for (auto mode : {BnMode::eval, BnMode::train}) {
    auto a = idr_head(feats, idr, 32, 32, mode);
    auto b = idr_head(swapped, idr, 32, 32, mode);
    const Eigen::Index chunk = a.size() / 2;
    for (Eigen::Index i = 0; i < chunk; ++i) {
      CHECK(a.data()[i] == b.data()[chunk + i]);
      CHECK(a.data()[chunk + i] == b.data()[i]);
    }
  }
}

TEST_CASE("every block passes the finite-difference gradient check") {
  auto results = run_grad_suite("all", 1e-4, 4);
  CHECK(results.size() == 8);  // irb x2, cmf, cpr, idr, bce, dice, ssim
  for (const auto& r : results) {
    INFO(r.name, " max rel error ", r.max_rel_error);
    CHECK(r.passed);
    CHECK(r.max_rel_error < 1e-4);
  }
  CHECK_THROWS_AS(run_grad_suite("nope", 1e-4, 2), StateError);
}
