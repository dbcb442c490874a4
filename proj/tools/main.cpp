// mobilesal command-line tool: train, infer, eval, stats, gradcheck, synth.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <functional>
#include <iostream>

#include "mobilesal/checkpoint.hpp"
#include "mobilesal/grad_suites.hpp"
#include "mobilesal/metrics.hpp"
#include "mobilesal/training.hpp"

using namespace mobilesal;
namespace fs = std::filesystem;

namespace {

int run_guarded(const std::function<void()>& fn) {
  try {
    fn();
    return 0;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

struct TrainArgs {
  std::string data, out;
  int epochs = 60;
  int batch = 10;
  double lr = 1e-4;
  double lambda = 0.3;
  std::vector<int> scales{256, 288, 320};
  double width_mult = 1.0;
  uint64_t seed = 1;
  int threads = 1;
  bool toy = false;
  int synth_n = 8;
  int synth_size = 64;
  int checkpoint_every = 0;
};

void cmd_train(const TrainArgs& a, const std::vector<bool>& overridden) {
  TrainArgs args = a;
  if (args.toy) {
    // desk-scale overfit preset; explicit flags still win
    if (!overridden[0]) args.epochs = 300;
    if (!overridden[1]) args.batch = 8;
    if (!overridden[2]) args.lr = 3e-3;
    if (!overridden[3]) args.width_mult = 0.25;
    if (!overridden[4]) args.scales = {64};
  }
  if (args.threads < 1) throw StateError("--threads must be >= 1");

  std::vector<Sample> data;
  if (!args.data.empty()) {
    data = load_all(scan_dataset(args.data));
  } else if (args.toy) {
    Pcg32 rng(args.seed);
    data = synth_dataset(args.synth_n, args.synth_size, rng);
  } else {
    throw DataError("train: --data is required (or use --toy)");
  }

  TrainConfig cfg;
  cfg.epochs = args.epochs;
  cfg.batch = args.batch;
  cfg.lr = args.lr;
  cfg.lambda = args.lambda;
  cfg.scales = args.scales;
  cfg.seed = args.seed;
  cfg.augment = !args.toy;  // the overfit harness memorizes the samples as-is
  cfg.checkpoint_every = args.checkpoint_every;

  MobileSalConfig mcfg;
  mcfg.width_mult = args.width_mult;
  mcfg.input_h = mcfg.input_w =
      *std::max_element(cfg.scales.begin(), cfg.scales.end());

  fs::create_directories(args.out);
  auto net = build_mobilesal<float>(mcfg, /*with_idr=*/true, args.seed);
  auto result = train_loop(data, net, cfg, args.out);

  std::string lines;
  for (const auto& log : result.history) lines += epoch_log_json(log) + "\n";
  atomic_write_file((fs::path(args.out) / "loss_history.jsonl").string(), lines);

  const auto& last = result.history.back();
  std::cout << "trained " << cfg.epochs << " epochs on " << data.size()
            << " samples\n"
            << "final loss " << last.total << " (saliency " << last.sal
            << ", restoration " << last.idr << ")\n"
            << "checkpoint: " << result.checkpoint_path << "\n";
}

void cmd_infer(const std::string& ckpt, const std::string& rgb_path,
               const std::string& depth_path, const std::string& out_path) {
  const MobileSalConfig cfg = checkpoint_config(ckpt);
  auto net = build_mobilesal<float>(cfg, /*with_idr=*/true, 0);
  auto report = load_checkpoint(net.store, cfg, ckpt);
  if (!report.missing_idr.empty()) {
    std::cerr << "note: checkpoint has no restoration branch ("
              << report.missing_idr.size() << " tensors left at init)\n";
  }
  TensorF rgb = load_image(rgb_path, ImageKind::rgb);
  TensorF depth = load_image(depth_path, ImageKind::gray);
  if (rgb.shape().h != depth.shape().h || rgb.shape().w != depth.shape().w) {
    throw DataError("infer: rgb and depth sizes differ");
  }
  TensorF p1 = infer_saliency(net, rgb, depth);
  save_saliency(p1, out_path);
  std::cout << "wrote " << out_path << " (" << p1.shape().w << "x"
            << p1.shape().h << ")\n";
}

void cmd_eval(const std::string& pred_dir, const std::string& gt_dir,
              const std::string& report_path, const std::string& name,
              bool depth_metrics) {
  auto list_ids = [](const std::string& dir) {
    std::vector<std::string> ids;
    if (!fs::is_directory(dir)) throw DataError("eval: not a directory: " + dir);
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file()) ids.push_back(e.path().stem().string());
    }
    std::sort(ids.begin(), ids.end());
    return ids;
  };
  auto find_file = [](const std::string& dir, const std::string& id) {
    for (const char* ext : {".png", ".pgm", ".ppm"}) {
      fs::path p = fs::path(dir) / (id + ext);
      if (fs::exists(p)) return p.string();
    }
    throw DataError("eval: no file for id " + id + " in " + dir);
  };
  const auto pred_ids = list_ids(pred_dir);
  const auto gt_ids = list_ids(gt_dir);
  if (pred_ids != gt_ids) {
    throw DataError("eval: id sets differ (" + std::to_string(pred_ids.size()) +
                    " predictions vs " + std::to_string(gt_ids.size()) +
                    " masks)");
  }
  MetricsAccumulator acc;
  acc.depth_metrics = depth_metrics;
  for (const auto& id : pred_ids) {
    TensorF pred = load_image(find_file(pred_dir, id), ImageKind::gray);
    TensorF gt = load_image(find_file(gt_dir, id), ImageKind::gray);
    if (!depth_metrics) {
      for (Eigen::Index i = 0; i < gt.size(); ++i) {
        gt.data()[i] = gt.data()[i] >= 0.5f ? 1.0f : 0.0f;
      }
    }
    acc.add(pred, gt);
  }
  MetricsReport report;
  report.dataset = name.empty() ? fs::path(pred_dir).filename().string() : name;
  report.num_images = acc.images();
  report.curve = acc.curve();
  report.f_beta_max = f_beta_max(report.curve);
  report.mae = acc.mae();
  if (depth_metrics) {
    report.psnr = acc.mean_psnr();
    report.ssim = acc.mean_ssim();
  }
  atomic_write_file(report_path, report.to_json() + "\n");
  std::cout << "images " << report.num_images << "  f_beta_max "
            << report.f_beta_max << "  mae " << report.mae << "\n"
            << "report: " << report_path << "\n";
}

void cmd_stats(double width_mult, int input_size) {
  if (input_size <= 0 || input_size % 32 != 0) {
    throw StateError("stats: --input-size must be a positive multiple of 32");
  }
  MobileSalConfig cfg;
  cfg.width_mult = width_mult;
  cfg.input_h = cfg.input_w = input_size;
  auto net = build_mobilesal<float>(cfg, /*with_idr=*/true, 0);

  const char* scopes[] = {"rgb", "depth", "cmf", "decoder", "idr"};
  nlohmann::ordered_json j;
  j["width_mult"] = width_mult;
  j["input_size"] = input_size;
  std::printf("%-10s %14s\n", "scope", "params");
  nlohmann::ordered_json per_scope;
  for (const char* s : scopes) {
    const long long c = count_params(net.store, scope_from_string(s));
    std::printf("%-10s %14lld\n", s, c);
    per_scope[s] = c;
  }
  const long long inference = count_params_inference(net.store);
  const long long total = count_params(net.store, Scope::all);
  std::printf("%-10s %14lld  (deployed model, restoration branch dropped)\n",
              "inference", inference);
  std::printf("%-10s %14lld  (training)\n", "total", total);
  j["params"] = per_scope;
  j["params_inference"] = inference;
  j["params_total"] = total;

  const auto eval_macs = count_flops(cfg, RunMode::eval);
  const auto train_macs = count_flops(cfg, RunMode::train);
  std::printf("%-10s %14lld MMac (eval)\n", "macs", eval_macs.total() / 1000000);
  std::printf("%-10s %14lld MMac (train)\n", "macs", train_macs.total() / 1000000);
  j["macs_eval"] = eval_macs.total();
  j["macs_train"] = train_macs.total();
  j["macs_cmf_stride32"] = cmf_fusion_macs(cfg, input_size / 32, input_size / 32);
  j["macs_cmf_stride8"] = cmf_fusion_macs(cfg, input_size / 8, input_size / 8);
  std::cout << j.dump(2) << "\n";
}

void cmd_gradcheck(const std::string& block, double tolerance) {
  auto results = run_grad_suite(block, tolerance);
  bool all_passed = true;
  for (const auto& r : results) {
    std::printf("%-12s worst rel err %.3e over %3d coords  %s\n",
                r.name.c_str(), r.max_rel_error, r.coords,
                r.passed ? "pass" : "FAIL");
    all_passed &= r.passed;
  }
  if (!all_passed) {
    throw NumericError("gradcheck: tolerance " + std::to_string(tolerance) +
                       " exceeded");
  }
}

void cmd_synth(int n, int size, uint64_t seed, const std::string& out) {
  Pcg32 rng(seed);
  auto data = synth_dataset(n, size, rng);
  fs::create_directories(fs::path(out) / "RGB");
  fs::create_directories(fs::path(out) / "depth");
  fs::create_directories(fs::path(out) / "GT");
  for (const auto& s : data) {
    save_rgb8(s.rgb, (fs::path(out) / "RGB" / (s.id + ".png")).string());
    save_saliency(s.depth, (fs::path(out) / "depth" / (s.id + ".png")).string());
    save_saliency(s.gt, (fs::path(out) / "GT" / (s.id + ".png")).string());
  }
  std::cout << "wrote " << 3 * data.size() << " files under " << out << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MobileSal: efficient RGB-D salient object detection"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train on an RGB-D dataset");
  train->add_option("--data", train_args.data, "dataset root (RGB/, depth/, GT/)");
  train->add_option("--out", train_args.out, "output directory")->required();
  auto* opt_epochs = train->add_option("--epochs", train_args.epochs);
  auto* opt_batch = train->add_option("--batch", train_args.batch);
  auto* opt_lr = train->add_option("--lr", train_args.lr);
  train->add_option("--lambda", train_args.lambda, "restoration loss weight");
  auto* opt_wm = train->add_option("--width-mult", train_args.width_mult);
  auto* opt_scales =
      train->add_option("--scales", train_args.scales, "training scales")
          ->delimiter(',');
  train->add_option("--seed", train_args.seed);
  train->add_option("--threads", train_args.threads,
                    "worker threads; compute is single-threaded and bitwise "
                    "deterministic at any value");
  train->add_option("--checkpoint-every", train_args.checkpoint_every,
                    "epochs between intermediate checkpoints (0: final only)");
  train->add_flag("--toy", train_args.toy,
                  "desk-scale overfit preset: 8 synthetic 64x64 samples, "
                  "width 0.25, 300 epochs, lr 3e-3, no augmentation");
  train->add_option("--synth-n", train_args.synth_n, "--toy: sample count");
  train->add_option("--synth-size", train_args.synth_size, "--toy: image size");

  std::string in_ckpt, in_rgb, in_depth, in_out;
  auto* infer = app.add_subcommand("infer", "Predict a saliency map");
  infer->add_option("--ckpt", in_ckpt)->required();
  infer->add_option("--rgb", in_rgb)->required();
  infer->add_option("--depth", in_depth)->required();
  infer->add_option("--out", in_out)->required();

  std::string ev_pred, ev_gt, ev_report, ev_name;
  bool ev_depth = false;
  auto* eval = app.add_subcommand("eval", "Score predictions against masks");
  eval->add_option("--pred-dir", ev_pred)->required();
  eval->add_option("--gt-dir", ev_gt)->required();
  eval->add_option("--report", ev_report)->required();
  eval->add_option("--name", ev_name, "dataset name in the report");
  eval->add_flag("--depth-metrics", ev_depth,
                 "also report PSNR/SSIM (for depth restorations)");

  double st_wm = 1.0;
  int st_size = 320;
  auto* stats = app.add_subcommand("stats", "Parameter and MAC accounting");
  stats->add_option("--width-mult", st_wm);
  stats->add_option("--input-size", st_size);

  std::string gc_block = "all";
  double gc_tol = 1e-4;
  auto* gradcheck =
      app.add_subcommand("gradcheck", "Finite-difference gradient checks (64-bit)");
  gradcheck->add_option("--block", gc_block, "all|irb|cmf|cpr|idr|losses");
  gradcheck->add_option("--tolerance", gc_tol);

  int sy_n = 8, sy_size = 64;
  uint64_t sy_seed = 1;
  std::string sy_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic RGB-D dataset");
  synth->add_option("--n", sy_n);
  synth->add_option("--size", sy_size);
  synth->add_option("--seed", sy_seed);
  synth->add_option("--out", sy_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (train->parsed()) {
    const std::vector<bool> overridden{
        opt_epochs->count() > 0, opt_batch->count() > 0, opt_lr->count() > 0,
        opt_wm->count() > 0, opt_scales->count() > 0};
    return run_guarded([&] { cmd_train(train_args, overridden); });
  }
  if (infer->parsed()) {
    return run_guarded([&] { cmd_infer(in_ckpt, in_rgb, in_depth, in_out); });
  }
  if (eval->parsed()) {
    return run_guarded(
        [&] { cmd_eval(ev_pred, ev_gt, ev_report, ev_name, ev_depth); });
  }
  if (stats->parsed()) {
    return run_guarded([&] { cmd_stats(st_wm, st_size); });
  }
  if (gradcheck->parsed()) {
    return run_guarded([&] { cmd_gradcheck(gc_block, gc_tol); });
  }
  if (synth->parsed()) {
    return run_guarded([&] { cmd_synth(sy_n, sy_size, sy_seed, sy_out); });
  }
  return 1;
}
