#pragma once

#include <string>
#include <vector>

#include "mobilesal/dataset.hpp"
#include "mobilesal/losses.hpp"
#include "mobilesal/network.hpp"
#include "mobilesal/optim.hpp"

namespace mobilesal {

// --- data-side tensor transforms (no gradients) ---------------------------------

TensorF nearest_resize(const TensorF& x, Eigen::Index out_h, Eigen::Index out_w);
TensorF crop_hw(const TensorF& x, Eigen::Index y0, Eigen::Index x0,
                Eigen::Index h, Eigen::Index w);
TensorF flip_w(const TensorF& x);

// Per-channel affine normalization of an RGB batch (fixed mean/std).
TensorF normalize_rgb(const TensorF& rgb);
// Min-max normalization to [0,1], per image; constant maps go to zero.
TensorF normalize_depth_minmax(const TensorF& depth);

Sample flip_horizontal(const Sample& s);

// Crop with the original aspect ratio at the given normalized offsets, then
// resize back (bilinear for RGB/depth, nearest for the mask).
Sample crop_resize(const Sample& s, double area_ratio, double off_y, double off_x);

// Random horizontal flip (p = 0.5) plus a random crop of area ratio
// uniform in [0.7, 1].
Sample augment(const Sample& s, Pcg32& rng);

struct Batch {
  TensorF rgb, depth, gt;
  int scale = 0;
};

// One scale drawn uniformly per batch; everything resized to scale x scale,
// RGB normalized, depth min-max normalized per image (it doubles as the
// restoration target).
Batch multi_scale_batch(const std::vector<Sample>& items, Pcg32& rng,
                        const std::vector<int>& scales);

// Synthetic RGB-D saliency data: 1-3 non-overlapping anti-aliased objects on
// a textured background; object depth constant per object, background depth a
// smooth ramp, so depth genuinely separates figure from ground.
std::vector<Sample> synth_dataset(int n, int size, Pcg32& rng);

struct EpochLog {
  int epoch = 0;
  double lr = 0, total = 0, sal = 0, idr = 0;
};

std::string epoch_log_json(const EpochLog& log);

struct TrainResult {
  std::vector<EpochLog> history;
  std::string checkpoint_path;
};

// Full schedule: shuffled batches, augmentation, multi-scale resize, hybrid
// loss, Adam with the poly learning rate. Writes the final checkpoint and
// returns the per-epoch loss history. out_dir may be empty (no files).
TrainResult train_loop(const std::vector<Sample>& data, MobileSalNet<float>& net,
                       const TrainConfig& cfg, const std::string& out_dir);

// Eval-path inference at the native input size: reflect-pad to a multiple of
// 32, run the network, crop the final map back.
TensorF infer_saliency(MobileSalNet<float>& net, const TensorF& rgb,
                       const TensorF& depth);

}  // namespace mobilesal
