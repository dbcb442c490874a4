#pragma once

#include <string>
#include <vector>

#include "mobilesal/image.hpp"
#include "mobilesal/tensor.hpp"

namespace mobilesal {

// One aligned RGB/depth/mask triple, everything in [0,1]; the mask is
// strictly binary after loading.
struct Sample {
  TensorF rgb;    // (1, 3, h, w)
  TensorF depth;  // (1, 1, h, w)
  TensorF gt;     // (1, 1, h, w), values in {0, 1}
  std::string id;
};

struct DatasetLayout {
  std::string rgb_dir = "RGB";
  std::string depth_dir = "depth";
  std::string gt_dir = "GT";
};

struct DatasetManifest {
  std::string root;
  DatasetLayout layout;
  std::vector<std::string> ids;  // sorted; present in all three directories
  std::string split;
};

// Ids are the intersection of the basenames found in the three
// subdirectories, sorted lexicographically. Partial ids produce a warning on
// stderr; an empty intersection is an error that lists per-directory counts.
DatasetManifest scan_dataset(const std::string& root,
                             const DatasetLayout& layout = {});

Sample load_sample(const DatasetManifest& manifest, const std::string& id);

std::vector<Sample> load_all(const DatasetManifest& manifest);

}  // namespace mobilesal
