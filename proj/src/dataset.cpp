#include "mobilesal/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>

#include "mobilesal/error.hpp"

namespace mobilesal {

namespace fs = std::filesystem;

namespace {

const std::set<std::string> kExtensions{".png", ".pgm", ".ppm"};

// basename -> filename for every decodable image in a directory
std::map<std::string, std::string> index_dir(const fs::path& dir) {
  std::map<std::string, std::string> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const fs::path p = entry.path();
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    if (!kExtensions.count(ext)) continue;
    out[p.stem().string()] = p.filename().string();
  }
  return out;
}

}  // namespace

DatasetManifest scan_dataset(const std::string& root,
                             const DatasetLayout& layout) {
  if (!fs::is_directory(root)) {
    throw DataError("dataset: root is not a directory: " + root);
  }
  const auto rgb = index_dir(fs::path(root) / layout.rgb_dir);
  const auto depth = index_dir(fs::path(root) / layout.depth_dir);
  const auto gt = index_dir(fs::path(root) / layout.gt_dir);

  DatasetManifest m;
  m.root = root;
  m.layout = layout;
  for (const auto& [id, file] : rgb) {
    if (depth.count(id) && gt.count(id)) m.ids.push_back(id);
  }
  std::sort(m.ids.begin(), m.ids.end());
  if (m.ids.empty()) {
    throw DataError("dataset: no complete samples under " + root + " (" +
                    layout.rgb_dir + ": " + std::to_string(rgb.size()) + ", " +
                    layout.depth_dir + ": " + std::to_string(depth.size()) +
                    ", " + layout.gt_dir + ": " + std::to_string(gt.size()) +
                    ")");
  }
  const std::size_t max_count =
      std::max({rgb.size(), depth.size(), gt.size()});
  if (m.ids.size() != max_count) {
    std::cerr << "warning: dataset " << root << " has " << m.ids.size()
              << " complete samples (" << layout.rgb_dir << ": " << rgb.size()
              << ", " << layout.depth_dir << ": " << depth.size() << ", "
              << layout.gt_dir << ": " << gt.size() << ")\n";
  }
  return m;
}

namespace {

std::string find_file(const fs::path& dir, const std::string& id) {
  for (const char* ext : {".png", ".pgm", ".ppm"}) {
    const fs::path p = dir / (id + ext);
    if (fs::exists(p)) return p.string();
  }
  throw DataError("dataset: no file for id \"" + id + "\" in " + dir.string());
}

}  // namespace

Sample load_sample(const DatasetManifest& manifest, const std::string& id) {
  const fs::path root(manifest.root);
  Sample s;
  s.id = id;
  s.rgb = load_image(find_file(root / manifest.layout.rgb_dir, id), ImageKind::rgb);
  s.depth =
      load_image(find_file(root / manifest.layout.depth_dir, id), ImageKind::gray);
  s.gt = load_image(find_file(root / manifest.layout.gt_dir, id), ImageKind::gray);
  const auto& rs = s.rgb.shape();
  if (s.depth.shape().h != rs.h || s.depth.shape().w != rs.w ||
      s.gt.shape().h != rs.h || s.gt.shape().w != rs.w) {
    throw DataError("dataset: modality sizes differ for id \"" + id + "\"");
  }
  // 8-bit masks binarize at 0.5
  for (Eigen::Index i = 0; i < s.gt.size(); ++i) {
    s.gt.data()[i] = s.gt.data()[i] >= 0.5f ? 1.0f : 0.0f;
  }
  return s;
}

std::vector<Sample> load_all(const DatasetManifest& manifest) {
  std::vector<Sample> out;
  out.reserve(manifest.ids.size());
  for (const auto& id : manifest.ids) out.push_back(load_sample(manifest, id));
  return out;
}

}  // namespace mobilesal
