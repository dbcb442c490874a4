#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mobilesal/tensor.hpp"

namespace mobilesal {

enum class ImageKind { rgb, gray };

// Decoded image: interleaved samples scaled by maxval, 1/2/3/4 channels.
struct RawImage {
  int width = 0, height = 0, channels = 0;
  int maxval = 255;  // 255 or 65535
  std::vector<uint16_t> samples;
};

RawImage decode_image_file(const std::string& path);

// Load a PNG or binary PGM/PPM file as a [0,1] tensor.
//   rgb  -> (1, 3, h, w): grayscale replicated, alpha dropped
//   gray -> (1, 1, h, w): color averaged
TensorF load_image(const std::string& path, ImageKind kind);

// Write a single-channel [0,1] map as 8-bit grayscale, rounding half up.
// The extension picks the container: .pgm writes PGM, anything else PNG.
void save_saliency(const TensorF& map, const std::string& path);

// Write a (1, 3, h, w) [0,1] tensor as 8-bit color (.ppm or PNG).
void save_rgb8(const TensorF& rgb, const std::string& path);

// Encoders used by the savers (exposed for tests).
std::string encode_png(int width, int height, int channels,
                       const std::vector<uint8_t>& interleaved);
std::string encode_pnm(int width, int height, int channels,
                       const std::vector<uint8_t>& interleaved);

}  // namespace mobilesal
