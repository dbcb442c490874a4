#include "mobilesal/image.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mobilesal/checkpoint.hpp"
#include "mobilesal/error.hpp"

namespace mobilesal {

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("image: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

uint32_t be32(const unsigned char* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) |
         (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void put_be32(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>((v >> 24) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>(v & 0xff));
}

// --- PNG ---------------------------------------------------------------------

const unsigned char kPngSig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};

std::vector<uint8_t> zlib_inflate(const std::string& in, std::size_t expect) {
  std::vector<uint8_t> out(expect);
  z_stream zs{};
  if (inflateInit(&zs) != Z_OK) throw DataError("png: inflate init failed");
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(in.data()));
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = inflate(&zs, Z_FINISH);
  inflateEnd(&zs);
  if (rc != Z_STREAM_END || zs.avail_out != 0) {
    throw DataError("png: corrupt or truncated compressed stream");
  }
  return out;
}

std::string zlib_deflate(const std::vector<uint8_t>& in) {
  uLongf bound = compressBound(static_cast<uLong>(in.size()));
  std::string out(bound, '\0');
  if (compress2(reinterpret_cast<Bytef*>(out.data()), &bound, in.data(),
                static_cast<uLong>(in.size()), 6) != Z_OK) {
    throw DataError("png: deflate failed");
  }
  out.resize(bound);
  return out;
}

int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

RawImage decode_png(const std::string& bytes, const std::string& path) {
  if (bytes.size() < 8 + 25 ||
      std::memcmp(bytes.data(), kPngSig, 8) != 0) {
    throw DataError("png: bad signature in " + path);
  }
  std::size_t pos = 8;
  int width = 0, height = 0, bit_depth = 0, color_type = 0;
  std::string idat;
  bool seen_ihdr = false, seen_iend = false;
  while (pos + 8 <= bytes.size()) {
    const uint32_t len = be32(reinterpret_cast<const unsigned char*>(bytes.data() + pos));
    const std::string type = bytes.substr(pos + 4, 4);
    if (pos + 12 + len > bytes.size()) {
      throw DataError("png: truncated chunk in " + path);
    }
    const char* data = bytes.data() + pos + 8;
    if (type == "IHDR") {
      if (len != 13) throw DataError("png: bad IHDR in " + path);
      const auto* p = reinterpret_cast<const unsigned char*>(data);
      width = static_cast<int>(be32(p));
      height = static_cast<int>(be32(p + 4));
      bit_depth = p[8];
      color_type = p[9];
      if (p[10] != 0 || p[11] != 0) throw DataError("png: unsupported compression/filter");
      if (p[12] != 0) throw DataError("png: interlaced files are not supported");
      if (bit_depth != 8 && bit_depth != 16) {
        throw DataError("png: unsupported bit depth " + std::to_string(bit_depth));
      }
      if (color_type != 0 && color_type != 2 && color_type != 4 && color_type != 6) {
        throw DataError("png: unsupported color type " + std::to_string(color_type));
      }
      seen_ihdr = true;
    } else if (type == "IDAT") {
      idat.append(data, len);
    } else if (type == "IEND") {
      seen_iend = true;
      break;
    }
    pos += 12 + len;
  }
  if (!seen_ihdr || !seen_iend) throw DataError("png: truncated file " + path);
  if (width <= 0 || height <= 0) throw DataError("png: zero dimension in " + path);

  const int channels = color_type == 0 ? 1 : color_type == 2 ? 3 : color_type == 4 ? 2 : 4;
  const int bytes_per_sample = bit_depth / 8;
  const std::size_t bpp = static_cast<std::size_t>(channels) * bytes_per_sample;
  const std::size_t row_bytes = bpp * width;
  const std::size_t raw_size = (row_bytes + 1) * height;
  std::vector<uint8_t> raw = zlib_inflate(idat, raw_size);

  // undo per-row filters in place
  std::vector<uint8_t> img(row_bytes * height);
  for (int y = 0; y < height; ++y) {
    const uint8_t filter = raw[y * (row_bytes + 1)];
    const uint8_t* src = raw.data() + y * (row_bytes + 1) + 1;
    uint8_t* dst = img.data() + y * row_bytes;
    const uint8_t* up = y > 0 ? img.data() + (y - 1) * row_bytes : nullptr;
    for (std::size_t x = 0; x < row_bytes; ++x) {
      const int a = x >= bpp ? dst[x - bpp] : 0;
      const int b = up ? up[x] : 0;
      const int c = (up && x >= bpp) ? up[x - bpp] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: throw DataError("png: bad filter byte in " + path);
      }
      dst[x] = static_cast<uint8_t>(v & 0xff);
    }
  }

  RawImage out;
  out.width = width;
  out.height = height;
  out.channels = channels;
  out.maxval = bit_depth == 8 ? 255 : 65535;
  out.samples.resize(static_cast<std::size_t>(width) * height * channels);
  if (bit_depth == 8) {
    for (std::size_t i = 0; i < out.samples.size(); ++i) out.samples[i] = img[i];
  } else {
    for (std::size_t i = 0; i < out.samples.size(); ++i) {
      out.samples[i] = static_cast<uint16_t>((img[2 * i] << 8) | img[2 * i + 1]);
    }
  }
  return out;
}

// --- PNM ---------------------------------------------------------------------

// Reads the next header token, skipping whitespace and '#' comments.
std::string pnm_token(const std::string& b, std::size_t& pos) {
  while (pos < b.size()) {
    if (std::isspace(static_cast<unsigned char>(b[pos]))) {
      ++pos;
    } else if (b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
  std::size_t start = pos;
  while (pos < b.size() && !std::isspace(static_cast<unsigned char>(b[pos]))) ++pos;
  if (start == pos) throw DataError("pnm: truncated header");
  return b.substr(start, pos - start);
}

RawImage decode_pnm(const std::string& bytes, const std::string& path) {
  std::size_t pos = 0;
  const std::string magic = pnm_token(bytes, pos);
  if (magic != "P5" && magic != "P6") {
    throw DataError("pnm: unsupported magic \"" + magic + "\" in " + path);
  }
  RawImage out;
  out.channels = magic == "P5" ? 1 : 3;
  try {
    out.width = std::stoi(pnm_token(bytes, pos));
    out.height = std::stoi(pnm_token(bytes, pos));
    out.maxval = std::stoi(pnm_token(bytes, pos));
  } catch (const std::exception&) {
    throw DataError("pnm: malformed header in " + path);
  }
  if (out.width <= 0 || out.height <= 0) {
    throw DataError("pnm: zero dimension in " + path);
  }
  if (out.maxval <= 0 || out.maxval > 65535) {
    throw DataError("pnm: bad maxval in " + path);
  }
  pos += 1;  // single whitespace after maxval
  const std::size_t count =
      static_cast<std::size_t>(out.width) * out.height * out.channels;
  const int bytes_per = out.maxval > 255 ? 2 : 1;
  if (pos + count * bytes_per > bytes.size()) {
    throw DataError("pnm: truncated pixel data in " + path);
  }
  out.samples.resize(count);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
  if (bytes_per == 1) {
    for (std::size_t i = 0; i < count; ++i) out.samples[i] = p[i];
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      out.samples[i] = static_cast<uint16_t>((p[2 * i] << 8) | p[2 * i + 1]);
    }
  }
  return out;
}

uint8_t to_byte(float v) {
  const float scaled = std::floor(v * 255.0f + 0.5f);  // round half up
  return static_cast<uint8_t>(std::min(255.0f, std::max(0.0f, scaled)));
}

}  // namespace

RawImage decode_image_file(const std::string& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPngSig, 8) == 0) {
    return decode_png(bytes, path);
  }
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6')) {
    return decode_pnm(bytes, path);
  }
  throw DataError("image: unsupported format in " + path +
                  " (PNG or binary PGM/PPM expected)");
}

TensorF load_image(const std::string& path, ImageKind kind) {
  const RawImage raw = decode_image_file(path);
  const float scale = 1.0f / static_cast<float>(raw.maxval);
  const long h = raw.height, w = raw.width;
  const long plane = h * w;
  auto sample = [&](long i, int c) -> float {
    return raw.samples[static_cast<std::size_t>(i) * raw.channels + c] * scale;
  };
  if (kind == ImageKind::rgb) {
    TensorF t({1, 3, h, w});
    for (long i = 0; i < plane; ++i) {
      float r, g, b;
      switch (raw.channels) {
        case 1: r = g = b = sample(i, 0); break;
        case 2: r = g = b = sample(i, 0); break;  // gray+alpha
        default:
          r = sample(i, 0);
          g = sample(i, 1);
          b = sample(i, 2);
      }
      t.data()[i] = r;
      t.data()[plane + i] = g;
      t.data()[2 * plane + i] = b;
    }
    return t;
  }
  TensorF t({1, 1, h, w});
  for (long i = 0; i < plane; ++i) {
    float v;
    switch (raw.channels) {
      case 1:
      case 2: v = sample(i, 0); break;
      default: v = (sample(i, 0) + sample(i, 1) + sample(i, 2)) / 3.0f;
    }
    t.data()[i] = v;
  }
  return t;
}

std::string encode_png(int width, int height, int channels,
                       const std::vector<uint8_t>& interleaved) {
  const std::size_t row_bytes = static_cast<std::size_t>(width) * channels;
  std::vector<uint8_t> raw((row_bytes + 1) * height);
  for (int y = 0; y < height; ++y) {
    raw[y * (row_bytes + 1)] = 0;  // filter: none
    std::memcpy(raw.data() + y * (row_bytes + 1) + 1,
                interleaved.data() + y * row_bytes, row_bytes);
  }
  const std::string compressed = zlib_deflate(raw);

  std::string out(reinterpret_cast<const char*>(kPngSig), 8);
  auto chunk = [&](const char* type, const std::string& data) {
    put_be32(out, static_cast<uint32_t>(data.size()));
    std::string body = std::string(type, 4) + data;
    out += body;
    const uLong crc = crc32(crc32(0L, Z_NULL, 0),
                            reinterpret_cast<const Bytef*>(body.data()),
                            static_cast<uInt>(body.size()));
    put_be32(out, static_cast<uint32_t>(crc));
  };
  std::string ihdr;
  put_be32(ihdr, static_cast<uint32_t>(width));
  put_be32(ihdr, static_cast<uint32_t>(height));
  ihdr.push_back(8);                                // bit depth
  ihdr.push_back(channels == 1 ? 0 : 2);            // gray or rgb
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  chunk("IHDR", ihdr);
  chunk("IDAT", compressed);
  chunk("IEND", "");
  return out;
}

std::string encode_pnm(int width, int height, int channels,
                       const std::vector<uint8_t>& interleaved) {
  std::string out = channels == 1 ? "P5" : "P6";
  out += "\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(interleaved.data()), interleaved.size());
  return out;
}

void save_saliency(const TensorF& map, const std::string& path) {
  const auto& s = map.shape();
  if (s.n != 1 || s.c != 1) {
    throw ShapeError("save_saliency: expects a (1,1,h,w) map, got " + s.str());
  }
  std::vector<uint8_t> px(static_cast<std::size_t>(s.h) * s.w);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = to_byte(map.data()[i]);
  const bool pnm = path.size() >= 4 && path.substr(path.size() - 4) == ".pgm";
  atomic_write_file(path, pnm ? encode_pnm(static_cast<int>(s.w), static_cast<int>(s.h), 1, px)
                              : encode_png(static_cast<int>(s.w), static_cast<int>(s.h), 1, px));
}

void save_rgb8(const TensorF& rgb, const std::string& path) {
  const auto& s = rgb.shape();
  if (s.n != 1 || s.c != 3) {
    throw ShapeError("save_rgb8: expects a (1,3,h,w) image, got " + s.str());
  }
  const long plane = s.h * s.w;
  std::vector<uint8_t> px(static_cast<std::size_t>(plane) * 3);
  for (long i = 0; i < plane; ++i) {
    px[3 * i] = to_byte(rgb.data()[i]);
    px[3 * i + 1] = to_byte(rgb.data()[plane + i]);
    px[3 * i + 2] = to_byte(rgb.data()[2 * plane + i]);
  }
  const bool pnm = path.size() >= 4 && path.substr(path.size() - 4) == ".ppm";
  atomic_write_file(path, pnm ? encode_pnm(static_cast<int>(s.w), static_cast<int>(s.h), 3, px)
                              : encode_png(static_cast<int>(s.w), static_cast<int>(s.h), 3, px));
}

}  // namespace mobilesal
