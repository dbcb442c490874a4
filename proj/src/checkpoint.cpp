#include "mobilesal/checkpoint.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace mobilesal {

namespace {

constexpr char kMagic[4] = {'M', 'S', 'A', 'L'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw DataError("checkpoint: truncated file");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += 4;
  return v;
}

uint64_t get_u64(const std::string& in, std::size_t& pos) {
  if (pos + 8 > in.size()) throw DataError("checkpoint: truncated file");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += 8;
  return v;
}

void put_f32_le(std::string& out, float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

float get_f32_le(const char* p) {
  uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) {
    bits |= static_cast<uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  }
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct ManifestEntry {
  std::string name;
  TensorShape shape;
  std::size_t offset = 0;
};

struct ParsedCheckpoint {
  uint64_t fingerprint = 0;
  std::string config;
  std::vector<ManifestEntry> manifest;
  std::size_t payload_pos = 0;
  std::string bytes;
};

ParsedCheckpoint parse(const std::string& path) {
  ParsedCheckpoint pc;
  pc.bytes = read_file(path);
  const std::string& b = pc.bytes;
  if (b.size() < 4 || std::memcmp(b.data(), kMagic, 4) != 0) {
    throw DataError("checkpoint: bad magic in " + path);
  }
  std::size_t pos = 4;
  const uint32_t version = get_u32(b, pos);
  if (version != kVersion) {
    throw DataError("checkpoint: unsupported format version " +
                    std::to_string(version));
  }
  pc.fingerprint = get_u64(b, pos);
  const uint32_t config_len = get_u32(b, pos);
  if (pos + config_len > b.size()) throw DataError("checkpoint: truncated file");
  pc.config = b.substr(pos, config_len);
  pos += config_len;
  const uint32_t manifest_len = get_u32(b, pos);
  if (pos + manifest_len > b.size()) throw DataError("checkpoint: truncated file");
  std::istringstream mf(b.substr(pos, manifest_len));
  pos += manifest_len;
  pc.payload_pos = pos;
  std::string line;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    long long n, c, h, w, off;
    if (!(ls >> e.name >> n >> c >> h >> w >> off)) {
      throw DataError("checkpoint: malformed manifest line: " + line);
    }
    e.shape = {n, c, h, w};
    e.offset = static_cast<std::size_t>(off);
    pc.manifest.push_back(std::move(e));
  }
  return pc;
}

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

void atomic_write_file(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw DataError("short write to " + tmp);
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw DataError("cannot rename " + tmp + " to " + path);
  }
}

void save_checkpoint(const ParamStore<float>& store, const MobileSalConfig& cfg,
                     const std::string& path, bool include_idr) {
  std::string manifest;
  std::string payload;
  for (const auto& e : store.entries()) {
    if (!include_idr && e.name.rfind("idr.", 0) == 0) continue;
    char line[160];
    std::snprintf(line, sizeof(line), "%s %lld %lld %lld %lld %zu\n",
                  e.name.c_str(), static_cast<long long>(e.tensor.shape().n),
                  static_cast<long long>(e.tensor.shape().c),
                  static_cast<long long>(e.tensor.shape().h),
                  static_cast<long long>(e.tensor.shape().w), payload.size());
    manifest += line;
    payload.reserve(payload.size() + 4 * e.tensor.size());
    for (Eigen::Index i = 0; i < e.tensor.size(); ++i) {
      put_f32_le(payload, e.tensor.data()[i]);
    }
  }
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  put_u64(out, cfg.fingerprint());
  const std::string config = cfg.canonical();
  put_u32(out, static_cast<uint32_t>(config.size()));
  out += config;
  put_u32(out, static_cast<uint32_t>(manifest.size()));
  out += manifest;
  out += payload;
  atomic_write_file(path, out);
}

CheckpointLoadReport load_checkpoint(ParamStore<float>& store,
                                     const MobileSalConfig& expected,
                                     const std::string& path) {
  ParsedCheckpoint pc = parse(path);
  if (fnv1a(pc.config) != pc.fingerprint) {
    throw DataError("checkpoint: fingerprint does not match embedded config (corrupt file)");
  }
  if (expected.fingerprint() != pc.fingerprint) {
    throw DataError("checkpoint: config fingerprint mismatch; file built for \"" +
                    pc.config + "\", expected \"" + expected.canonical() + "\"");
  }
  std::vector<bool> filled(store.entries().size(), false);
  for (const auto& me : pc.manifest) {
    if (!store.contains(me.name)) {
      throw DataError("checkpoint: unknown tensor in file: " + me.name);
    }
    auto& t = store.at(me.name);
    if (!(t.shape() == me.shape)) {
      throw DataError("checkpoint: shape mismatch for " + me.name + ": file " +
                      me.shape.str() + " vs model " + t.shape().str());
    }
    const std::size_t need = pc.payload_pos + me.offset + 4 * t.size();
    if (need > pc.bytes.size()) throw DataError("checkpoint: truncated file");
    const char* p = pc.bytes.data() + pc.payload_pos + me.offset;
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      t.data()[i] = get_f32_le(p + 4 * i);
    }
  }
  CheckpointLoadReport report;
  for (const auto& e : store.entries()) {
    const bool in_file = std::any_of(
        pc.manifest.begin(), pc.manifest.end(),
        [&](const ManifestEntry& me) { return me.name == e.name; });
    if (in_file) continue;
    if (e.name.rfind("idr.", 0) == 0) {
      report.missing_idr.push_back(e.name);
    } else {
      throw DataError("checkpoint: tensor missing from file: " + e.name);
    }
  }
  return report;
}

MobileSalConfig checkpoint_config(const std::string& path) {
  ParsedCheckpoint pc = parse(path);
  if (fnv1a(pc.config) != pc.fingerprint) {
    throw DataError("checkpoint: fingerprint does not match embedded config (corrupt file)");
  }
  MobileSalConfig cfg;
  int ii = 0;
  const int n = std::sscanf(
      pc.config.c_str(), "msal-v1;in=%dx%d;wm=%lf;md=%d;mc=%d;mi=%d;dil=%d,%d,%d;ii=%d",
      &cfg.input_h, &cfg.input_w, &cfg.width_mult, &cfg.m_depth, &cfg.m_cpr,
      &cfg.m_idr, &cfg.cpr_dilations[0], &cfg.cpr_dilations[1],
      &cfg.cpr_dilations[2], &ii);
  if (n != 10) {
    throw DataError("checkpoint: unparseable embedded config: " + pc.config);
  }
  cfg.include_idr_at_inference = ii != 0;
  if (cfg.fingerprint() != pc.fingerprint) {
    throw DataError("checkpoint: embedded config does not round-trip");
  }
  return cfg;
}

}  // namespace mobilesal
