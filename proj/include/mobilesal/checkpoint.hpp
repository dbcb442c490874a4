#pragma once

#include <string>
#include <vector>

#include "mobilesal/network.hpp"
#include "mobilesal/param_store.hpp"

namespace mobilesal {

// Checkpoint container: magic "MSAL", u32 format version, u64 config
// fingerprint, the serialized config, a text manifest of
// (name, shape, byte offset) per tensor, then raw little-endian f32 payloads.
// Buffers (BN running stats) are included; the IDR branch may be left out.

void save_checkpoint(const ParamStore<float>& store,
                     const MobileSalConfig& cfg, const std::string& path,
                     bool include_idr = true);

struct CheckpointLoadReport {
  std::vector<std::string> missing_idr;  // idr tensors absent from the file
};

// Fills the store in place. The expected config's fingerprint must match the
// file; every non-IDR tensor must be present with its exact shape.
CheckpointLoadReport load_checkpoint(ParamStore<float>& store,
                                     const MobileSalConfig& expected,
                                     const std::string& path);

// Reads just the embedded config (for rebuilding a network from a file).
MobileSalConfig checkpoint_config(const std::string& path);

// Write-to-temp, rename-on-success; no partial file survives a failure.
void atomic_write_file(const std::string& path, const std::string& bytes);

}  // namespace mobilesal
