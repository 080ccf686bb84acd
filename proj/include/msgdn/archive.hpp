#pragma once

#include <map>
#include <string>

#include <json.hpp>

#include "msgdn/tensor.hpp"

namespace msgdn {

// Binary named-tensor container used for generator/discriminator checkpoints
// and feature-extractor weights.
//
// Layout: 8-byte magic "MSGTNSR1", u32 little-endian header length, UTF-8 JSON
// header, then all tensor payloads as raw little-endian doubles in header
// order. Entries are sorted by name so identical contents produce identical
// files.
struct Archive {
  std::string kind;          // "generator" | "discriminator" | "extractor" | "checkpoint"
  std::string meta_json;     // kind-specific metadata, canonical JSON text
  std::map<std::string, Tensor4> tensors;

  void save(const std::string& path) const;
  static Archive load(const std::string& path);

  nlohmann::json meta() const;
  void set_meta(const nlohmann::json& j);
};

// FNV-1a over a canonical string; used for config fingerprints.
std::uint64_t fnv1a64(const std::string& s);

}  // namespace msgdn
