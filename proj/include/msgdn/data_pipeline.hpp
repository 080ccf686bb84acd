#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "msgdn/rng.hpp"
#include "msgdn/tensor.hpp"

namespace msgdn {

// BT.601 full-range RGB <-> YUV444 on [0,1] images (chroma offset-binary
// around 0.5). Outputs are clipped to [0,1]; before clipping the transforms
// are exact inverses.
Tensor4 rgb_to_yuv444(const Tensor4& image);
Tensor4 yuv444_to_rgb(const Tensor4& image);

// Planar 8-bit YUV444 files: Y plane, then U, then V, row-major.
void write_yuv444(const std::string& path, const Tensor4& yuv);
Tensor4 read_yuv444(const std::string& path, int width, int height);

// External codec invoked through command templates. encode must reference
// {input} {output} {qp}; decode must reference {input} {output}; {width} and
// {height} are available to both.
struct CodecSpec {
  std::string name;
  std::string encode_template;
  std::string decode_template;

  void validate() const;
  static CodecSpec from_json_file(const std::string& path);
  void to_json_file(const std::string& path) const;
};

struct EncodeDecodeResult {
  Tensor4 decoded;     // RGB in [0,1], same dims as input
  std::int64_t bits;   // 8 * coded file size
};

// RGB -> YUV444 file -> encode -> decode -> YUV444 -> RGB round trip through
// the external codec. Intermediate files live under workdir.
EncodeDecodeResult encode_decode(const Tensor4& image, int qp, const CodecSpec& codec,
                                 const std::string& workdir);

struct ImagePair {
  std::string original_path;    // relative to the manifest directory
  std::string compressed_path;  // relative to the manifest directory
  int qp = 0;
  std::int64_t bits = 0;
  int width = 0;
  int height = 0;

  double bpp() const { return static_cast<double>(bits) / (static_cast<double>(width) * height); }
};

struct DatasetManifest {
  static constexpr const char* kColorspace = "bt601-full";

  std::vector<ImagePair> pairs;
  std::string colorspace = kColorspace;
  std::string codec_identity;

  // Line-delimited: "msgdn-manifest v1", a JSON header line, then one JSON
  // record per pair. Paths are stored relative to the manifest location.
  void save(const std::string& path) const;
  static DatasetManifest load(const std::string& path);

  void validate() const;  // rejects duplicate (original, qp) entries
};

struct BuildReport {
  int pairs_built = 0;
  int pairs_reused = 0;
  int failures = 0;
  std::vector<std::string> failure_messages;
};

// One pair per (image, qp). Decoded images land in <manifest dir>/decoded/.
// Individual failures are skipped and counted; zero successful pairs is
// fatal. Re-running with an existing manifest reuses pairs whose files are
// still present.
DatasetManifest build_manifest(const std::string& image_dir, const std::set<int>& qps,
                               const CodecSpec& codec, const std::string& manifest_path,
                               BuildReport* report = nullptr);

// Identical crop window applied to both images of a pair; deterministic for
// a given seed.
struct PatchPair {
  Tensor4 original;
  Tensor4 compressed;
  int y0 = 0;
  int x0 = 0;
};
PatchPair sample_patch(const ImagePair& pair, const std::string& manifest_dir, int patch,
                       std::uint64_t rng_seed);

// Window chooser shared by sample_patch and the trainer's cached path.
std::pair<int, int> sample_window(int height, int width, int patch, Rng& rng);

// Resolves a manifest-relative path against the manifest directory.
std::string resolve_path(const std::string& manifest_dir, const std::string& relative);

}  // namespace msgdn
