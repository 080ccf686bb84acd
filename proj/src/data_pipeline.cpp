#include "msgdn/data_pipeline.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

#include "msgdn/common.hpp"
#include "msgdn/image_io.hpp"

namespace fs = std::filesystem;

namespace msgdn {

namespace {

double clip01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

}  // namespace

Tensor4 rgb_to_yuv444(const Tensor4& image) {
  if (image.c != 3) throw ShapeError("rgb_to_yuv444: expected 3 channels");
  Tensor4 out(image.n, 3, image.h, image.w);
  const int plane = image.h * image.w;
  for (int ni = 0; ni < image.n; ++ni) {
    const double* r = image.plane(ni, 0);
    const double* g = image.plane(ni, 1);
    const double* b = image.plane(ni, 2);
    double* y = out.plane(ni, 0);
    double* u = out.plane(ni, 1);
    double* v = out.plane(ni, 2);
    for (int i = 0; i < plane; ++i) {
      const double yy = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
      y[i] = clip01(yy);
      u[i] = clip01((b[i] - yy) / 1.772 + 0.5);
      v[i] = clip01((r[i] - yy) / 1.402 + 0.5);
    }
  }
  return out;
}

Tensor4 yuv444_to_rgb(const Tensor4& image) {
  if (image.c != 3) throw ShapeError("yuv444_to_rgb: expected 3 channels");
  Tensor4 out(image.n, 3, image.h, image.w);
  const int plane = image.h * image.w;
  for (int ni = 0; ni < image.n; ++ni) {
    const double* y = image.plane(ni, 0);
    const double* u = image.plane(ni, 1);
    const double* v = image.plane(ni, 2);
    double* r = out.plane(ni, 0);
    double* g = out.plane(ni, 1);
    double* b = out.plane(ni, 2);
    for (int i = 0; i < plane; ++i) {
      const double cb = u[i] - 0.5;
      const double cr = v[i] - 0.5;
      r[i] = clip01(y[i] + 1.402 * cr);
      g[i] = clip01(y[i] - (0.114 * 1.772 / 0.587) * cb - (0.299 * 1.402 / 0.587) * cr);
      b[i] = clip01(y[i] + 1.772 * cb);
    }
  }
  return out;
}

void write_yuv444(const std::string& path, const Tensor4& yuv) {
  if (yuv.n != 1 || yuv.c != 3) throw ShapeError("write_yuv444: expected (1,3,H,W)");
  const auto bytes = to_bytes_planar(yuv);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("write_yuv444: cannot open " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write_yuv444: write failed: " + path);
}

Tensor4 read_yuv444(const std::string& path, int width, int height) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_yuv444: cannot open " + path);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(3) * width * height);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
    throw IoError("read_yuv444: short read from " + path);
  return from_bytes_planar(bytes, 3, height, width);
}

void CodecSpec::validate() const {
  auto require = [](const std::string& tmpl, const char* placeholder, const char* which) {
    if (tmpl.find(placeholder) == std::string::npos)
      throw ConfigError(std::string("CodecSpec: ") + which + " template missing " + placeholder);
  };
  require(encode_template, "{input}", "encode");
  require(encode_template, "{output}", "encode");
  require(encode_template, "{qp}", "encode");
  require(decode_template, "{input}", "decode");
  require(decode_template, "{output}", "decode");
  if (name.empty()) throw ConfigError("CodecSpec: name must be set");
}

CodecSpec CodecSpec::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("CodecSpec: cannot open " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw IoError("CodecSpec: malformed JSON in " + path);
  CodecSpec c;
  c.name = j.value("name", "");
  c.encode_template = j.value("encode", "");
  c.decode_template = j.value("decode", "");
  c.validate();
  return c;
}

void CodecSpec::to_json_file(const std::string& path) const {
  nlohmann::json j;
  j["name"] = name;
  j["encode"] = encode_template;
  j["decode"] = decode_template;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("CodecSpec: cannot open " + path);
  out << j.dump(2) << "\n";
}

namespace {

std::string expand_template(std::string tmpl, const std::string& input, const std::string& output,
                            int qp, int width, int height) {
  auto replace_all = [&tmpl](const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    while ((pos = tmpl.find(key, pos)) != std::string::npos) {
      tmpl.replace(pos, key.size(), value);
      pos += value.size();
    }
  };
  replace_all("{input}", input);
  replace_all("{output}", output);
  replace_all("{qp}", std::to_string(qp));
  replace_all("{width}", std::to_string(width));
  replace_all("{height}", std::to_string(height));
  return tmpl;
}

void run_command(const std::string& cmd, const std::string& log_path, const char* stage) {
  const std::string full = cmd + " > " + log_path + " 2>&1";
  const int rc = std::system(full.c_str());
  if (rc != 0) {
    std::string output;
    std::ifstream log(log_path);
    if (log) {
      std::string line;
      while (std::getline(log, line) && output.size() < 4000) output += line + "\n";
    }
    throw IoError(std::string(stage) + " command failed (exit " + std::to_string(rc) + "): " + cmd +
                  "\n--- captured output ---\n" + output);
  }
}

}  // namespace

EncodeDecodeResult encode_decode(const Tensor4& image, int qp, const CodecSpec& codec,
                                 const std::string& workdir) {
  codec.validate();
  if (image.n != 1 || image.c != 3) throw ShapeError("encode_decode: expected (1,3,H,W)");
  fs::create_directories(workdir);
  const std::string in_yuv = (fs::path(workdir) / "in.yuv").string();
  const std::string bitstream = (fs::path(workdir) / "stream.bin").string();
  const std::string out_yuv = (fs::path(workdir) / "out.yuv").string();
  const std::string log = (fs::path(workdir) / "codec.log").string();

  write_yuv444(in_yuv, rgb_to_yuv444(image));
  run_command(expand_template(codec.encode_template, in_yuv, bitstream, qp, image.w, image.h), log,
              "encode");
  if (!fs::exists(bitstream)) throw IoError("encode_decode: encoder produced no bitstream");
  const std::int64_t bits = static_cast<std::int64_t>(fs::file_size(bitstream)) * 8;

  run_command(expand_template(codec.decode_template, bitstream, out_yuv, qp, image.w, image.h), log,
              "decode");
  if (!fs::exists(out_yuv)) throw IoError("encode_decode: decoder produced no output");
  Tensor4 decoded_yuv = read_yuv444(out_yuv, image.w, image.h);
  return {yuv444_to_rgb(decoded_yuv), bits};
}

void DatasetManifest::validate() const {
  std::set<std::pair<std::string, int>> seen;
  for (const auto& p : pairs) {
    if (!seen.emplace(p.original_path, p.qp).second)
      throw ConfigError("manifest: duplicate entry for (" + p.original_path + ", qp " +
                        std::to_string(p.qp) + ")");
    if (p.bits <= 0) throw ConfigError("manifest: non-positive bit count for " + p.original_path);
    if (p.width < 1 || p.height < 1) throw ConfigError("manifest: bad dimensions");
  }
}

void DatasetManifest::save(const std::string& path) const {
  validate();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("manifest: cannot open " + path);
  out << "msgdn-manifest v1\n";
  nlohmann::json header;
  header["colorspace"] = colorspace;
  header["codec"] = codec_identity;
  out << header.dump() << "\n";
  for (const auto& p : pairs) {
    nlohmann::json j;
    j["original"] = p.original_path;
    j["compressed"] = p.compressed_path;
    j["qp"] = p.qp;
    j["bits"] = p.bits;
    j["width"] = p.width;
    j["height"] = p.height;
    out << j.dump() << "\n";
  }
  if (!out) throw IoError("manifest: write failed: " + path);
}

DatasetManifest DatasetManifest::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("manifest: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "msgdn-manifest v1")
    throw IoError("manifest: bad or missing version line in " + path);
  if (!std::getline(in, line)) throw IoError("manifest: missing header in " + path);
  nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded()) throw IoError("manifest: malformed header in " + path);

  DatasetManifest m;
  m.colorspace = header.value("colorspace", "");
  m.codec_identity = header.value("codec", "");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw IoError("manifest: malformed record in " + path);
    ImagePair p;
    p.original_path = j.value("original", "");
    p.compressed_path = j.value("compressed", "");
    p.qp = j.value("qp", 0);
    p.bits = j.value("bits", static_cast<std::int64_t>(0));
    p.width = j.value("width", 0);
    p.height = j.value("height", 0);
    m.pairs.push_back(std::move(p));
  }
  m.validate();
  return m;
}

std::string resolve_path(const std::string& manifest_dir, const std::string& relative) {
  fs::path p(relative);
  if (p.is_absolute()) return relative;
  return (fs::path(manifest_dir) / p).lexically_normal().string();
}

DatasetManifest build_manifest(const std::string& image_dir, const std::set<int>& qps,
                               const CodecSpec& codec, const std::string& manifest_path,
                               BuildReport* report) {
  codec.validate();
  if (qps.empty()) throw ConfigError("build_manifest: empty QP set");
  const fs::path manifest_dir = fs::absolute(fs::path(manifest_path)).parent_path();
  const fs::path decoded_dir = manifest_dir / "decoded";
  fs::create_directories(decoded_dir);

  std::vector<fs::path> images;
  for (const auto& entry : fs::directory_iterator(image_dir)) {
    if (!entry.is_regular_file()) continue;
    if (entry.path().extension() == ".png") images.push_back(entry.path());
  }
  std::sort(images.begin(), images.end());
  if (images.empty()) throw ConfigError("build_manifest: no .png images in " + image_dir);

  // Reuse pairs from an existing manifest when files are still present.
  std::map<std::pair<std::string, int>, ImagePair> cache;
  if (fs::exists(manifest_path)) {
    try {
      DatasetManifest existing = DatasetManifest::load(manifest_path);
      if (existing.codec_identity == codec.name) {
        for (auto& p : existing.pairs) {
          if (fs::exists(resolve_path(manifest_dir.string(), p.compressed_path)))
            cache.emplace(std::make_pair(p.original_path, p.qp), p);
        }
      }
    } catch (const Error&) {
      // unusable previous manifest; rebuild from scratch
    }
  }

  BuildReport local_report;
  DatasetManifest m;
  m.codec_identity = codec.name;
  for (const auto& img_path : images) {
    const fs::path abs_img = fs::absolute(img_path).lexically_normal();
    const fs::path rel = abs_img.lexically_relative(manifest_dir);
    const std::string rel_original = rel.empty() ? abs_img.string() : rel.string();
    for (int qp : qps) {
      const auto key = std::make_pair(rel_original, qp);
      if (auto it = cache.find(key); it != cache.end()) {
        m.pairs.push_back(it->second);
        ++local_report.pairs_reused;
        continue;
      }
      try {
        Tensor4 image = read_png(img_path.string());
        const std::string workdir =
            (manifest_dir / "work" / (img_path.stem().string() + "_qp" + std::to_string(qp)))
                .string();
        EncodeDecodeResult result = encode_decode(image, qp, codec, workdir);
        const std::string decoded_name = img_path.stem().string() + "_qp" + std::to_string(qp) + ".png";
        write_png((decoded_dir / decoded_name).string(), result.decoded);

        ImagePair p;
        p.original_path = rel_original;
        p.compressed_path = (fs::path("decoded") / decoded_name).string();
        p.qp = qp;
        p.bits = result.bits;
        p.width = image.w;
        p.height = image.h;
        m.pairs.push_back(std::move(p));
        ++local_report.pairs_built;
      } catch (const Error& e) {
        ++local_report.failures;
        local_report.failure_messages.push_back(img_path.string() + " qp " + std::to_string(qp) +
                                                ": " + e.what());
      }
    }
  }
  if (m.pairs.empty())
    throw IoError("build_manifest: zero successful pairs (" +
                  std::to_string(local_report.failures) + " failures)");
  m.save(manifest_path);
  if (report != nullptr) *report = local_report;
  return m;
}

std::pair<int, int> sample_window(int height, int width, int patch, Rng& rng) {
  if (patch > height || patch > width)
    throw ConfigError("sample_patch: patch " + std::to_string(patch) + " exceeds image " +
                      std::to_string(width) + "x" + std::to_string(height));
  const int y0 = height == patch ? 0 : static_cast<int>(rng.below(static_cast<std::uint64_t>(height - patch + 1)));
  const int x0 = width == patch ? 0 : static_cast<int>(rng.below(static_cast<std::uint64_t>(width - patch + 1)));
  return {y0, x0};
}

PatchPair sample_patch(const ImagePair& pair, const std::string& manifest_dir, int patch,
                       std::uint64_t rng_seed) {
  Tensor4 original = read_png(resolve_path(manifest_dir, pair.original_path));
  Tensor4 compressed = read_png(resolve_path(manifest_dir, pair.compressed_path));
  if (original.h != compressed.h || original.w != compressed.w)
    throw ShapeError("sample_patch: pair images differ in size");

  Rng rng(rng_seed);
  const auto [y0, x0] = sample_window(original.h, original.w, patch, rng);
  PatchPair out;
  out.y0 = y0;
  out.x0 = x0;
  out.original = Tensor4(1, 3, patch, patch);
  out.compressed = Tensor4(1, 3, patch, patch);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < patch; ++y) {
      for (int x = 0; x < patch; ++x) {
        out.original.at(0, c, y, x) = original.at(0, c, y0 + y, x0 + x);
        out.compressed.at(0, c, y, x) = compressed.at(0, c, y0 + y, x0 + x);
      }
    }
  }
  return out;
}

}  // namespace msgdn
