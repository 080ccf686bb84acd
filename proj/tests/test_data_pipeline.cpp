#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "msgdn/common.hpp"
#include "msgdn/data_pipeline.hpp"
#include "msgdn/image_io.hpp"
#include "msgdn/losses.hpp"
#include "test_support.hpp"

using namespace msgdn;
namespace fs = std::filesystem;

namespace {

CodecSpec stub_codec(const std::string& mode = "identity") {
  CodecSpec c;
  c.name = std::string("stub-") + mode;
  c.encode_template = std::string(STUB_CODEC_PATH) +
                      " encode --input {input} --output {output} --qp {qp} --width {width}"
                      " --height {height} --mode " + mode;
  c.decode_template =
      std::string(STUB_CODEC_PATH) + " decode --input {input} --output {output}";
  return c;
}

Tensor4 textured_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor4 img(1, 3, h, w);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double gradient = (0.3 + 0.4 * y / h + 0.2 * x / w) * (c + 1) / 3.0;
        const double texture = 0.15 * std::sin(0.7 * x + 1.3 * y + c) + 0.08 * rng.uniform();
        img.at(0, c, y, x) = std::clamp(gradient + texture, 0.0, 1.0);
      }
    }
  }
  return img;
}

}  // namespace

TEST_CASE("colorspace: pure white maps to Y=1, offset-binary chroma at 0.5") {
  Tensor4 white = Tensor4::full(1, 3, 2, 2, 1.0);
  Tensor4 yuv = rgb_to_yuv444(white);
  CHECK(yuv.at(0, 0, 0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(yuv.at(0, 1, 0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(yuv.at(0, 2, 0, 0) == doctest::Approx(0.5).epsilon(1e-12));

  Tensor4 black = Tensor4::zeros(1, 3, 1, 1);
  Tensor4 yuv_black = rgb_to_yuv444(black);
  CHECK(yuv_black.data[0] == doctest::Approx(0.0));
  CHECK(yuv_black.data[1] == doctest::Approx(0.5));
  CHECK(yuv_black.data[2] == doctest::Approx(0.5));

  CHECK_THROWS_AS(rgb_to_yuv444(Tensor4::zeros(1, 1, 2, 2)), ShapeError);
}

TEST_CASE("colorspace: float round trip is exact to 1e-6") {
  Rng rng(3);
  double max_err = 0.0;
  for (int trial = 0; trial < 8; ++trial) {
    Tensor4 img = Tensor4::uniform(1, 3, 16, 16, rng);
    Tensor4 back = yuv444_to_rgb(rgb_to_yuv444(img));
    for (std::size_t i = 0; i < img.size(); ++i) {
      max_err = std::max(max_err, std::abs(img.data[i] - back.data[i]));
    }
  }
  CHECK(max_err < 1e-6);
}

TEST_CASE("colorspace: 8-bit quantized round trip stays within 2/255") {
  Rng rng(5);
  double max_err = 0.0;
  for (int trial = 0; trial < 100000; ++trial) {
    Tensor4 rgb(1, 3, 1, 1);
    for (auto& v : rgb.data) v = static_cast<double>(rng.below(256)) / 255.0;
    Tensor4 yuv8 = quantize8(rgb_to_yuv444(rgb));
    Tensor4 back = quantize8(yuv444_to_rgb(yuv8));
    for (int c = 0; c < 3; ++c) max_err = std::max(max_err, std::abs(back.data[c] - rgb.data[c]));
  }
  CHECK(max_err <= 2.0 / 255.0 + 1e-12);
}

TEST_CASE("yuv444 planar file round trip") {
  const std::string dir = testing::temp_dir("pipeline_yuv");
  Rng rng(7);
  Tensor4 img = quantize8(Tensor4::uniform(1, 3, 9, 13, rng));
  write_yuv444(dir + "/img.yuv", img);
  CHECK(fs::file_size(dir + "/img.yuv") == 3u * 9u * 13u);
  Tensor4 back = read_yuv444(dir + "/img.yuv", 13, 9);
  CHECK(back == img);
}

TEST_CASE("codec spec validation requires every placeholder") {
  CodecSpec c = stub_codec();
  CHECK_NOTHROW(c.validate());
  CodecSpec missing_qp = c;
  missing_qp.encode_template = "encoder {input} {output}";
  CHECK_THROWS_AS(missing_qp.validate(), ConfigError);
  CodecSpec missing_out = c;
  missing_out.decode_template = "decoder {input}";
  CHECK_THROWS_AS(missing_out.validate(), ConfigError);

  const std::string dir = testing::temp_dir("pipeline_codecjson");
  c.to_json_file(dir + "/codec.json");
  CodecSpec loaded = CodecSpec::from_json_file(dir + "/codec.json");
  CHECK(loaded.name == c.name);
  CHECK(loaded.encode_template == c.encode_template);
}

TEST_CASE("encode_decode with the identity stub: decoded equals the yuv round trip") {
  const std::string dir = testing::temp_dir("pipeline_encdec");
  Tensor4 img = textured_image(24, 20, 11);
  EncodeDecodeResult result = encode_decode(img, 37, stub_codec(), dir);

  CHECK(result.decoded.h == 24);
  CHECK(result.decoded.w == 20);
  // stub contract: decoded == yuv-roundtripped input (8-bit planar transport)
  Tensor4 expected = yuv444_to_rgb(quantize8(rgb_to_yuv444(img)));
  CHECK(result.decoded == expected);
  // bits == 8 * bitstream size
  CHECK(result.bits == static_cast<std::int64_t>(fs::file_size(dir + "/stream.bin")) * 8);
  CHECK(result.bits > 0);

  // pair alignment: per-pixel error bounded by the yuv quantization bound
  double max_err = 0.0;
  Tensor4 q = quantize8(img);
  Tensor4 dq = quantize8(result.decoded);
  for (std::size_t i = 0; i < q.size(); ++i)
    max_err = std::max(max_err, std::abs(q.data[i] - dq.data[i]));
  CHECK(max_err <= 2.0 / 255.0 + 1e-12);
}

TEST_CASE("encode_decode: deterministic bits across runs, bpp arithmetic") {
  const std::string dir = testing::temp_dir("pipeline_det");
  Tensor4 img = textured_image(40, 32, 13);
  EncodeDecodeResult first = encode_decode(img, 38, stub_codec(), dir + "/a");
  EncodeDecodeResult second = encode_decode(img, 38, stub_codec(), dir + "/b");
  CHECK(first.bits == second.bits);
  CHECK(first.decoded == second.decoded);

  // documented arithmetic: 450 bytes on 120x200 -> bits 3600, bpp 0.15
  ImagePair pair;
  pair.bits = 450 * 8;
  pair.width = 120;
  pair.height = 200;
  CHECK(pair.bits == 3600);
  CHECK(pair.bpp() == doctest::Approx(0.15).epsilon(1e-12));
}

TEST_CASE("encode_decode: lossy stub mode degrades with qp and changes rate") {
  const std::string dir = testing::temp_dir("pipeline_lossy");
  Tensor4 img = textured_image(32, 32, 17);
  EncodeDecodeResult q37 = encode_decode(img, 37, stub_codec("lossy"), dir + "/q37");
  EncodeDecodeResult q45 = encode_decode(img, 45, stub_codec("lossy"), dir + "/q45");
  const double mse37 = mse_loss(img, q37.decoded);
  const double mse45 = mse_loss(img, q45.decoded);
  CHECK(mse45 > mse37);
  CHECK(q45.bits < q37.bits);
}

TEST_CASE("encode_decode: failing codec carries captured output") {
  const std::string dir = testing::temp_dir("pipeline_fail");
  CodecSpec broken;
  broken.name = "broken";
  broken.encode_template = "false {input} {output} {qp}";
  broken.decode_template = "false {input} {output}";
  Tensor4 img = textured_image(8, 8, 19);
  CHECK_THROWS_AS(encode_decode(img, 37, broken, dir), IoError);
}

TEST_CASE("build_manifest: cardinality, skip accounting, idempotence") {
  const std::string dir = testing::temp_dir("pipeline_manifest");
  fs::create_directories(dir + "/images");
  for (int i = 0; i < 5; ++i) {
    write_png(dir + "/images/img" + std::to_string(i) + ".png", textured_image(24, 24, 100 + i));
  }
  const std::string manifest_path = dir + "/out/manifest.jsonl";
  fs::create_directories(dir + "/out");

  BuildReport report;
  DatasetManifest m = build_manifest(dir + "/images", {37, 38, 39}, stub_codec(), manifest_path, &report);
  CHECK(m.pairs.size() == 15);  // 5 images x 3 QPs
  CHECK(report.pairs_built == 15);
  CHECK(report.failures == 0);

  // reload: identity round trip, down to the bytes
  DatasetManifest loaded = DatasetManifest::load(manifest_path);
  CHECK(loaded.pairs.size() == 15);
  CHECK(loaded.colorspace == DatasetManifest::kColorspace);
  CHECK(loaded.codec_identity == "stub-identity");
  loaded.save(dir + "/resaved.jsonl");
  CHECK(testing::read_text(dir + "/resaved.jsonl") == testing::read_text(manifest_path));

  // re-run: everything reused
  BuildReport second;
  build_manifest(dir + "/images", {37, 38, 39}, stub_codec(), manifest_path, &second);
  CHECK(second.pairs_built == 0);
  CHECK(second.pairs_reused == 15);

  // one unreadable file: (5-1)x3 pairs plus 3 recorded failures on a rebuild
  std::ofstream(dir + "/images/img0.png", std::ios::trunc) << "not a png";
  fs::remove_all(dir + "/out");
  fs::create_directories(dir + "/out");
  BuildReport third;
  DatasetManifest skipped = build_manifest(dir + "/images", {37, 38, 39}, stub_codec(),
                                           manifest_path, &third);
  CHECK(skipped.pairs.size() == 12);
  CHECK(third.failures == 3);
  CHECK(third.failure_messages.size() == 3);
}

TEST_CASE("build_manifest: zero successful pairs is fatal") {
  const std::string dir = testing::temp_dir("pipeline_manifest_fatal");
  fs::create_directories(dir + "/images");
  std::ofstream(dir + "/images/broken.png") << "nope";
  CHECK_THROWS_AS(
      build_manifest(dir + "/images", {37}, stub_codec(), dir + "/manifest.jsonl", nullptr),
      IoError);
}

TEST_CASE("manifest rejects duplicate (original, qp) entries") {
  DatasetManifest m;
  ImagePair p;
  p.original_path = "a.png";
  p.compressed_path = "b.png";
  p.qp = 37;
  p.bits = 100;
  p.width = 4;
  p.height = 4;
  m.pairs.push_back(p);
  m.pairs.push_back(p);
  CHECK_THROWS_AS(m.validate(), ConfigError);
}

TEST_CASE("sample_patch: seeded reproducibility and window contract") {
  const std::string dir = testing::temp_dir("pipeline_patch");
  Tensor4 original = textured_image(40, 30, 23);
  Tensor4 compressed = textured_image(40, 30, 29);
  write_png(dir + "/orig.png", original);
  write_png(dir + "/comp.png", compressed);

  ImagePair pair;
  pair.original_path = "orig.png";
  pair.compressed_path = "comp.png";
  pair.width = 30;
  pair.height = 40;
  pair.qp = 37;
  pair.bits = 1;

  PatchPair a = sample_patch(pair, dir, 16, 42);
  PatchPair b = sample_patch(pair, dir, 16, 42);
  CHECK(a.y0 == b.y0);
  CHECK(a.x0 == b.x0);
  CHECK(a.original == b.original);
  CHECK(a.compressed == b.compressed);
  CHECK(a.original.h == 16);
  CHECK(a.original.w == 16);

  // crop content equals direct indexing of the source at the recorded window
  Tensor4 disk_original = read_png(dir + "/orig.png");
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 16; ++x) {
        CHECK(a.original.at(0, c, y, x) == disk_original.at(0, c, a.y0 + y, a.x0 + x));
      }
    }
  }

  CHECK_THROWS_AS(sample_patch(pair, dir, 64, 1), ConfigError);
}

TEST_CASE("png io: write/read round trip on the 8-bit grid") {
  const std::string dir = testing::temp_dir("pipeline_png");
  Rng rng(31);
  Tensor4 img = quantize8(Tensor4::uniform(1, 3, 21, 17, rng));
  write_png(dir + "/x.png", img);
  Tensor4 back = read_png(dir + "/x.png");
  CHECK(back == img);
  CHECK_THROWS_AS(read_png(dir + "/missing.png"), IoError);
}

TEST_CASE("bpp is invariant to colorspace handling") {
  ImagePair p;
  p.bits = 7200;
  p.width = 120;
  p.height = 200;
  const double before = p.bpp();
  // colorspace transforms act on pixels, not on the coded bit count
  Tensor4 img = textured_image(8, 8, 37);
  rgb_to_yuv444(img);
  CHECK(p.bpp() == before);
}
