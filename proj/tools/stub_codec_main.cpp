// Stand-in still-image codec for tests and desk-scale runs. It speaks the
// same command-template contract as an external encoder/decoder pair:
//
//   identity mode: bitstream = zlib(raw input bytes); decode restores them
//                  exactly, so distortion comes only from the YUV round trip.
//   lossy mode:    planes are uniformly quantized with a QP-driven step
//                  before compression, giving QP-dependent rate/distortion.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <zlib.h>

#include <CLI11.hpp>

namespace {

constexpr char kMagic[4] = {'M', 'S', 'T', 'B'};

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<std::uint8_t> deflate_bytes(const std::vector<std::uint8_t>& raw) {
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> out(bound);
  if (compress2(out.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("zlib compress failed");
  out.resize(bound);
  return out;
}

std::vector<std::uint8_t> inflate_bytes(const std::vector<std::uint8_t>& packed,
                                        std::uint64_t raw_size) {
  std::vector<std::uint8_t> out(raw_size);
  uLongf size = static_cast<uLongf>(raw_size);
  if (uncompress(out.data(), &size, packed.data(), static_cast<uLong>(packed.size())) != Z_OK ||
      size != raw_size)
    throw std::runtime_error("zlib uncompress failed");
  return out;
}

// H.265-style QP-to-step mapping, scaled for direct 8-bit sample values.
double quant_step(int qp) { return std::pow(2.0, (qp - 4) / 6.0) / 8.0; }

void quantize_planes(std::vector<std::uint8_t>& bytes, int qp) {
  const double step = quant_step(qp);
  if (step <= 1.0) return;
  for (auto& b : bytes) {
    const double q = std::nearbyint(b / step) * step;
    b = static_cast<std::uint8_t>(q < 0.0 ? 0.0 : (q > 255.0 ? 255.0 : q));
  }
}

void put_u32(std::vector<std::uint8_t>& v, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) v.push_back(static_cast<std::uint8_t>(x >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& v, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) v.push_back(static_cast<std::uint8_t>(x >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t x = 0;
  for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return x;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"msgdn-stub-codec: zlib-backed stand-in for an external still-image codec"};
  app.require_subcommand(1);

  std::string input, output, mode = "identity";
  int qp = 0, width = 0, height = 0;

  auto* enc = app.add_subcommand("encode", "pack a raw YUV444 file into a stub bitstream");
  enc->add_option("--input", input)->required();
  enc->add_option("--output", output)->required();
  enc->add_option("--qp", qp)->required();
  enc->add_option("--width", width);
  enc->add_option("--height", height);
  enc->add_option("--mode", mode)->check(CLI::IsMember({"identity", "lossy"}));

  auto* dec = app.add_subcommand("decode", "unpack a stub bitstream back to raw YUV444");
  dec->add_option("--input", input)->required();
  dec->add_option("--output", output)->required();
  dec->add_option("--width", width);
  dec->add_option("--height", height);
  dec->add_option("--qp", qp);

  CLI11_PARSE(app, argc, argv);

  try {
    if (enc->parsed()) {
      std::vector<std::uint8_t> raw = read_file(input);
      const std::uint8_t mode_byte = mode == "lossy" ? 1 : 0;
      if (mode_byte == 1) quantize_planes(raw, qp);
      std::vector<std::uint8_t> packed = deflate_bytes(raw);

      std::vector<std::uint8_t> stream;
      stream.insert(stream.end(), kMagic, kMagic + 4);
      stream.push_back(mode_byte);
      stream.push_back(static_cast<std::uint8_t>(qp));
      put_u32(stream, static_cast<std::uint32_t>(width));
      put_u32(stream, static_cast<std::uint32_t>(height));
      put_u64(stream, raw.size());
      stream.insert(stream.end(), packed.begin(), packed.end());
      write_file(output, stream);
    } else {
      std::vector<std::uint8_t> stream = read_file(input);
      if (stream.size() < 22 || std::memcmp(stream.data(), kMagic, 4) != 0)
        throw std::runtime_error("not a stub bitstream: " + input);
      const std::uint64_t raw_size = get_u64(stream.data() + 14);
      std::vector<std::uint8_t> packed(stream.begin() + 22, stream.end());
      write_file(output, inflate_bytes(packed, raw_size));
    }
  } catch (const std::exception& e) {
    std::cerr << "msgdn-stub-codec: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
