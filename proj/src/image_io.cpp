#include "msgdn/image_io.hpp"

#include <cmath>
#include <cstdio>
#include <memory>

#include <png.h>

#include "msgdn/common.hpp"

namespace msgdn {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::uint8_t to_u8(double v) {
  const double scaled = std::nearbyint(v * 255.0);
  if (scaled <= 0.0) return 0;
  if (scaled >= 255.0) return 255;
  return static_cast<std::uint8_t>(scaled);
}

}  // namespace

Tensor4 read_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("read_png: cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) throw IoError("read_png: out of memory");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("read_png: out of memory");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("read_png: malformed PNG: " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_set_interlace_handling(png);
  png_read_update_info(png, info);

  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  if (png_get_channels(png, info) != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("read_png: could not expand to RGB: " + path);
  }

  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(w) * h * 3);
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) rows[y] = pixels.data() + static_cast<std::size_t>(y) * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor4 out(1, 3, h, w);
  for (int y = 0; y < h; ++y) {
    const std::uint8_t* row = pixels.data() + static_cast<std::size_t>(y) * w * 3;
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        out.at(0, c, y, x) = row[static_cast<std::size_t>(x) * 3 + c] / 255.0;
      }
    }
  }
  return out;
}

void write_png(const std::string& path, const Tensor4& image) {
  if (image.n != 1 || image.c != 3) throw ShapeError("write_png: expected (1,3,H,W)");
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("write_png: cannot open " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) throw IoError("write_png: out of memory");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("write_png: out of memory");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("write_png: encode failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.w), static_cast<png_uint_32>(image.h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<std::uint8_t> row(static_cast<std::size_t>(image.w) * 3);
  for (int y = 0; y < image.h; ++y) {
    for (int x = 0; x < image.w; ++x) {
      for (int c = 0; c < 3; ++c) {
        row[static_cast<std::size_t>(x) * 3 + c] = to_u8(image.at(0, c, y, x));
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Tensor4 quantize8(const Tensor4& image) {
  Tensor4 out = image;
  for (auto& v : out.data) v = to_u8(v) / 255.0;
  return out;
}

std::vector<std::uint8_t> to_bytes_planar(const Tensor4& image) {
  if (image.n != 1) throw ShapeError("to_bytes_planar: expected batch of 1");
  std::vector<std::uint8_t> out;
  out.reserve(image.size());
  for (double v : image.data) out.push_back(to_u8(v));
  return out;
}

Tensor4 from_bytes_planar(const std::vector<std::uint8_t>& bytes, int channels, int h, int w) {
  if (bytes.size() != static_cast<std::size_t>(channels) * h * w)
    throw ShapeError("from_bytes_planar: size mismatch");
  Tensor4 out(1, channels, h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) out.data[i] = bytes[i] / 255.0;
  return out;
}

}  // namespace msgdn
