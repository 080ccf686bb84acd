#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msgdn/tensor.hpp"

namespace msgdn {

// 8-bit RGB PNG <-> (1,3,H,W) tensor in [0,1]. Gray/palette/alpha inputs are
// expanded to RGB on read; writes are always 8-bit RGB.
Tensor4 read_png(const std::string& path);
void write_png(const std::string& path, const Tensor4& image);

// Round-to-nearest 8-bit quantization of a [0,1] image, returned on the
// k/255 grid.
Tensor4 quantize8(const Tensor4& image);

// Interleaved helpers used by the YUV pipeline.
std::vector<std::uint8_t> to_bytes_planar(const Tensor4& image);   // planes in channel order
Tensor4 from_bytes_planar(const std::vector<std::uint8_t>& bytes, int channels, int h, int w);

}  // namespace msgdn
