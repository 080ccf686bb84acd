#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "msgdn/autograd.hpp"
#include "msgdn/rng.hpp"
#include "msgdn/tensor.hpp"

namespace msgdn {

// Architecture hyperparameters of the MSGDN generator. channels_per_scale is
// ordered lowest-resolution scale first, so with the default {128, 128, 64}
// the full-resolution scale runs 64 channels and the 1/2 and 1/4 scales 128.
struct ModelConfig {
  int num_scales = 3;
  std::vector<int> channels_per_scale = {128, 128, 64};
  int rdbs_per_grdb = 4;
  int convs_per_rdb = 8;
  int grdbs_per_scale = 1;
  int growth_rate = 32;
  int kernel_size = 3;
  int input_channels = 3;
  bool use_global_residual = true;

  // Non-local attention is computed over windows of at most this many
  // positions; larger feature maps are processed in tiles.
  int attention_cap = 1024;
  // "bilinear" or "transposed" upsampling at the fusion points.
  std::string upsample_mode = "bilinear";

  void validate() const;
  // Channel width of scale k, where scale 0 is full resolution and scale k
  // is downsampled by 2^k.
  int channels_at(int scale) const;
  int pad_multiple() const;  // 2^(num_scales-1)

  std::string to_json_string() const;
  static ModelConfig from_json_string(const std::string& s);
  std::uint64_t fingerprint() const;
};

// Named leaf variables for a network. Iteration order is the sorted name
// order, which makes optimizer updates and serialization deterministic.
struct ParameterSet {
  std::map<std::string, autograd::Var> params;

  autograd::Var& at(const std::string& name);
  const autograd::Var& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params.count(name) != 0; }
  std::int64_t total_count() const;
  bool all_finite() const;
  void require_finite(const char* where) const;
  void zero_grad();
  std::map<std::string, Tensor4> snapshot_values() const;
  void load_values(const std::map<std::string, Tensor4>& values);
};

struct LayerShape {
  std::string name;
  std::array<int, 4> shape;
};

// Deterministic catalog of every generator tensor for a config; the source of
// truth for initialization, checkpoint validation and parameter counting.
std::vector<LayerShape> generator_shapes(const ModelConfig& config);

// He-initialized conv stacks; the reconstruction conv and the non-local
// output projections start at zero so a fresh model is the identity map.
ParameterSet init_generator_params(const ModelConfig& config, Rng& rng);

std::int64_t generator_parameter_count(const ModelConfig& config);

// Right/bottom reflect padding to a multiple of m, with the record needed to
// undo it exactly.
struct CropRecord {
  int orig_h = 0;
  int orig_w = 0;
  bool empty(int padded_h, int padded_w) const { return orig_h == padded_h && orig_w == padded_w; }
};
std::pair<autograd::Var, CropRecord> pad_to_multiple(const autograd::Var& image, int m);
autograd::Var crop_back(const autograd::Var& padded, const CropRecord& record);

// Residual dense block: convs_per_rdb densely connected conv+ReLU layers, a
// 1x1 local fusion back to the nominal width, and a local residual.
autograd::Var rdb_forward(const autograd::Var& x, ParameterSet& params, const std::string& prefix,
                          int growth_rate, int convs_per_rdb, int kernel_size);

// Grouped residual dense block: rdbs_per_grdb RDBs in sequence, their outputs
// concatenated, fused by 1x1 conv, plus a block-level residual.
autograd::Var grdb_forward(const autograd::Var& x, ParameterSet& params, const std::string& prefix,
                           const ModelConfig& config);

// Stride-2 feature downsampling conv. Spatial dims must be even.
autograd::Var downsample(const autograd::Var& x, ParameterSet& params, const std::string& prefix,
                         int kernel_size);

// Embedded-Gaussian non-local block with residual connection. Requires
// H*W <= attention_cap; larger inputs must be tiled by the caller.
// If attention_out is non-null it receives the (N,1,P,P) attention weights.
autograd::Var non_local(const autograd::Var& x, ParameterSet& params, const std::string& prefix,
                        int attention_cap, Tensor4* attention_out = nullptr);

// Full generator forward. Accepts any H,W >= 1 via internal pad/crop and
// preserves the input shape.
autograd::Var msgdn_forward(const autograd::Var& image, ParameterSet& params,
                            const ModelConfig& config);

}  // namespace msgdn
