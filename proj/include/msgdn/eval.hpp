#pragma once

#include <optional>
#include <string>
#include <vector>

#include "msgdn/data_pipeline.hpp"
#include "msgdn/rate_allocation.hpp"
#include "msgdn/tensor.hpp"

namespace msgdn {

struct RDPoint {
  std::string label;
  double bpp = 0.0;
  double psnr_db = 0.0;
  int n_images = 0;
};

// PSNR between two [0,1] images after 8-bit quantization, peak 255.
// y_only measures the BT.601 luma plane instead of RGB.
double image_psnr(const Tensor4& a, const Tensor4& b, bool y_only = false);

// Runs the generator from a checkpoint (or generator archive) over one PNG.
// Output is the 8-bit quantized reconstruction at the input size.
void infer(const std::string& checkpoint_path, const std::string& input_png,
           const std::string& output_png);

struct EvalRow {
  std::string image;
  int qp = 0;
  std::int64_t bits = 0;
  double bpp = 0.0;
  double psnr_codec = 0.0;
  double psnr_post = 0.0;  // NaN when no checkpoint given
};

struct EvalResult {
  std::vector<EvalRow> rows;  // path-sorted
  RDPoint codec_point;
  std::optional<RDPoint> post_point;
};

// Mean PSNR and bpp over the plan-selected pairs (every manifest pair when no
// plan is given), with and without post-processing. Per-image rows go to
// per_image_csv when non-empty.
EvalResult evaluate(const DatasetManifest& manifest, const std::string& manifest_dir,
                    const std::optional<AllocationPlan>& plan,
                    const std::optional<std::string>& checkpoint_path,
                    const std::string& per_image_csv, bool y_only = false);

// RD table and plot. CSV rows sorted by (label, bpp); the plot is an SVG
// with one polyline per label.
void emit_rd(const std::vector<RDPoint>& points, const std::string& out_csv,
             const std::string& out_svg);
std::vector<RDPoint> read_rd_csv(const std::string& path);

}  // namespace msgdn
