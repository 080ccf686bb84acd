#include "msgdn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>

#include "msgdn/csv.hpp"
#include "msgdn/image_io.hpp"
#include "msgdn/losses.hpp"
#include "msgdn/model.hpp"
#include "msgdn/training.hpp"

namespace fs = std::filesystem;

namespace msgdn {

double image_psnr(const Tensor4& a, const Tensor4& b, bool y_only) {
  if (!a.same_shape(b)) throw ShapeError("image_psnr: shape mismatch");
  Tensor4 qa = quantize8(a);
  Tensor4 qb = quantize8(b);
  if (y_only) {
    qa = rgb_to_yuv444(qa);
    qb = rgb_to_yuv444(qb);
    Tensor4 ya(qa.n, 1, qa.h, qa.w), yb(qb.n, 1, qb.h, qb.w);
    for (int ni = 0; ni < qa.n; ++ni) {
      std::copy_n(qa.plane(ni, 0), static_cast<std::size_t>(qa.h) * qa.w, ya.plane(ni, 0));
      std::copy_n(qb.plane(ni, 0), static_cast<std::size_t>(qb.h) * qb.w, yb.plane(ni, 0));
    }
    qa = std::move(ya);
    qb = std::move(yb);
  }
  // Work on the 0..255 grid so the reported numbers match codec tooling.
  double sum = 0.0;
  for (std::size_t i = 0; i < qa.size(); ++i) {
    const double d = (qa.data[i] - qb.data[i]) * 255.0;
    sum += d * d;
  }
  return psnr(sum / static_cast<double>(qa.size()), 255.0);
}

namespace {

Tensor4 run_generator(const ModelConfig& config, ParameterSet& params, const Tensor4& input) {
  autograd::NoGradGuard no_grad;
  return msgdn_forward(autograd::Var::leaf(input), params, config).value();
}

struct LoadedGenerator {
  ModelConfig config;
  ParameterSet params;
};

LoadedGenerator load_generator(const std::string& path) {
  auto [config, values] = load_generator_archive(path);
  LoadedGenerator g;
  g.config = config;
  for (auto& [name, t] : values) {
    g.params.params.emplace(name, autograd::Var::leaf(std::move(t), false));
  }
  return g;
}

}  // namespace

void infer(const std::string& checkpoint_path, const std::string& input_png,
           const std::string& output_png) {
  LoadedGenerator g = load_generator(checkpoint_path);
  Tensor4 input = read_png(input_png);
  Tensor4 output = run_generator(g.config, g.params, input);
  write_png(output_png, quantize8(output));
}

EvalResult evaluate(const DatasetManifest& manifest, const std::string& manifest_dir,
                    const std::optional<AllocationPlan>& plan,
                    const std::optional<std::string>& checkpoint_path,
                    const std::string& per_image_csv, bool y_only) {
  if (manifest.pairs.empty()) throw ConfigError("evaluate: empty manifest");

  // Select pairs: either the plan's (image, qp) choices or every pair.
  std::vector<ImagePair> selected;
  if (plan.has_value()) {
    std::map<std::pair<std::string, int>, const ImagePair*> lookup;
    for (const auto& p : manifest.pairs) lookup[{p.original_path, p.qp}] = &p;
    for (const auto& c : plan->choices) {
      auto it = lookup.find({c.image, c.qp});
      if (it == lookup.end())
        throw ConfigError("evaluate: plan choice (" + c.image + ", qp " + std::to_string(c.qp) +
                          ") not present in manifest");
      selected.push_back(*it->second);
    }
  } else {
    selected = manifest.pairs;
  }
  std::sort(selected.begin(), selected.end(), [](const ImagePair& a, const ImagePair& b) {
    return std::tie(a.original_path, a.qp) < std::tie(b.original_path, b.qp);
  });

  std::optional<LoadedGenerator> gen;
  if (checkpoint_path.has_value()) gen = load_generator(*checkpoint_path);

  EvalResult result;
  std::vector<std::string> missing;
  double sum_bpp = 0.0, sum_codec = 0.0, sum_post = 0.0;
  for (const auto& p : selected) {
    const std::string orig_path = resolve_path(manifest_dir, p.original_path);
    const std::string comp_path = resolve_path(manifest_dir, p.compressed_path);
    if (!fs::exists(orig_path)) {
      missing.push_back(orig_path);
      continue;
    }
    if (!fs::exists(comp_path)) {
      missing.push_back(comp_path);
      continue;
    }
    Tensor4 original = read_png(orig_path);
    Tensor4 compressed = read_png(comp_path);

    EvalRow row;
    row.image = p.original_path;
    row.qp = p.qp;
    row.bits = p.bits;
    row.bpp = p.bpp();
    row.psnr_codec = image_psnr(original, compressed, y_only);
    row.psnr_post = std::numeric_limits<double>::quiet_NaN();
    if (gen.has_value()) {
      Tensor4 restored = run_generator(gen->config, gen->params, compressed);
      row.psnr_post = image_psnr(original, restored, y_only);
      sum_post += row.psnr_post;
    }
    sum_bpp += row.bpp;
    sum_codec += row.psnr_codec;
    result.rows.push_back(std::move(row));
  }
  if (!missing.empty()) {
    std::string msg = "evaluate: missing files:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw IoError(msg);
  }

  const double n = static_cast<double>(result.rows.size());
  result.codec_point = {"codec", sum_bpp / n, sum_codec / n, static_cast<int>(result.rows.size())};
  if (gen.has_value()) {
    result.post_point =
        RDPoint{"codec+msgdn", sum_bpp / n, sum_post / n, static_cast<int>(result.rows.size())};
  }

  if (!per_image_csv.empty()) {
    std::ofstream out(per_image_csv, std::ios::trunc);
    if (!out) throw IoError("evaluate: cannot open " + per_image_csv);
    out << "# msgdn-eval v1\n";
    out << "image,qp,bits,bpp,psnr_codec,psnr_post\n";
    for (const auto& r : result.rows) {
      out << r.image << ',' << r.qp << ',' << r.bits << ',' << fmt_g17(r.bpp) << ','
          << fmt_g17(r.psnr_codec) << ',' << (std::isnan(r.psnr_post) ? "" : fmt_g17(r.psnr_post))
          << '\n';
    }
  }
  return result;
}

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

void write_svg_plot(const std::vector<RDPoint>& points, const std::string& path) {
  // Gather finite extents; infinite PSNR points are annotated but not drawn.
  double min_bpp = 1e300, max_bpp = -1e300, min_psnr = 1e300, max_psnr = -1e300;
  for (const auto& p : points) {
    if (!std::isfinite(p.psnr_db)) continue;
    min_bpp = std::min(min_bpp, p.bpp);
    max_bpp = std::max(max_bpp, p.bpp);
    min_psnr = std::min(min_psnr, p.psnr_db);
    max_psnr = std::max(max_psnr, p.psnr_db);
  }
  if (min_bpp > max_bpp) {
    min_bpp = 0.0;
    max_bpp = 1.0;
    min_psnr = 0.0;
    max_psnr = 1.0;
  }
  if (max_bpp - min_bpp < 1e-9) {
    min_bpp -= 0.01;
    max_bpp += 0.01;
  }
  if (max_psnr - min_psnr < 1e-9) {
    min_psnr -= 0.5;
    max_psnr += 0.5;
  }

  const double width = 640, height = 480, ml = 70, mr = 20, mt = 20, mb = 50;
  auto sx = [&](double bpp) { return ml + (bpp - min_bpp) / (max_bpp - min_bpp) * (width - ml - mr); };
  auto sy = [&](double ps) {
    return height - mb - (ps - min_psnr) / (max_psnr - min_psnr) * (height - mt - mb);
  };

  std::map<std::string, std::vector<const RDPoint*>> series;
  for (const auto& p : points) series[p.label].push_back(&p);
  for (auto& [label, pts] : series) {
    std::sort(pts.begin(), pts.end(),
              [](const RDPoint* a, const RDPoint* b) { return a->bpp < b->bpp; });
  }

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("emit_rd: cannot open " + path);
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  out << "  <rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
  out << "  <line x1=\"" << ml << "\" y1=\"" << height - mb << "\" x2=\"" << width - mr
      << "\" y2=\"" << height - mb << "\" stroke=\"black\"/>\n";
  out << "  <line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << height - mb
      << "\" stroke=\"black\"/>\n";
  out << "  <text x=\"" << (ml + width - mr) / 2 << "\" y=\"" << height - 12
      << "\" text-anchor=\"middle\" font-size=\"14\">bpp</text>\n";
  out << "  <text x=\"18\" y=\"" << (mt + height - mb) / 2
      << "\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 18 "
      << (mt + height - mb) / 2 << ")\">PSNR (dB)</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double bpp = min_bpp + (max_bpp - min_bpp) * i / 4.0;
    const double ps = min_psnr + (max_psnr - min_psnr) * i / 4.0;
    out << "  <text x=\"" << sx(bpp) << "\" y=\"" << height - mb + 18
        << "\" text-anchor=\"middle\" font-size=\"11\">" << fmt_g17(std::round(bpp * 1000) / 1000)
        << "</text>\n";
    out << "  <text x=\"" << ml - 8 << "\" y=\"" << sy(ps) + 4
        << "\" text-anchor=\"end\" font-size=\"11\">" << fmt_g17(std::round(ps * 100) / 100)
        << "</text>\n";
  }

  int color_index = 0;
  double legend_y = mt + 14;
  for (const auto& [label, pts] : series) {
    const char* color = kPalette[color_index % 6];
    ++color_index;
    std::string poly;
    for (const RDPoint* p : pts) {
      if (!std::isfinite(p->psnr_db)) continue;
      if (!poly.empty()) poly += " ";
      poly += fmt_g17(sx(p->bpp)) + "," + fmt_g17(sy(p->psnr_db));
    }
    if (!poly.empty()) {
      out << "  <polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\""
          << poly << "\"/>\n";
      for (const RDPoint* p : pts) {
        if (!std::isfinite(p->psnr_db)) continue;
        out << "  <circle cx=\"" << fmt_g17(sx(p->bpp)) << "\" cy=\"" << fmt_g17(sy(p->psnr_db))
            << "\" r=\"3\" fill=\"" << color << "\"/>\n";
      }
    }
    out << "  <text x=\"" << width - mr - 8 << "\" y=\"" << legend_y
        << "\" text-anchor=\"end\" font-size=\"12\" fill=\"" << color << "\">" << label
        << "</text>\n";
    legend_y += 16;
  }
  out << "</svg>\n";
  if (!out) throw IoError("emit_rd: write failed: " + path);
}

}  // namespace

void emit_rd(const std::vector<RDPoint>& points, const std::string& out_csv,
             const std::string& out_svg) {
  if (points.empty()) throw ConfigError("emit_rd: no points");
  std::vector<RDPoint> sorted = points;
  std::sort(sorted.begin(), sorted.end(), [](const RDPoint& a, const RDPoint& b) {
    return std::tie(a.label, a.bpp) < std::tie(b.label, b.bpp);
  });

  if (!out_csv.empty()) {
    std::ofstream out(out_csv, std::ios::trunc);
    if (!out) throw IoError("emit_rd: cannot open " + out_csv);
    out << "# msgdn-rd v1\n";
    out << "label,bpp,psnr_db,n_images\n";
    for (const auto& p : sorted) {
      out << p.label << ',' << fmt_g17(p.bpp) << ',' << fmt_g17(p.psnr_db) << ',' << p.n_images
          << '\n';
    }
  }
  if (!out_svg.empty()) write_svg_plot(sorted, out_svg);
}

std::vector<RDPoint> read_rd_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("read_rd_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "# msgdn-rd v1")
    throw IoError("read_rd_csv: bad or missing version line in " + path);
  if (!std::getline(in, line) || line != "label,bpp,psnr_db,n_images")
    throw IoError("read_rd_csv: bad column header in " + path);
  std::vector<RDPoint> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 4) throw IoError("read_rd_csv: malformed row: " + line);
    out.push_back({f[0], parse_double(f[1]), parse_double(f[2]), static_cast<int>(parse_int(f[3]))});
  }
  return out;
}

}  // namespace msgdn
