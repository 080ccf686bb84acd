// Command-line front end: dataset preparation, QP allocation, training,
// inference and RD evaluation.

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "msgdn/csv.hpp"
#include "msgdn/data_pipeline.hpp"
#include "msgdn/eval.hpp"
#include "msgdn/rate_allocation.hpp"
#include "msgdn/training.hpp"

namespace fs = std::filesystem;

namespace {

std::string manifest_dir_of(const std::string& manifest_path) {
  return fs::absolute(fs::path(manifest_path)).parent_path().string();
}

int cmd_prepare(const std::string& images, const std::string& qps_arg, const std::string& codec_json,
                const std::string& out_manifest) {
  std::set<int> qps;
  for (const auto& part : msgdn::split_csv(qps_arg)) qps.insert(static_cast<int>(msgdn::parse_int(part)));
  msgdn::CodecSpec codec = msgdn::CodecSpec::from_json_file(codec_json);
  msgdn::BuildReport report;
  msgdn::DatasetManifest manifest = msgdn::build_manifest(images, qps, codec, out_manifest, &report);
  std::cout << "prepare: " << manifest.pairs.size() << " pairs (" << report.pairs_built
            << " built, " << report.pairs_reused << " reused, " << report.failures << " failed)\n";
  for (const auto& msg : report.failure_messages) std::cout << "  failed: " << msg << "\n";
  return 0;
}

int cmd_candidates(const std::string& manifest_path, const std::string& checkpoint,
                   const std::string& out_csv, bool post_quality) {
  msgdn::DatasetManifest manifest = msgdn::DatasetManifest::load(manifest_path);
  std::optional<std::string> ckpt;
  if (post_quality) {
    if (checkpoint.empty()) {
      std::cerr << "candidates: --quality post requires --checkpoint\n";
      return 1;
    }
    ckpt = checkpoint;
  }
  msgdn::EvalResult eval =
      msgdn::evaluate(manifest, manifest_dir_of(manifest_path), std::nullopt, ckpt, "");

  msgdn::CandidateSet set;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < eval.rows.size(); ++i) {
    const auto& row = eval.rows[i];
    const msgdn::ImagePair* pair = nullptr;
    for (const auto& p : manifest.pairs) {
      if (p.original_path == row.image && p.qp == row.qp) pair = &p;
    }
    msgdn::CandidateOption opt;
    opt.qp = row.qp;
    opt.bits = row.bits;
    opt.width = pair->width;
    opt.height = pair->height;
    opt.quality_db = post_quality ? row.psnr_post : row.psnr_codec;
    auto [it, inserted] = index.emplace(row.image, set.images.size());
    if (inserted) set.images.push_back({row.image, {}});
    set.images[it->second].options.push_back(opt);
  }
  set.to_csv(out_csv);
  for (const auto& warning : set.monotonicity_warnings())
    std::cout << "warning: " << warning << "\n";
  std::cout << "candidates: wrote " << out_csv << "\n";
  return 0;
}

int cmd_allocate(const std::string& candidates_csv, double target_bpp, const std::string& out_csv,
                 bool total_bits_mode) {
  msgdn::CandidateSet set = msgdn::CandidateSet::from_csv(candidates_csv);
  for (const auto& warning : set.monotonicity_warnings())
    std::cout << "warning: " << warning << "\n";
  msgdn::AllocationPlan plan = msgdn::allocate(set, target_bpp, total_bits_mode);
  plan.to_csv(out_csv, set);
  std::cout << "allocate: mean bpp " << msgdn::fmt_g17(plan.achieved_mean_bpp) << ", mean quality "
            << msgdn::fmt_g17(plan.achieved_mean_quality_db) << " dB"
            << (plan.exact ? "" : " (node budget hit; plan may be suboptimal)") << "\n";
  return 0;
}

int cmd_train(const std::string& plan_path, const std::string& manifest_path,
              const std::string& out_dir, bool resume) {
  msgdn::TrainPlan plan = msgdn::TrainPlan::from_json_file(plan_path);
  msgdn::DatasetManifest manifest = msgdn::DatasetManifest::load(manifest_path);
  msgdn::RunResult result =
      msgdn::run(plan, manifest, manifest_dir_of(manifest_path), out_dir, resume);
  std::cout << "train: " << result.epochs_run << " epochs, " << result.steps_run
            << " steps; generator at " << result.final_generator << "\n";
  return 0;
}

int cmd_infer(const std::string& checkpoint, const std::string& in_png, const std::string& out_png) {
  msgdn::infer(checkpoint, in_png, out_png);
  std::cout << "infer: wrote " << out_png << "\n";
  return 0;
}

int cmd_evaluate(const std::string& manifest_path, const std::string& checkpoint,
                 const std::string& plan_csv, const std::string& out_csv,
                 const std::string& rd_csv, const std::string& rd_svg, bool y_psnr) {
  msgdn::DatasetManifest manifest = msgdn::DatasetManifest::load(manifest_path);
  std::optional<msgdn::AllocationPlan> plan;
  if (!plan_csv.empty()) plan = msgdn::AllocationPlan::from_csv(plan_csv);
  std::optional<std::string> ckpt;
  if (!checkpoint.empty()) ckpt = checkpoint;

  msgdn::EvalResult result =
      msgdn::evaluate(manifest, manifest_dir_of(manifest_path), plan, ckpt, out_csv, y_psnr);
  std::cout << "evaluate: codec " << msgdn::fmt_g17(result.codec_point.psnr_db) << " dB at "
            << msgdn::fmt_g17(result.codec_point.bpp) << " bpp over "
            << result.codec_point.n_images << " images\n";
  if (result.post_point.has_value()) {
    std::cout << "evaluate: codec+msgdn " << msgdn::fmt_g17(result.post_point->psnr_db)
              << " dB at " << msgdn::fmt_g17(result.post_point->bpp) << " bpp\n";
  }
  if (!rd_csv.empty() || !rd_svg.empty()) {
    std::vector<msgdn::RDPoint> points{result.codec_point};
    if (result.post_point.has_value()) points.push_back(*result.post_point);
    msgdn::emit_rd(points, rd_csv, rd_svg);
  }
  return 0;
}

int cmd_rd_plot(const std::vector<std::string>& inputs, const std::string& out_csv,
                const std::string& out_svg) {
  std::vector<msgdn::RDPoint> points;
  for (const auto& path : inputs) {
    for (const auto& p : msgdn::read_rd_csv(path)) points.push_back(p);
  }
  msgdn::emit_rd(points, out_csv, out_svg);
  std::cout << "rd-plot: " << points.size() << " points -> " << (out_svg.empty() ? out_csv : out_svg)
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"msgdn: VVC post-processing network toolkit"};
  app.require_subcommand(1);

  std::string images, qps = "37,38,39", codec_json, manifest_path, out_path, checkpoint, plan_path;
  std::string in_png, out_png, rd_csv, rd_svg, quality = "codec";
  std::vector<std::string> rd_inputs;
  double target_bpp = 0.15;
  bool resume = false, total_bits_mode = false, y_psnr = false;

  auto* prepare = app.add_subcommand("prepare", "build (original, compressed) pairs via a codec");
  prepare->add_option("--images", images, "directory of source PNGs")->required();
  prepare->add_option("--qps", qps, "comma-separated QP list");
  prepare->add_option("--codec", codec_json, "codec command-template JSON")->required();
  prepare->add_option("--out", out_path, "manifest output path")->required();

  auto* candidates = app.add_subcommand("candidates", "derive per-image coding options from a manifest");
  candidates->add_option("--manifest", manifest_path)->required();
  candidates->add_option("--checkpoint", checkpoint, "generator for --quality post");
  candidates->add_option("--quality", quality, "quality column: codec or post")
      ->check(CLI::IsMember({"codec", "post"}));
  candidates->add_option("--out", out_path)->required();

  auto* alloc = app.add_subcommand("allocate", "choose one QP per image under a mean-bpp budget");
  alloc->add_option("--candidates", plan_path, "candidates CSV")->required();
  alloc->add_option("--target-bpp", target_bpp)->required();
  alloc->add_option("--out", out_path)->required();
  alloc->add_flag("--total-bits-mode", total_bits_mode,
                  "budget total bits / total pixels instead of mean of per-image bpp");

  auto* train = app.add_subcommand("train", "run a training plan over a manifest");
  train->add_option("--plan", plan_path, "train plan JSON")->required();
  train->add_option("--manifest", manifest_path)->required();
  train->add_option("--out", out_path, "output directory")->required();
  train->add_flag("--resume", resume, "continue from the newest checkpoint in --out");

  auto* infer_cmd = app.add_subcommand("infer", "run the generator over one image");
  infer_cmd->add_option("--checkpoint", checkpoint)->required();
  infer_cmd->add_option("--in", in_png)->required();
  infer_cmd->add_option("--out", out_png)->required();

  auto* evaluate = app.add_subcommand("evaluate", "PSNR/bpp with and without post-processing");
  evaluate->add_option("--manifest", manifest_path)->required();
  evaluate->add_option("--checkpoint", checkpoint);
  evaluate->add_option("--plan", plan_path, "allocation plan CSV restricting the pair set");
  evaluate->add_option("--out-csv", out_path, "per-image CSV");
  evaluate->add_option("--rd-csv", rd_csv);
  evaluate->add_option("--rd-plot", rd_svg, "RD plot SVG");
  evaluate->add_flag("--y-psnr", y_psnr, "measure PSNR on the luma plane");

  auto* rd_plot = app.add_subcommand("rd-plot", "merge RD CSVs into a table and plot");
  rd_plot->add_option("--in", rd_inputs, "RD CSV inputs")->required();
  rd_plot->add_option("--out-csv", rd_csv);
  rd_plot->add_option("--out", rd_svg, "SVG output")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (prepare->parsed()) return cmd_prepare(images, qps, codec_json, out_path);
    if (candidates->parsed()) return cmd_candidates(manifest_path, checkpoint, out_path, quality == "post");
    if (alloc->parsed()) return cmd_allocate(plan_path, target_bpp, out_path, total_bits_mode);
    if (train->parsed()) return cmd_train(plan_path, manifest_path, out_path, resume);
    if (infer_cmd->parsed()) return cmd_infer(checkpoint, in_png, out_png);
    if (evaluate->parsed())
      return cmd_evaluate(manifest_path, checkpoint, plan_path, out_path, rd_csv, rd_svg, y_psnr);
    if (rd_plot->parsed()) return cmd_rd_plot(rd_inputs, rd_csv, rd_svg);
  } catch (const std::exception& e) {
    std::cerr << "msgdn: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
