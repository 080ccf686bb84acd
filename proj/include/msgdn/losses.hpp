#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "msgdn/autograd.hpp"
#include "msgdn/model.hpp"
#include "msgdn/tensor.hpp"

namespace msgdn {

double l1_loss(const Tensor4& pred, const Tensor4& target);
double mse_loss(const Tensor4& pred, const Tensor4& target);
autograd::Var l1_loss_var(const autograd::Var& pred, const autograd::Var& target);
autograd::Var mse_loss_var(const autograd::Var& pred, const autograd::Var& target);

// 10*log10(peak^2/mse); +infinity at mse == 0, error on negative mse.
double psnr(double mse, double peak);

// Identifies a fixed pretrained conv classifier and the conv layer whose
// pre-activation output the perceptual distance is measured on.
struct FeatureExtractorSpec {
  std::string backbone = "vgg19";
  std::string tap_layer = "conv5_4";
  std::string weights_path;
};

// VGG-style conv stack loaded from a named-tensor archive. The archive
// carries the channel plan, conv counts per block, tap names and the input
// normalization, so differently sized backbones share one loader.
class FeatureExtractor {
 public:
  static FeatureExtractor load(const FeatureExtractorSpec& spec);

  // Runs conv blocks (with 2x2 max pooling between blocks) up to the tap
  // layer and returns its pre-activation output.
  autograd::Var features(const autograd::Var& image) const;

  const std::string& backbone() const { return backbone_; }
  const std::string& tap_layer() const { return tap_layer_; }

  // Writes an archive in the expected layout; also used to fabricate small
  // test backbones.
  static void save_archive(const std::string& path, const std::string& backbone,
                           const std::vector<int>& channels, const std::vector<int>& convs_per_block,
                           const std::array<double, 3>& input_mean,
                           const std::array<double, 3>& input_std,
                           const std::map<std::string, Tensor4>& weights);

 private:
  std::string backbone_;
  std::string tap_layer_;
  std::vector<int> channels_;
  std::vector<int> convs_per_block_;
  std::array<double, 3> input_mean_{};
  std::array<double, 3> input_std_{};
  int tap_block_ = 0;
  int tap_conv_ = 0;
  std::shared_ptr<ParameterSet> params_ = std::make_shared<ParameterSet>();
};

double perceptual_loss(const Tensor4& pred, const Tensor4& target, const FeatureExtractor& extractor);
autograd::Var perceptual_loss_var(const autograd::Var& pred, const autograd::Var& target,
                                  const FeatureExtractor& extractor);

struct HybridLossWeights {
  double w_l1 = 1.0;
  double w_adv = 0.01;
  double w_perc = 0.0001;
};

struct HybridBreakdown {
  double total = 0.0;
  double l1_term = 0.0;    // w_l1 * L1
  double adv_term = 0.0;   // w_adv * L_adv
  double perc_term = 0.0;  // w_perc * L_p
  double l1 = 0.0;
  double adv = 0.0;
  double perc = 0.0;
};

// total = w_l1*L1 + w_adv*L_adv + w_perc*L_p. extractor may be null only when
// w_perc == 0.
HybridBreakdown hybrid_loss(const Tensor4& pred, const Tensor4& target,
                            const std::vector<double>& c_real, const std::vector<double>& c_fake,
                            const HybridLossWeights& weights, const FeatureExtractor* extractor);
autograd::Var hybrid_loss_var(const autograd::Var& pred, const autograd::Var& target,
                              const autograd::Var& c_real, const autograd::Var& c_fake,
                              const HybridLossWeights& weights, const FeatureExtractor* extractor,
                              HybridBreakdown* breakdown = nullptr);

}  // namespace msgdn
