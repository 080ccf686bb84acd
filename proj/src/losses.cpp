#include "msgdn/losses.hpp"

#include <cmath>
#include <filesystem>
#include <limits>

#include <json.hpp>

#include "msgdn/adversarial.hpp"
#include "msgdn/archive.hpp"
#include "msgdn/common.hpp"

namespace msgdn {

using autograd::Var;

double l1_loss(const Tensor4& pred, const Tensor4& target) {
  if (!pred.same_shape(target)) throw ShapeError("l1_loss: shape mismatch");
  double sum = 0.0;
  const std::size_t sz = pred.size();
  for (std::size_t i = 0; i < sz; ++i) sum += std::abs(pred.data[i] - target.data[i]);
  return sum / static_cast<double>(sz);
}

double mse_loss(const Tensor4& pred, const Tensor4& target) {
  if (!pred.same_shape(target)) throw ShapeError("mse_loss: shape mismatch");
  double sum = 0.0;
  const std::size_t sz = pred.size();
  for (std::size_t i = 0; i < sz; ++i) {
    const double d = pred.data[i] - target.data[i];
    sum += d * d;
  }
  return sum / static_cast<double>(sz);
}

Var l1_loss_var(const Var& pred, const Var& target) {
  return autograd::mean_abs(autograd::sub(pred, target));
}

Var mse_loss_var(const Var& pred, const Var& target) {
  return autograd::mean_square(autograd::sub(pred, target));
}

double psnr(double mse, double peak) {
  if (mse < 0.0) throw Error("psnr: negative mse");
  if (peak <= 0.0) throw Error("psnr: peak must be positive");
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

// --- feature extractor ---

void FeatureExtractor::save_archive(const std::string& path, const std::string& backbone,
                                    const std::vector<int>& channels,
                                    const std::vector<int>& convs_per_block,
                                    const std::array<double, 3>& input_mean,
                                    const std::array<double, 3>& input_std,
                                    const std::map<std::string, Tensor4>& weights) {
  Archive a;
  a.kind = "extractor";
  nlohmann::json meta;
  meta["backbone"] = backbone;
  meta["channels"] = channels;
  meta["convs_per_block"] = convs_per_block;
  meta["input_mean"] = input_mean;
  meta["input_std"] = input_std;
  a.set_meta(meta);
  a.tensors = weights;
  a.save(path);
}

FeatureExtractor FeatureExtractor::load(const FeatureExtractorSpec& spec) {
  if (!std::filesystem::exists(spec.weights_path))
    throw IoError("feature extractor: weights file not found: " + spec.weights_path +
                  " (refusing to run with random weights)");
  Archive a = Archive::load(spec.weights_path);
  if (a.kind != "extractor")
    throw IoError("feature extractor: archive kind '" + a.kind + "' is not 'extractor'");
  const nlohmann::json meta = a.meta();

  FeatureExtractor fx;
  fx.backbone_ = meta.value("backbone", "");
  if (fx.backbone_ != spec.backbone)
    throw ConfigError("feature extractor: archive holds backbone '" + fx.backbone_ +
                      "', spec wants '" + spec.backbone + "'");
  fx.tap_layer_ = spec.tap_layer;
  fx.channels_ = meta["channels"].get<std::vector<int>>();
  fx.convs_per_block_ = meta["convs_per_block"].get<std::vector<int>>();
  if (fx.channels_.size() != fx.convs_per_block_.size() || fx.channels_.empty())
    throw ConfigError("feature extractor: inconsistent channel plan");
  const auto mean = meta["input_mean"].get<std::vector<double>>();
  const auto stdv = meta["input_std"].get<std::vector<double>>();
  if (mean.size() != 3 || stdv.size() != 3)
    throw ConfigError("feature extractor: input normalization must have 3 channels");
  std::copy(mean.begin(), mean.end(), fx.input_mean_.begin());
  std::copy(stdv.begin(), stdv.end(), fx.input_std_.begin());

  // Resolve the tap "conv{block}_{idx}" (1-based, VGG naming).
  int tb = 0, tc = 0;
  if (std::sscanf(fx.tap_layer_.c_str(), "conv%d_%d", &tb, &tc) != 2 || tb < 1 || tc < 1 ||
      tb > static_cast<int>(fx.channels_.size()) || tc > fx.convs_per_block_[tb - 1])
    throw ConfigError("feature extractor: tap layer '" + fx.tap_layer_ +
                      "' does not exist in this backbone");
  fx.tap_block_ = tb - 1;
  fx.tap_conv_ = tc - 1;

  int in_ch = 3;
  for (std::size_t b = 0; b < fx.channels_.size(); ++b) {
    for (int i = 0; i < fx.convs_per_block_[b]; ++i) {
      const std::string name =
          "block" + std::to_string(b + 1) + ".conv" + std::to_string(i + 1);
      auto wit = a.tensors.find(name + ".w");
      auto bit = a.tensors.find(name + ".b");
      if (wit == a.tensors.end() || bit == a.tensors.end())
        throw IoError("feature extractor: archive missing tensor '" + name + "'");
      const Tensor4& w = wit->second;
      if (w.n != fx.channels_[b] || w.c != in_ch || w.h != 3 || w.w != 3)
        throw ConfigError("feature extractor: bad shape for '" + name + ".w'");
      if (bit->second.size() != static_cast<std::size_t>(fx.channels_[b]))
        throw ConfigError("feature extractor: bad shape for '" + name + ".b'");
      fx.params_->params.emplace(name + ".w", Var::leaf(w, false));
      fx.params_->params.emplace(name + ".b", Var::leaf(bit->second, false));
      in_ch = fx.channels_[b];
    }
  }
  return fx;
}

Var FeatureExtractor::features(const Var& image) const {
  const Tensor4& img = image.value();
  if (img.c != 3) throw ShapeError("feature extractor: expected 3-channel input");

  Tensor4 mean(1, 3, 1, 1), invstd(1, 3, 1, 1);
  for (int i = 0; i < 3; ++i) {
    mean.data[i] = input_mean_[i];
    invstd.data[i] = 1.0 / input_std_[i];
  }
  Var x = autograd::mul_bcast(autograd::sub_bcast(image, Var::leaf(mean)), Var::leaf(invstd));

  for (int b = 0; b <= tap_block_; ++b) {
    const int convs = b == tap_block_ ? tap_conv_ + 1 : convs_per_block_[b];
    for (int i = 0; i < convs; ++i) {
      const std::string name = "block" + std::to_string(b + 1) + ".conv" + std::to_string(i + 1);
      x = autograd::conv2d(x, params_->at(name + ".w"), params_->at(name + ".b"), 1, 1);
      const bool is_tap = b == tap_block_ && i == tap_conv_;
      if (is_tap) return x;  // pre-activation
      x = autograd::relu(x);
    }
    x = autograd::maxpool2x2(x);
  }
  throw Error("feature extractor: unreachable");
}

double perceptual_loss(const Tensor4& pred, const Tensor4& target, const FeatureExtractor& fx) {
  autograd::NoGradGuard no_grad;
  return perceptual_loss_var(Var::leaf(pred), Var::leaf(target), fx).value().data[0];
}

Var perceptual_loss_var(const Var& pred, const Var& target, const FeatureExtractor& fx) {
  if (!pred.value().same_shape(target.value())) throw ShapeError("perceptual_loss: shape mismatch");
  Var fp = fx.features(pred);
  Var ft = fx.features(target);
  return autograd::mean_square(autograd::sub(fp, ft));
}

// --- hybrid ---

HybridBreakdown hybrid_loss(const Tensor4& pred, const Tensor4& target,
                            const std::vector<double>& c_real, const std::vector<double>& c_fake,
                            const HybridLossWeights& weights, const FeatureExtractor* extractor) {
  LogitBatch real{c_real, LogitBatch::Origin::Real};
  LogitBatch fake{c_fake, LogitBatch::Origin::Fake};
  HybridBreakdown b;
  b.l1 = l1_loss(pred, target);
  b.adv = generator_adv_loss(real, fake);
  if (weights.w_perc != 0.0) {
    if (extractor == nullptr) throw ConfigError("hybrid_loss: w_perc != 0 requires an extractor");
    b.perc = perceptual_loss(pred, target, *extractor);
  }
  b.l1_term = weights.w_l1 * b.l1;
  b.adv_term = weights.w_adv * b.adv;
  b.perc_term = weights.w_perc * b.perc;
  b.total = b.l1_term + b.adv_term + b.perc_term;
  return b;
}

Var hybrid_loss_var(const Var& pred, const Var& target, const Var& c_real, const Var& c_fake,
                    const HybridLossWeights& weights, const FeatureExtractor* extractor,
                    HybridBreakdown* breakdown) {
  Var l1 = l1_loss_var(pred, target);
  Var total = weights.w_l1 == 1.0 ? l1 : autograd::scale(l1, weights.w_l1);
  HybridBreakdown b;
  b.l1 = l1.value().data[0];
  if (weights.w_adv != 0.0) {
    Var adv = generator_adv_loss_var(c_real, c_fake);
    b.adv = adv.value().data[0];
    total = autograd::add(total, autograd::scale(adv, weights.w_adv));
  }
  if (weights.w_perc != 0.0) {
    if (extractor == nullptr) throw ConfigError("hybrid_loss: w_perc != 0 requires an extractor");
    Var perc = perceptual_loss_var(pred, target, *extractor);
    b.perc = perc.value().data[0];
    total = autograd::add(total, autograd::scale(perc, weights.w_perc));
  }
  b.l1_term = weights.w_l1 * b.l1;
  b.adv_term = weights.w_adv * b.adv;
  b.perc_term = weights.w_perc * b.perc;
  b.total = total.value().data[0];
  if (breakdown != nullptr) *breakdown = b;
  return total;
}

}  // namespace msgdn
