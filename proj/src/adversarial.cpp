#include "msgdn/adversarial.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "msgdn/archive.hpp"
#include "msgdn/common.hpp"

namespace msgdn {

using autograd::Var;

void DiscriminatorConfig::validate() const {
  if (base_channels < 1 || num_downsampling_stages < 1 || patch_size < 1 || fc_hidden < 1 ||
      channel_cap_multiplier < 1 || input_channels < 1)
    throw ConfigError("DiscriminatorConfig: all counts must be positive");
  if (patch_size % (1 << num_downsampling_stages) != 0)
    throw ConfigError("DiscriminatorConfig: patch_size must be divisible by 2^num_downsampling_stages");
}

std::string DiscriminatorConfig::to_json_string() const {
  nlohmann::json j;
  j["base_channels"] = base_channels;
  j["num_downsampling_stages"] = num_downsampling_stages;
  j["patch_size"] = patch_size;
  j["fc_hidden"] = fc_hidden;
  j["channel_cap_multiplier"] = channel_cap_multiplier;
  j["input_channels"] = input_channels;
  return j.dump();
}

DiscriminatorConfig DiscriminatorConfig::from_json_string(const std::string& s) {
  nlohmann::json j = nlohmann::json::parse(s, nullptr, false);
  if (j.is_discarded()) throw ConfigError("DiscriminatorConfig: malformed JSON");
  DiscriminatorConfig c;
  c.base_channels = j.value("base_channels", c.base_channels);
  c.num_downsampling_stages = j.value("num_downsampling_stages", c.num_downsampling_stages);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.fc_hidden = j.value("fc_hidden", c.fc_hidden);
  c.channel_cap_multiplier = j.value("channel_cap_multiplier", c.channel_cap_multiplier);
  c.input_channels = j.value("input_channels", c.input_channels);
  c.validate();
  return c;
}

std::uint64_t DiscriminatorConfig::fingerprint() const {
  return fnv1a64("msgdn-disc-v1:" + to_json_string());
}

namespace {

int stage_channels(const DiscriminatorConfig& cfg, int stage_out) {
  const std::int64_t raw = static_cast<std::int64_t>(cfg.base_channels) << stage_out;
  const std::int64_t cap = static_cast<std::int64_t>(cfg.base_channels) * cfg.channel_cap_multiplier;
  return static_cast<int>(std::min(raw, cap));
}

}  // namespace

std::vector<LayerShape> discriminator_shapes(const DiscriminatorConfig& cfg) {
  cfg.validate();
  std::vector<LayerShape> out;
  out.push_back({"conv_in.w", {cfg.base_channels, cfg.input_channels, 3, 3}});
  out.push_back({"conv_in.b", {1, cfg.base_channels, 1, 1}});
  int ch = cfg.base_channels;
  for (int i = 0; i < cfg.num_downsampling_stages; ++i) {
    const int next = stage_channels(cfg, i + 1);
    const std::string sp = "stage" + std::to_string(i);
    out.push_back({sp + ".conv.w", {next, ch, 3, 3}});
    out.push_back({sp + ".conv.b", {1, next, 1, 1}});
    out.push_back({sp + ".bn.gamma", {1, next, 1, 1}});
    out.push_back({sp + ".bn.beta", {1, next, 1, 1}});
    ch = next;
  }
  const int spatial = cfg.patch_size >> cfg.num_downsampling_stages;
  const int flat = ch * spatial * spatial;
  out.push_back({"fc1.w", {cfg.fc_hidden, flat, 1, 1}});
  out.push_back({"fc1.b", {1, cfg.fc_hidden, 1, 1}});
  out.push_back({"fc2.w", {1, cfg.fc_hidden, 1, 1}});
  out.push_back({"fc2.b", {1, 1, 1, 1}});
  return out;
}

ParameterSet init_discriminator_params(const DiscriminatorConfig& cfg, Rng& rng) {
  ParameterSet ps;
  for (const auto& ls : discriminator_shapes(cfg)) {
    const auto& sh = ls.shape;
    Tensor4 t(sh[0], sh[1], sh[2], sh[3]);
    if (ls.name.ends_with(".w")) {
      const double fan_in = static_cast<double>(sh[1]) * sh[2] * sh[3];
      const double stddev = std::sqrt(2.0 / fan_in);
      for (auto& v : t.data) v = rng.normal() * stddev;
    } else if (ls.name.ends_with(".gamma")) {
      std::fill(t.data.begin(), t.data.end(), 1.0);
    }
    ps.params.emplace(ls.name, Var::leaf(std::move(t), true));
  }
  return ps;
}

namespace {

constexpr double kLeakySlope = 0.2;
constexpr double kBnEps = 1e-5;

Var batchnorm(const Var& x, const Var& gamma, const Var& beta) {
  Var mu = autograd::channel_mean(x);
  Var centered = autograd::sub_bcast(x, mu);
  Var var = autograd::channel_mean(autograd::square(centered));
  Var normalized = autograd::mul_bcast(centered, autograd::rsqrt_eps(var, kBnEps));
  return autograd::add_bcast(autograd::mul_bcast(normalized, gamma), beta);
}

}  // namespace

Var discriminator_forward_var(const Var& images, ParameterSet& params,
                              const DiscriminatorConfig& cfg) {
  const Tensor4& img = images.value();
  if (img.c != cfg.input_channels)
    throw ShapeError("discriminator: expected " + std::to_string(cfg.input_channels) + " channels");
  if (img.h != cfg.patch_size || img.w != cfg.patch_size)
    throw ShapeError("discriminator: expected " + std::to_string(cfg.patch_size) + "x" +
                     std::to_string(cfg.patch_size) + " input, got " + std::to_string(img.h) + "x" +
                     std::to_string(img.w));

  Var x = autograd::leaky_relu(
      autograd::conv2d(images, params.at("conv_in.w"), params.at("conv_in.b"), 1, 1), kLeakySlope);
  for (int i = 0; i < cfg.num_downsampling_stages; ++i) {
    const std::string sp = "stage" + std::to_string(i);
    x = autograd::conv2d(x, params.at(sp + ".conv.w"), params.at(sp + ".conv.b"), 2, 1);
    x = batchnorm(x, params.at(sp + ".bn.gamma"), params.at(sp + ".bn.beta"));
    x = autograd::leaky_relu(x, kLeakySlope);
  }
  const Tensor4& fv = x.value();
  Var flat = autograd::reshape(x, fv.n, fv.c * fv.h * fv.w, 1, 1);
  Var hidden = autograd::leaky_relu(
      autograd::conv2d(flat, params.at("fc1.w"), params.at("fc1.b"), 1, 0), kLeakySlope);
  return autograd::conv2d(hidden, params.at("fc2.w"), params.at("fc2.b"), 1, 0);
}

LogitBatch discriminator_forward(const Tensor4& images, ParameterSet& params,
                                 const DiscriminatorConfig& cfg, LogitBatch::Origin origin) {
  autograd::NoGradGuard no_grad;
  Var logits = discriminator_forward_var(Var::leaf(images), params, cfg);
  LogitBatch out;
  out.origin = origin;
  out.values = logits.value().data;
  return out;
}

namespace {

double batch_mean(const std::vector<double>& v, const char* who) {
  if (v.empty()) throw Error(std::string(who) + ": empty logit batch");
  double sum = 0.0;
  for (double x : v) sum += x;
  return sum / static_cast<double>(v.size());
}

double softplus_scalar(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

double sigmoid_scalar(double x) {
  const double t = std::exp(-std::abs(x));
  return x >= 0.0 ? 1.0 / (1.0 + t) : t / (1.0 + t);
}

}  // namespace

std::vector<double> relativistic_d(const LogitBatch& c_primary, const LogitBatch& c_other) {
  const double other_mean = batch_mean(c_other.values, "relativistic_d");
  if (c_primary.values.empty()) throw Error("relativistic_d: empty logit batch");
  // The exact value is strictly inside (0,1) for any finite logits; keep the
  // returned doubles there too when the sigmoid saturates.
  const double lo = std::nextafter(0.0, 1.0);
  const double hi = std::nextafter(1.0, 0.0);
  std::vector<double> out;
  out.reserve(c_primary.values.size());
  for (double c : c_primary.values) {
    out.push_back(std::clamp(sigmoid_scalar(c - other_mean), lo, hi));
  }
  return out;
}

double discriminator_loss(const LogitBatch& c_real, const LogitBatch& c_fake) {
  const double mean_real = batch_mean(c_real.values, "discriminator_loss");
  const double mean_fake = batch_mean(c_fake.values, "discriminator_loss");
  // -log D(x_r,x_f) = softplus(-(C_r - mean_f)); -log(1-D(x_f,x_r)) = softplus(C_f - mean_r)
  double term_real = 0.0;
  for (double c : c_real.values) term_real += softplus_scalar(-(c - mean_fake));
  term_real /= static_cast<double>(c_real.values.size());
  double term_fake = 0.0;
  for (double c : c_fake.values) term_fake += softplus_scalar(c - mean_real);
  term_fake /= static_cast<double>(c_fake.values.size());
  return term_real + term_fake;
}

double generator_adv_loss(const LogitBatch& c_real, const LogitBatch& c_fake) {
  const double mean_real = batch_mean(c_real.values, "generator_adv_loss");
  const double mean_fake = batch_mean(c_fake.values, "generator_adv_loss");
  double term_real = 0.0;
  for (double c : c_real.values) term_real += softplus_scalar(c - mean_fake);
  term_real /= static_cast<double>(c_real.values.size());
  double term_fake = 0.0;
  for (double c : c_fake.values) term_fake += softplus_scalar(-(c - mean_real));
  term_fake /= static_cast<double>(c_fake.values.size());
  return term_fake + term_real;
}

namespace {

void require_nonempty(const Var& v, const char* who) {
  if (!v.defined() || v.value().size() == 0) throw Error(std::string(who) + ": empty logit batch");
}

}  // namespace

Var discriminator_loss_var(const Var& c_real, const Var& c_fake) {
  require_nonempty(c_real, "discriminator_loss");
  require_nonempty(c_fake, "discriminator_loss");
  Var term_real = autograd::mean_all(
      autograd::softplus(autograd::neg(autograd::sub_bcast(c_real, autograd::mean_all(c_fake)))));
  Var term_fake = autograd::mean_all(
      autograd::softplus(autograd::sub_bcast(c_fake, autograd::mean_all(c_real))));
  return autograd::add(term_real, term_fake);
}

Var generator_adv_loss_var(const Var& c_real, const Var& c_fake) {
  require_nonempty(c_real, "generator_adv_loss");
  require_nonempty(c_fake, "generator_adv_loss");
  Var term_real = autograd::mean_all(
      autograd::softplus(autograd::sub_bcast(c_real, autograd::mean_all(c_fake))));
  Var term_fake = autograd::mean_all(
      autograd::softplus(autograd::neg(autograd::sub_bcast(c_fake, autograd::mean_all(c_real)))));
  return autograd::add(term_fake, term_real);
}

}  // namespace msgdn
