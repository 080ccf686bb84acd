#include "msgdn/model.hpp"

#include <cmath>

#include <json.hpp>

#include "msgdn/archive.hpp"
#include "msgdn/common.hpp"

namespace msgdn {

using autograd::Var;

void ModelConfig::validate() const {
  if (num_scales < 1) throw ConfigError("ModelConfig: num_scales must be >= 1");
  if (static_cast<int>(channels_per_scale.size()) != num_scales)
    throw ConfigError("ModelConfig: num_scales != len(channels_per_scale)");
  for (int c : channels_per_scale) {
    if (c < 1) throw ConfigError("ModelConfig: channel counts must be positive");
  }
  if (rdbs_per_grdb < 1 || convs_per_rdb < 1 || grdbs_per_scale < 1 || growth_rate < 1 ||
      kernel_size < 1 || input_channels < 1)
    throw ConfigError("ModelConfig: all counts must be positive");
  if (kernel_size % 2 == 0) throw ConfigError("ModelConfig: kernel_size must be odd");
  if (attention_cap < 1) throw ConfigError("ModelConfig: attention_cap must be positive");
  if (upsample_mode != "bilinear" && upsample_mode != "transposed")
    throw ConfigError("ModelConfig: unknown upsample_mode '" + upsample_mode + "'");
}

int ModelConfig::channels_at(int scale) const {
  return channels_per_scale.at(static_cast<std::size_t>(num_scales - 1 - scale));
}

int ModelConfig::pad_multiple() const { return 1 << (num_scales - 1); }

std::string ModelConfig::to_json_string() const {
  nlohmann::json j;
  j["num_scales"] = num_scales;
  j["channels_per_scale"] = channels_per_scale;
  j["rdbs_per_grdb"] = rdbs_per_grdb;
  j["convs_per_rdb"] = convs_per_rdb;
  j["grdbs_per_scale"] = grdbs_per_scale;
  j["growth_rate"] = growth_rate;
  j["kernel_size"] = kernel_size;
  j["input_channels"] = input_channels;
  j["use_global_residual"] = use_global_residual;
  j["attention_cap"] = attention_cap;
  j["upsample_mode"] = upsample_mode;
  return j.dump();
}

ModelConfig ModelConfig::from_json_string(const std::string& s) {
  nlohmann::json j = nlohmann::json::parse(s, nullptr, false);
  if (j.is_discarded()) throw ConfigError("ModelConfig: malformed JSON");
  ModelConfig c;
  c.num_scales = j.value("num_scales", c.num_scales);
  if (j.contains("channels_per_scale")) c.channels_per_scale = j["channels_per_scale"].get<std::vector<int>>();
  c.rdbs_per_grdb = j.value("rdbs_per_grdb", c.rdbs_per_grdb);
  c.convs_per_rdb = j.value("convs_per_rdb", c.convs_per_rdb);
  c.grdbs_per_scale = j.value("grdbs_per_scale", c.grdbs_per_scale);
  c.growth_rate = j.value("growth_rate", c.growth_rate);
  c.kernel_size = j.value("kernel_size", c.kernel_size);
  c.input_channels = j.value("input_channels", c.input_channels);
  c.use_global_residual = j.value("use_global_residual", c.use_global_residual);
  c.attention_cap = j.value("attention_cap", c.attention_cap);
  c.upsample_mode = j.value("upsample_mode", c.upsample_mode);
  c.validate();
  return c;
}

std::uint64_t ModelConfig::fingerprint() const { return fnv1a64("msgdn-arch-v1:" + to_json_string()); }

Var& ParameterSet::at(const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw ConfigError("ParameterSet: missing tensor '" + name + "'");
  return it->second;
}

const Var& ParameterSet::at(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw ConfigError("ParameterSet: missing tensor '" + name + "'");
  return it->second;
}

std::int64_t ParameterSet::total_count() const {
  std::int64_t total = 0;
  for (const auto& [name, v] : params) total += static_cast<std::int64_t>(v.value().size());
  return total;
}

bool ParameterSet::all_finite() const {
  for (const auto& [name, v] : params) {
    if (!v.value().all_finite()) return false;
  }
  return true;
}

void ParameterSet::require_finite(const char* where) const {
  for (const auto& [name, v] : params) {
    if (!v.value().all_finite())
      throw ConfigError(std::string(where) + ": non-finite values in parameter '" + name + "'");
  }
}

void ParameterSet::zero_grad() {
  for (auto& [name, v] : params) v.clear_grad();
}

std::map<std::string, Tensor4> ParameterSet::snapshot_values() const {
  std::map<std::string, Tensor4> out;
  for (const auto& [name, v] : params) out.emplace(name, v.value());
  return out;
}

void ParameterSet::load_values(const std::map<std::string, Tensor4>& values) {
  for (auto& [name, v] : params) {
    auto it = values.find(name);
    if (it == values.end()) throw ConfigError("ParameterSet: no value for '" + name + "'");
    if (!it->second.same_shape(v.value()))
      throw ConfigError("ParameterSet: shape mismatch for '" + name + "'");
    v.mutable_value() = it->second;
  }
}

namespace {

int bottleneck_channels(int c) { return c > 1 ? c / 2 : 1; }

void push_conv(std::vector<LayerShape>& out, const std::string& name, int co, int ci, int k) {
  out.push_back({name + ".w", {co, ci, k, k}});
  out.push_back({name + ".b", {1, co, 1, 1}});
}

}  // namespace

std::vector<LayerShape> generator_shapes(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<LayerShape> out;
  const int k = cfg.kernel_size;
  push_conv(out, "head", cfg.channels_at(0), cfg.input_channels, k);
  for (int s = 1; s < cfg.num_scales; ++s) {
    push_conv(out, "down" + std::to_string(s), cfg.channels_at(s), cfg.channels_at(s - 1), k);
  }
  for (int s = 0; s < cfg.num_scales; ++s) {
    const int c = cfg.channels_at(s);
    for (int g = 0; g < cfg.grdbs_per_scale; ++g) {
      const std::string gp = "scale" + std::to_string(s) + ".grdb" + std::to_string(g);
      for (int r = 0; r < cfg.rdbs_per_grdb; ++r) {
        const std::string rp = gp + ".rdb" + std::to_string(r);
        for (int i = 0; i < cfg.convs_per_rdb; ++i) {
          push_conv(out, rp + ".conv" + std::to_string(i), cfg.growth_rate,
                    c + i * cfg.growth_rate, k);
        }
        push_conv(out, rp + ".fuse", c, c + cfg.convs_per_rdb * cfg.growth_rate, 1);
      }
      push_conv(out, gp + ".fuse", c, cfg.rdbs_per_grdb * c, 1);
    }
  }
  for (int s = cfg.num_scales - 2; s >= 0; --s) {
    const std::string mp = "merge" + std::to_string(s);
    const int c = cfg.channels_at(s);
    const int c_low = cfg.channels_at(s + 1);
    if (cfg.upsample_mode == "transposed") {
      out.push_back({mp + ".up.w", {c_low, c_low, 2, 2}});
      out.push_back({mp + ".up.b", {1, c_low, 1, 1}});
    }
    push_conv(out, mp + ".reduce", c, c_low + c, 1);
    const int cb = bottleneck_channels(c);
    push_conv(out, mp + ".nl.theta", cb, c, 1);
    push_conv(out, mp + ".nl.phi", cb, c, 1);
    push_conv(out, mp + ".nl.g", cb, c, 1);
    push_conv(out, mp + ".nl.out", c, cb, 1);
  }
  push_conv(out, "recon", cfg.input_channels, cfg.channels_at(0), k);
  return out;
}

ParameterSet init_generator_params(const ModelConfig& cfg, Rng& rng) {
  ParameterSet ps;
  for (const auto& ls : generator_shapes(cfg)) {
    const auto& sh = ls.shape;
    Tensor4 t(sh[0], sh[1], sh[2], sh[3]);
    const bool is_weight = ls.name.size() > 2 && ls.name.substr(ls.name.size() - 2) == ".w";
    const bool zero_start = ls.name == "recon.w" || ls.name.find(".nl.out.w") != std::string::npos;
    if (is_weight && !zero_start) {
      const double fan_in = static_cast<double>(sh[1]) * sh[2] * sh[3];
      const double stddev = std::sqrt(2.0 / fan_in);
      for (auto& v : t.data) v = rng.normal() * stddev;
    }
    ps.params.emplace(ls.name, Var::leaf(std::move(t), true));
  }
  return ps;
}

std::int64_t generator_parameter_count(const ModelConfig& cfg) {
  std::int64_t total = 0;
  for (const auto& ls : generator_shapes(cfg)) {
    total += static_cast<std::int64_t>(ls.shape[0]) * ls.shape[1] * ls.shape[2] * ls.shape[3];
  }
  return total;
}

std::pair<Var, CropRecord> pad_to_multiple(const Var& image, int m) {
  if (m < 1) throw ConfigError("pad_to_multiple: m must be >= 1");
  const Tensor4& xv = image.value();
  const int ph = (xv.h + m - 1) / m * m;
  const int pw = (xv.w + m - 1) / m * m;
  CropRecord record{xv.h, xv.w};
  if (ph == xv.h && pw == xv.w) return {image, record};
  return {autograd::reflect_pad_br(image, ph, pw), record};
}

autograd::Var crop_back(const Var& padded, const CropRecord& record) {
  const Tensor4& v = padded.value();
  if (v.h == record.orig_h && v.w == record.orig_w) return padded;
  return autograd::crop_spatial(padded, 0, 0, record.orig_h, record.orig_w);
}

namespace {

Var conv_named(const Var& x, ParameterSet& params, const std::string& name, int stride, int pad) {
  return autograd::conv2d(x, params.at(name + ".w"), params.at(name + ".b"), stride, pad);
}

}  // namespace

Var rdb_forward(const Var& x, ParameterSet& params, const std::string& prefix, int growth_rate,
                int convs_per_rdb, int kernel_size) {
  if (params.at(prefix + ".conv0.w").value().n != growth_rate)
    throw ConfigError("rdb_forward: parameters at '" + prefix + "' were built for growth rate " +
                      std::to_string(params.at(prefix + ".conv0.w").value().n) + ", not " +
                      std::to_string(growth_rate));
  const int pad = kernel_size / 2;
  std::vector<Var> dense{x};
  for (int i = 0; i < convs_per_rdb; ++i) {
    Var input = dense.size() == 1 ? x : autograd::concat_channels(dense);
    Var conv = conv_named(input, params, prefix + ".conv" + std::to_string(i), 1, pad);
    dense.push_back(autograd::relu(conv));
  }
  Var fused = conv_named(autograd::concat_channels(dense), params, prefix + ".fuse", 1, 0);
  return autograd::add(x, fused);
}

Var grdb_forward(const Var& x, ParameterSet& params, const std::string& prefix,
                 const ModelConfig& config) {
  std::vector<Var> outputs;
  Var cur = x;
  for (int r = 0; r < config.rdbs_per_grdb; ++r) {
    cur = rdb_forward(cur, params, prefix + ".rdb" + std::to_string(r), config.growth_rate,
                      config.convs_per_rdb, config.kernel_size);
    outputs.push_back(cur);
  }
  Var fused = conv_named(autograd::concat_channels(outputs), params, prefix + ".fuse", 1, 0);
  return autograd::add(x, fused);
}

Var downsample(const Var& x, ParameterSet& params, const std::string& prefix, int kernel_size) {
  const Tensor4& xv = x.value();
  if (xv.h % 2 != 0 || xv.w % 2 != 0)
    throw Error("downsample: odd spatial dims (padding contract violated upstream)");
  return conv_named(x, params, prefix, 2, kernel_size / 2);
}

Var non_local(const Var& x, ParameterSet& params, const std::string& prefix, int attention_cap,
              Tensor4* attention_out) {
  const Tensor4& xv = x.value();
  const int positions = xv.h * xv.w;
  if (positions > attention_cap)
    throw Error("non_local: " + std::to_string(positions) + " positions exceed attention cap " +
                std::to_string(attention_cap) + "; apply tiled over smaller windows");

  Var theta = conv_named(x, params, prefix + ".theta", 1, 0);
  Var phi = conv_named(x, params, prefix + ".phi", 1, 0);
  Var g = conv_named(x, params, prefix + ".g", 1, 0);
  const int cb = theta.value().c;

  Var tq = autograd::transpose_mat(autograd::reshape(theta, xv.n, 1, cb, positions));
  Var km = autograd::reshape(phi, xv.n, 1, cb, positions);
  Var attention = autograd::softmax_lastdim(autograd::matmul(tq, km));
  if (attention_out != nullptr) *attention_out = attention.value();

  Var gm = autograd::transpose_mat(autograd::reshape(g, xv.n, 1, cb, positions));
  Var mixed = autograd::matmul(attention, gm);  // (N,1,P,cb)
  Var mixed_maps = autograd::reshape(autograd::transpose_mat(mixed), xv.n, cb, xv.h, xv.w);
  Var projected = conv_named(mixed_maps, params, prefix + ".out", 1, 0);
  return autograd::add(x, projected);
}

namespace {

// Applies non_local over a partition of the plane when it exceeds the cap.
Var non_local_tiled(const Var& x, ParameterSet& params, const std::string& prefix,
                    const ModelConfig& cfg) {
  const Tensor4& xv = x.value();
  if (xv.h * xv.w <= cfg.attention_cap) return non_local(x, params, prefix, cfg.attention_cap);

  const int tile = std::max(1, static_cast<int>(std::floor(std::sqrt(static_cast<double>(cfg.attention_cap)))));
  Var assembled;
  for (int y0 = 0; y0 < xv.h; y0 += tile) {
    const int th = std::min(tile, xv.h - y0);
    for (int x0 = 0; x0 < xv.w; x0 += tile) {
      const int tw = std::min(tile, xv.w - x0);
      Var piece = non_local(autograd::crop_spatial(x, y0, x0, th, tw), params, prefix,
                            cfg.attention_cap);
      Var embedded = autograd::embed_spatial(piece, xv.h, xv.w, y0, x0);
      assembled = assembled.defined() ? autograd::add(assembled, embedded) : embedded;
    }
  }
  return assembled;
}

}  // namespace

Var msgdn_forward(const Var& image, ParameterSet& params, const ModelConfig& cfg) {
  cfg.validate();
  const Tensor4& img = image.value();
  if (img.c != cfg.input_channels)
    throw ConfigError("msgdn_forward: expected " + std::to_string(cfg.input_channels) +
                      " input channels, got " + std::to_string(img.c));
  params.require_finite("msgdn_forward");

  auto [padded, record] = pad_to_multiple(image, cfg.pad_multiple());
  const int pad = cfg.kernel_size / 2;

  std::vector<Var> feats(static_cast<std::size_t>(cfg.num_scales));
  feats[0] = conv_named(padded, params, "head", 1, pad);
  for (int s = 1; s < cfg.num_scales; ++s) {
    feats[s] = downsample(feats[s - 1], params, "down" + std::to_string(s), cfg.kernel_size);
  }

  std::vector<Var> deep(static_cast<std::size_t>(cfg.num_scales));
  for (int s = 0; s < cfg.num_scales; ++s) {
    Var cur = feats[s];
    for (int g = 0; g < cfg.grdbs_per_scale; ++g) {
      cur = grdb_forward(cur, params, "scale" + std::to_string(s) + ".grdb" + std::to_string(g), cfg);
    }
    deep[s] = cur;
  }

  Var cur = deep[cfg.num_scales - 1];
  for (int s = cfg.num_scales - 2; s >= 0; --s) {
    const std::string mp = "merge" + std::to_string(s);
    Var up = cfg.upsample_mode == "transposed"
                 ? autograd::conv_transpose2x(cur, params.at(mp + ".up.w"), params.at(mp + ".up.b"))
                 : autograd::upsample_bilinear2x(cur);
    Var merged = conv_named(autograd::concat_channels({up, deep[s]}), params, mp + ".reduce", 1, 0);
    cur = non_local_tiled(merged, params, mp + ".nl", cfg);
  }

  Var recon = conv_named(cur, params, "recon", 1, pad);
  Var out = cfg.use_global_residual ? autograd::add(recon, padded) : recon;
  return crop_back(out, record);
}

}  // namespace msgdn
