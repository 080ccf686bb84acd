#include "msgdn/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>

#include <json.hpp>

#include "msgdn/archive.hpp"
#include "msgdn/common.hpp"
#include "msgdn/csv.hpp"
#include "msgdn/image_io.hpp"

namespace fs = std::filesystem;

namespace msgdn {

using autograd::Var;

void TrainPlan::validate() const {
  if (track != "objective" && track != "gan")
    throw ConfigError("TrainPlan: unknown track '" + track + "'");
  if (phases.empty()) throw ConfigError("TrainPlan: phases must be non-empty");
  for (const auto& p : phases) {
    if (p.epochs < 1) throw ConfigError("TrainPlan: phase epochs must be >= 1");
    if (p.loss != "l1" && p.loss != "mse" && p.loss != "hybrid")
      throw ConfigError("TrainPlan: unknown loss '" + p.loss + "'");
    if (p.loss == "hybrid" && track != "gan")
      throw ConfigError("TrainPlan: hybrid loss requires the gan track");
  }
  if (batch_size < 1) throw ConfigError("TrainPlan: batch_size must be >= 1");
  if (base_lr <= 0.0) throw ConfigError("TrainPlan: base_lr must be positive");
  if (lr_decay_factor <= 0.0 || lr_decay_factor > 1.0)
    throw ConfigError("TrainPlan: lr_decay_factor must be in (0, 1]");
  if (lr_decay_every_epochs < 1) throw ConfigError("TrainPlan: lr_decay_every_epochs must be >= 1");
  if (patch_size < 1) throw ConfigError("TrainPlan: patch_size must be >= 1");
  if (d_steps_per_g < 1) throw ConfigError("TrainPlan: d_steps_per_g must be >= 1");
  model.validate();
  if (track == "gan") {
    discriminator.validate();
    if (discriminator.patch_size != patch_size)
      throw ConfigError("TrainPlan: discriminator patch_size must equal training patch_size");
  }
}

std::string TrainPlan::to_json_string() const {
  nlohmann::json j;
  j["track"] = track;
  nlohmann::json phases_json = nlohmann::json::array();
  for (const auto& p : phases) phases_json.push_back({{"loss", p.loss}, {"epochs", p.epochs}});
  j["phases"] = phases_json;
  j["batch_size"] = batch_size;
  j["base_lr"] = base_lr;
  j["lr_decay_factor"] = lr_decay_factor;
  j["lr_decay_every_epochs"] = lr_decay_every_epochs;
  j["adam_beta1"] = adam_beta1;
  j["adam_beta2"] = adam_beta2;
  j["adam_eps"] = adam_eps;
  j["seed"] = seed;
  j["patch_size"] = patch_size;
  j["model"] = nlohmann::json::parse(model.to_json_string());
  j["discriminator"] = nlohmann::json::parse(discriminator.to_json_string());
  j["d_lr"] = d_lr;
  j["d_steps_per_g"] = d_steps_per_g;
  j["loss_weights"] = {{"w_l1", loss_weights.w_l1},
                       {"w_adv", loss_weights.w_adv},
                       {"w_perc", loss_weights.w_perc}};
  j["extractor"] = {{"backbone", extractor.backbone},
                    {"tap_layer", extractor.tap_layer},
                    {"weights_path", extractor.weights_path}};
  j["init_generator_from"] = init_generator_from;
  j["collapse_threshold"] = collapse_threshold;
  j["collapse_window"] = collapse_window;
  return j.dump();
}

TrainPlan TrainPlan::from_json_string(const std::string& s) {
  nlohmann::json j = nlohmann::json::parse(s, nullptr, false);
  if (j.is_discarded()) throw ConfigError("TrainPlan: malformed JSON");
  TrainPlan p;
  p.track = j.value("track", p.track);
  if (j.contains("phases")) {
    p.phases.clear();
    for (const auto& ph : j["phases"]) {
      p.phases.push_back({ph.value("loss", "l1"), ph.value("epochs", 1)});
    }
  }
  p.batch_size = j.value("batch_size", p.batch_size);
  p.base_lr = j.value("base_lr", p.base_lr);
  p.lr_decay_factor = j.value("lr_decay_factor", p.lr_decay_factor);
  p.lr_decay_every_epochs = j.value("lr_decay_every_epochs", p.lr_decay_every_epochs);
  p.adam_beta1 = j.value("adam_beta1", p.adam_beta1);
  p.adam_beta2 = j.value("adam_beta2", p.adam_beta2);
  p.adam_eps = j.value("adam_eps", p.adam_eps);
  p.seed = j.value("seed", p.seed);
  p.patch_size = j.value("patch_size", p.patch_size);
  if (j.contains("model")) p.model = ModelConfig::from_json_string(j["model"].dump());
  if (j.contains("discriminator"))
    p.discriminator = DiscriminatorConfig::from_json_string(j["discriminator"].dump());
  p.d_lr = j.value("d_lr", p.d_lr);
  p.d_steps_per_g = j.value("d_steps_per_g", p.d_steps_per_g);
  if (j.contains("loss_weights")) {
    const auto& w = j["loss_weights"];
    p.loss_weights.w_l1 = w.value("w_l1", p.loss_weights.w_l1);
    p.loss_weights.w_adv = w.value("w_adv", p.loss_weights.w_adv);
    p.loss_weights.w_perc = w.value("w_perc", p.loss_weights.w_perc);
  }
  if (j.contains("extractor")) {
    const auto& e = j["extractor"];
    p.extractor.backbone = e.value("backbone", p.extractor.backbone);
    p.extractor.tap_layer = e.value("tap_layer", p.extractor.tap_layer);
    p.extractor.weights_path = e.value("weights_path", p.extractor.weights_path);
  }
  p.init_generator_from = j.value("init_generator_from", p.init_generator_from);
  p.collapse_threshold = j.value("collapse_threshold", p.collapse_threshold);
  p.collapse_window = j.value("collapse_window", p.collapse_window);
  p.validate();
  return p;
}

TrainPlan TrainPlan::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("TrainPlan: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json_string(text);
}

double lr_at(int epoch, const TrainPlan& plan) {
  if (epoch < 0) throw ConfigError("lr_at: negative epoch");
  const int decays = epoch / plan.lr_decay_every_epochs;
  return plan.base_lr * std::pow(plan.lr_decay_factor, decays);
}

// --- Adam ---

Adam::Adam(ParameterSet& params, double beta1, double beta2, double eps)
    : params_(&params), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& [name, v] : params.params) {
    const Tensor4& t = v.value();
    m_.emplace(name, Tensor4::zeros(t.n, t.c, t.h, t.w));
    v_.emplace(name, Tensor4::zeros(t.n, t.c, t.h, t.w));
  }
}

double Adam::grad_norm() const {
  double sum = 0.0;
  for (const auto& [name, v] : params_->params) {
    const Tensor4& g = v.grad();
    if (g.empty()) continue;
    for (double x : g.data) sum += x * x;
  }
  return std::sqrt(sum);
}

void Adam::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& [name, var] : params_->params) {
    Tensor4& m = m_.at(name);
    Tensor4& v = v_.at(name);
    Tensor4& p = var.mutable_value();
    const Tensor4& g = var.grad();
    const bool has_grad = !g.empty();
    const std::size_t sz = p.size();
    for (std::size_t i = 0; i < sz; ++i) {
      const double gi = has_grad ? g.data[i] : 0.0;
      m.data[i] = beta1_ * m.data[i] + (1.0 - beta1_) * gi;
      v.data[i] = beta2_ * v.data[i] + (1.0 - beta2_) * gi * gi;
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      p.data[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
    var.clear_grad();
  }
}

std::map<std::string, Tensor4> Adam::state_tensors(const std::string& prefix) const {
  std::map<std::string, Tensor4> out;
  for (const auto& [name, t] : m_) out.emplace(prefix + ".m." + name, t);
  for (const auto& [name, t] : v_) out.emplace(prefix + ".v." + name, t);
  return out;
}

void Adam::load_state(const std::map<std::string, Tensor4>& tensors, const std::string& prefix,
                      std::int64_t step_count) {
  for (auto& [name, t] : m_) {
    auto it = tensors.find(prefix + ".m." + name);
    if (it == tensors.end()) throw ConfigError("Adam: checkpoint missing state for " + name);
    if (!it->second.same_shape(t)) throw ConfigError("Adam: state shape mismatch for " + name);
    t = it->second;
  }
  for (auto& [name, t] : v_) {
    auto it = tensors.find(prefix + ".v." + name);
    if (it == tensors.end()) throw ConfigError("Adam: checkpoint missing state for " + name);
    if (!it->second.same_shape(t)) throw ConfigError("Adam: state shape mismatch for " + name);
    t = it->second;
  }
  t_ = step_count;
}

// --- steps ---

namespace {

void require_uniform_batch(const Tensor4& a, const Tensor4& b, const char* who) {
  if (!a.same_shape(b)) throw ShapeError(std::string(who) + ": batch shapes differ");
}

void require_finite_loss(double loss, const StepMetrics& sm, const std::string& label) {
  if (std::isfinite(loss)) return;
  throw Error("non-finite loss on batch [" + label + "]: loss=" + fmt_g17(loss) +
              " l1=" + fmt_g17(sm.l1) + " adv=" + fmt_g17(sm.adv) + " perc=" + fmt_g17(sm.perc));
}

double vector_mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

StepMetrics train_step_objective(const Tensor4& original, const Tensor4& compressed,
                                 ParameterSet& generator, const ModelConfig& config, Adam& opt,
                                 double lr, const std::string& loss,
                                 const std::string& batch_label) {
  require_uniform_batch(original, compressed, "train_step_objective");
  if (loss != "l1" && loss != "mse")
    throw ConfigError("train_step_objective: loss must be l1 or mse");

  Var pred = msgdn_forward(Var::leaf(compressed), generator, config);
  Var target = Var::leaf(original);
  Var l = loss == "l1" ? l1_loss_var(pred, target) : mse_loss_var(pred, target);

  StepMetrics sm;
  sm.loss_name = loss;
  sm.loss = l.value().data[0];
  sm.l1 = loss == "l1" ? sm.loss : 0.0;
  require_finite_loss(sm.loss, sm, batch_label);

  autograd::backward(l);
  sm.grad_norm = opt.grad_norm();
  opt.step(lr);
  return sm;
}

StepMetrics train_step_gan(const Tensor4& original, const Tensor4& compressed,
                           ParameterSet& generator, const ModelConfig& g_config,
                           ParameterSet& discriminator, const DiscriminatorConfig& d_config,
                           Adam& g_opt, Adam& d_opt, double g_lr, double d_lr,
                           const HybridLossWeights& weights, const FeatureExtractor* extractor,
                           const std::string& batch_label, int d_steps) {
  require_uniform_batch(original, compressed, "train_step_gan");
  if (d_steps < 1) throw ConfigError("train_step_gan: d_steps must be >= 1");
  StepMetrics sm;
  sm.loss_name = "hybrid";

  const bool use_adv = weights.w_adv != 0.0;
  if (use_adv) {
    // Discriminator updates on real crops vs generator outputs severed from
    // the generator graph.
    Tensor4 fake_detached;
    {
      autograd::NoGradGuard no_grad;
      fake_detached = msgdn_forward(Var::leaf(compressed), generator, g_config).value();
    }
    for (int step = 0; step < d_steps; ++step) {
      Var c_real = discriminator_forward_var(Var::leaf(original), discriminator, d_config);
      Var c_fake = discriminator_forward_var(Var::leaf(fake_detached), discriminator, d_config);
      LogitBatch real_batch{c_real.value().data, LogitBatch::Origin::Real};
      LogitBatch fake_batch{c_fake.value().data, LogitBatch::Origin::Fake};
      sm.d_real_mean = vector_mean(relativistic_d(real_batch, fake_batch));
      sm.d_fake_mean = vector_mean(relativistic_d(fake_batch, real_batch));

      Var d_loss = discriminator_loss_var(c_real, c_fake);
      sm.d_loss = d_loss.value().data[0];
      if (!std::isfinite(sm.d_loss))
        throw Error("non-finite discriminator loss on batch [" + batch_label + "]");
      autograd::backward(d_loss);
      d_opt.step(d_lr);
    }
  }

  // Generator update on Eq. 3.
  Var fake = msgdn_forward(Var::leaf(compressed), generator, g_config);
  Var target = Var::leaf(original);
  Var c_real2, c_fake2;
  if (use_adv) {
    c_real2 = discriminator_forward_var(Var::leaf(original), discriminator, d_config);
    c_fake2 = discriminator_forward_var(fake, discriminator, d_config);
  }
  HybridBreakdown bd;
  Var total = hybrid_loss_var(fake, target, c_real2, c_fake2, weights, extractor, &bd);
  sm.loss = bd.total;
  sm.l1 = bd.l1;
  sm.adv = bd.adv;
  sm.perc = bd.perc;
  require_finite_loss(sm.loss, sm, batch_label);

  autograd::backward(total);
  // The adversarial term also deposits grads in D; they are discarded, the
  // generator step must not move the discriminator.
  sm.grad_norm = g_opt.grad_norm();
  g_opt.step(g_lr);
  discriminator.zero_grad();
  return sm;
}

// --- checkpoint files ---

namespace {

void validate_against_shapes(const std::vector<LayerShape>& shapes,
                             const std::map<std::string, Tensor4>& values, const char* what) {
  if (shapes.size() != values.size())
    throw ConfigError(std::string(what) + ": tensor count mismatch (" +
                      std::to_string(values.size()) + " stored, " + std::to_string(shapes.size()) +
                      " expected)");
  for (const auto& ls : shapes) {
    auto it = values.find(ls.name);
    if (it == values.end()) throw ConfigError(std::string(what) + ": missing tensor " + ls.name);
    const Tensor4& t = it->second;
    if (t.n != ls.shape[0] || t.c != ls.shape[1] || t.h != ls.shape[2] || t.w != ls.shape[3])
      throw ConfigError(std::string(what) + ": shape mismatch for " + ls.name);
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointData& data) {
  Archive a;
  a.kind = "checkpoint";
  nlohmann::json meta;
  meta["epoch"] = data.epoch;
  meta["global_step"] = data.global_step;
  meta["model_config"] = nlohmann::json::parse(data.model_config.to_json_string());
  meta["fingerprint"] = std::to_string(data.model_config.fingerprint());
  if (data.disc_config.has_value()) {
    meta["disc_config"] = nlohmann::json::parse(data.disc_config->to_json_string());
    meta["disc_fingerprint"] = std::to_string(data.disc_config->fingerprint());
  }
  meta["adam_g_steps"] = data.adam_g_steps;
  meta["adam_d_steps"] = data.adam_d_steps;
  meta["rng_state"] = data.rng_state;
  a.set_meta(meta);

  for (const auto& [name, t] : data.generator) a.tensors.emplace("gen." + name, t);
  for (const auto& [name, t] : data.discriminator) a.tensors.emplace("disc." + name, t);
  for (const auto& [name, t] : data.adam_g) a.tensors.emplace(name, t);  // adam_g.* prefixed
  for (const auto& [name, t] : data.adam_d) a.tensors.emplace(name, t);
  a.save(path);
}

CheckpointData load_checkpoint(const std::string& path) {
  Archive a = Archive::load(path);
  if (a.kind != "checkpoint") throw IoError("checkpoint: archive kind is '" + a.kind + "'");
  const nlohmann::json meta = a.meta();

  CheckpointData d;
  d.model_config = ModelConfig::from_json_string(meta["model_config"].dump());
  const std::string stored_fp = meta.value("fingerprint", "");
  if (stored_fp != std::to_string(d.model_config.fingerprint()))
    throw ConfigError("checkpoint: config fingerprint mismatch in " + path);
  d.epoch = meta.value("epoch", 0);
  d.global_step = meta.value("global_step", static_cast<std::int64_t>(0));
  d.adam_g_steps = meta.value("adam_g_steps", static_cast<std::int64_t>(0));
  d.adam_d_steps = meta.value("adam_d_steps", static_cast<std::int64_t>(0));
  if (meta.contains("rng_state")) {
    const auto rs = meta["rng_state"].get<std::vector<std::uint64_t>>();
    if (rs.size() != 4) throw ConfigError("checkpoint: bad rng state");
    std::copy(rs.begin(), rs.end(), d.rng_state.begin());
  }
  if (meta.contains("disc_config"))
    d.disc_config = DiscriminatorConfig::from_json_string(meta["disc_config"].dump());

  for (const auto& [name, t] : a.tensors) {
    if (name.rfind("gen.", 0) == 0) d.generator.emplace(name.substr(4), t);
    else if (name.rfind("disc.", 0) == 0) d.discriminator.emplace(name.substr(5), t);
    else if (name.rfind("adam_g.", 0) == 0) d.adam_g.emplace(name, t);
    else if (name.rfind("adam_d.", 0) == 0) d.adam_d.emplace(name, t);
    else throw IoError("checkpoint: unexpected tensor '" + name + "' in " + path);
  }
  validate_against_shapes(generator_shapes(d.model_config), d.generator, "checkpoint generator");
  if (d.disc_config.has_value())
    validate_against_shapes(discriminator_shapes(*d.disc_config), d.discriminator,
                            "checkpoint discriminator");
  return d;
}

void save_generator_archive(const std::string& path, const ModelConfig& config,
                            const std::map<std::string, Tensor4>& values) {
  Archive a;
  a.kind = "generator";
  nlohmann::json meta;
  meta["model_config"] = nlohmann::json::parse(config.to_json_string());
  meta["fingerprint"] = std::to_string(config.fingerprint());
  a.set_meta(meta);
  a.tensors = values;
  a.save(path);
}

std::pair<ModelConfig, std::map<std::string, Tensor4>> load_generator_archive(
    const std::string& path) {
  Archive probe = Archive::load(path);
  if (probe.kind == "checkpoint") {
    CheckpointData d = load_checkpoint(path);
    return {d.model_config, std::move(d.generator)};
  }
  if (probe.kind != "generator")
    throw IoError("generator archive: unexpected kind '" + probe.kind + "' in " + path);
  const nlohmann::json meta = probe.meta();
  ModelConfig config = ModelConfig::from_json_string(meta["model_config"].dump());
  if (meta.value("fingerprint", "") != std::to_string(config.fingerprint()))
    throw ConfigError("generator archive: config fingerprint mismatch in " + path);
  validate_against_shapes(generator_shapes(config), probe.tensors, "generator archive");
  return {config, std::move(probe.tensors)};
}

// --- orchestration ---

namespace {

struct LoadedPair {
  Tensor4 original;
  Tensor4 compressed;
  std::string label;
};

struct ScheduleEntry {
  int pair_index;
  int y0;
  int x0;
};

std::vector<ScheduleEntry> epoch_schedule(const std::vector<LoadedPair>& pairs, int patch,
                                          std::uint64_t seed, int epoch) {
  Rng rng(seed ^ (0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(epoch + 1)));
  std::vector<ScheduleEntry> entries;
  entries.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto [y0, x0] = sample_window(pairs[i].original.h, pairs[i].original.w, patch, rng);
    entries.push_back({static_cast<int>(i), y0, x0});
  }
  for (std::size_t i = entries.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(entries[i - 1], entries[j]);
  }
  return entries;
}

Tensor4 gather_crops(const std::vector<LoadedPair>& pairs,
                     const std::vector<ScheduleEntry>& batch, int patch, bool original) {
  Tensor4 out(static_cast<int>(batch.size()), 3, patch, patch);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Tensor4& src =
        original ? pairs[static_cast<std::size_t>(batch[b].pair_index)].original
                 : pairs[static_cast<std::size_t>(batch[b].pair_index)].compressed;
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < patch; ++y) {
        for (int x = 0; x < patch; ++x) {
          out.at(static_cast<int>(b), c, y, x) = src.at(0, c, batch[b].y0 + y, batch[b].x0 + x);
        }
      }
    }
  }
  return out;
}

std::string phase_at(const TrainPlan& plan, int epoch, int* phase_index) {
  int e = epoch;
  for (std::size_t i = 0; i < plan.phases.size(); ++i) {
    if (e < plan.phases[i].epochs) {
      if (phase_index != nullptr) *phase_index = static_cast<int>(i);
      return plan.phases[i].loss;
    }
    e -= plan.phases[i].epochs;
  }
  throw Error("phase_at: epoch out of range");
}

int total_epochs(const TrainPlan& plan) {
  int total = 0;
  for (const auto& p : plan.phases) total += p.epochs;
  return total;
}

std::string checkpoint_path(const std::string& out_dir, int epoch) {
  return (fs::path(out_dir) / ("ckpt_epoch" + std::to_string(epoch) + ".msgt")).string();
}

int newest_checkpoint_epoch(const std::string& out_dir) {
  int best = -1;
  if (!fs::exists(out_dir)) return best;
  for (const auto& e : fs::directory_iterator(out_dir)) {
    const std::string name = e.path().filename().string();
    int epoch = -1;
    if (std::sscanf(name.c_str(), "ckpt_epoch%d.msgt", &epoch) == 1) best = std::max(best, epoch);
  }
  return best;
}

void truncate_metrics_log(const std::string& path, int keep_up_to_epoch) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::vector<std::string> kept;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) continue;
    if (j.value("epoch", 0) <= keep_up_to_epoch) kept.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : kept) out << l << "\n";
}

}  // namespace

RunResult run(const TrainPlan& plan, const DatasetManifest& manifest,
              const std::string& manifest_dir, const std::string& out_dir, bool resume) {
  plan.validate();
  if (manifest.pairs.empty()) throw ConfigError("run: empty manifest");
  fs::create_directories(out_dir);

  // Pairs in path-sorted order; whole images cached in memory.
  std::vector<ImagePair> sorted_pairs = manifest.pairs;
  std::sort(sorted_pairs.begin(), sorted_pairs.end(), [](const ImagePair& a, const ImagePair& b) {
    return std::tie(a.original_path, a.qp) < std::tie(b.original_path, b.qp);
  });
  std::vector<LoadedPair> pairs;
  for (const auto& p : sorted_pairs) {
    LoadedPair lp;
    lp.original = read_png(resolve_path(manifest_dir, p.original_path));
    lp.compressed = read_png(resolve_path(manifest_dir, p.compressed_path));
    lp.label = p.original_path + "@qp" + std::to_string(p.qp);
    if (!lp.original.same_shape(lp.compressed))
      throw ConfigError("run: pair images differ in size for " + lp.label);
    if (lp.original.h < plan.patch_size || lp.original.w < plan.patch_size)
      throw ConfigError("run: image smaller than patch_size for " + lp.label);
    pairs.push_back(std::move(lp));
  }

  const bool gan = plan.track == "gan";
  Rng master(plan.seed);
  ParameterSet generator = init_generator_params(plan.model, master);
  ParameterSet discriminator;
  if (gan) discriminator = init_discriminator_params(plan.discriminator, master);

  if (!plan.init_generator_from.empty()) {
    auto [cfg, values] = load_generator_archive(plan.init_generator_from);
    if (cfg.fingerprint() != plan.model.fingerprint())
      throw ConfigError("run: init_generator_from checkpoint was built for a different model config");
    generator.load_values(values);
  }

  Adam g_opt(generator, plan.adam_beta1, plan.adam_beta2, plan.adam_eps);
  std::optional<Adam> d_opt;
  if (gan) d_opt.emplace(discriminator, plan.adam_beta1, plan.adam_beta2, plan.adam_eps);

  std::unique_ptr<FeatureExtractor> extractor;
  if (gan && plan.loss_weights.w_perc != 0.0) {
    for (const auto& ph : plan.phases) {
      if (ph.loss == "hybrid") {
        extractor = std::make_unique<FeatureExtractor>(FeatureExtractor::load(plan.extractor));
        break;
      }
    }
  }

  const std::string metrics_path = (fs::path(out_dir) / "metrics.jsonl").string();
  int start_epoch = 0;
  std::int64_t global_step = 0;

  if (resume) {
    const int ck_epoch = newest_checkpoint_epoch(out_dir);
    if (ck_epoch < 0) {
      // nothing to resume; discard any partial log from a run that died
      // before its first checkpoint
      std::ofstream clear(metrics_path, std::ios::trunc);
    }
    if (ck_epoch >= 0) {
      CheckpointData ck = load_checkpoint(checkpoint_path(out_dir, ck_epoch));
      if (ck.model_config.fingerprint() != plan.model.fingerprint())
        throw ConfigError("run: checkpoint config does not match the plan's model config");
      generator.load_values(ck.generator);
      g_opt.load_state(ck.adam_g, "adam_g", ck.adam_g_steps);
      if (gan) {
        if (!ck.disc_config.has_value())
          throw ConfigError("run: gan resume needs a checkpoint with discriminator state");
        discriminator.load_values(ck.discriminator);
        d_opt->load_state(ck.adam_d, "adam_d", ck.adam_d_steps);
      }
      master.set_state(ck.rng_state);
      start_epoch = ck.epoch + 1;
      global_step = ck.global_step;
      truncate_metrics_log(metrics_path, ck.epoch);
    }
  } else {
    std::ofstream clear(metrics_path, std::ios::trunc);
  }

  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) throw IoError("run: cannot open metrics log " + metrics_path);

  const int epochs = total_epochs(plan);
  int collapse_run = 0;
  RunResult result;

  for (int epoch = start_epoch; epoch < epochs; ++epoch) {
    int phase_index = 0;
    const std::string loss_name = phase_at(plan, epoch, &phase_index);
    const double lr = lr_at(epoch, plan);
    const double d_lr =
        plan.discriminator_lr() * std::pow(plan.lr_decay_factor, epoch / plan.lr_decay_every_epochs);

    const auto schedule = epoch_schedule(pairs, plan.patch_size, plan.seed, epoch);
    for (std::size_t off = 0; off < schedule.size(); off += static_cast<std::size_t>(plan.batch_size)) {
      const std::size_t end = std::min(schedule.size(), off + static_cast<std::size_t>(plan.batch_size));
      std::vector<ScheduleEntry> batch(schedule.begin() + static_cast<std::ptrdiff_t>(off),
                                       schedule.begin() + static_cast<std::ptrdiff_t>(end));
      Tensor4 orig = gather_crops(pairs, batch, plan.patch_size, true);
      Tensor4 comp = gather_crops(pairs, batch, plan.patch_size, false);
      std::string label;
      for (const auto& e : batch) {
        if (!label.empty()) label += ",";
        label += pairs[static_cast<std::size_t>(e.pair_index)].label;
      }

      StepMetrics sm;
      if (loss_name == "hybrid") {
        sm = train_step_gan(orig, comp, generator, plan.model, discriminator, plan.discriminator,
                            g_opt, *d_opt, lr, d_lr, plan.loss_weights, extractor.get(), label,
                            plan.d_steps_per_g);
        collapse_run = sm.d_real_mean > plan.collapse_threshold ? collapse_run + 1 : 0;
        sm.collapse_flag = collapse_run >= plan.collapse_window;
      } else {
        sm = train_step_objective(orig, comp, generator, plan.model, g_opt, lr, loss_name, label);
      }

      nlohmann::json j;
      j["step"] = global_step;
      j["epoch"] = epoch;
      j["phase"] = phase_index;
      j["loss_name"] = sm.loss_name;
      j["loss"] = sm.loss;
      j["grad_norm"] = sm.grad_norm;
      j["lr"] = lr;
      if (loss_name == "hybrid") {
        j["l1"] = sm.l1;
        j["adv"] = sm.adv;
        j["perc"] = sm.perc;
        j["d_loss"] = sm.d_loss;
        j["d_real_mean"] = sm.d_real_mean;
        j["d_fake_mean"] = sm.d_fake_mean;
        j["collapse_flag"] = sm.collapse_flag;
      }
      metrics << j.dump() << "\n";
      metrics.flush();
      ++global_step;
    }

    CheckpointData ck;
    ck.model_config = plan.model;
    ck.generator = generator.snapshot_values();
    ck.adam_g = g_opt.state_tensors("adam_g");
    ck.adam_g_steps = g_opt.step_count();
    if (gan) {
      ck.disc_config = plan.discriminator;
      ck.discriminator = discriminator.snapshot_values();
      ck.adam_d = d_opt->state_tensors("adam_d");
      ck.adam_d_steps = d_opt->step_count();
    }
    ck.epoch = epoch;
    ck.global_step = global_step;
    ck.rng_state = master.state();
    save_checkpoint(checkpoint_path(out_dir, epoch), ck);
    result.final_checkpoint = checkpoint_path(out_dir, epoch);
    result.epochs_run = epoch + 1;
  }

  result.steps_run = global_step;
  result.final_generator = (fs::path(out_dir) / "generator_final.msgt").string();
  save_generator_archive(result.final_generator, plan.model, generator.snapshot_values());
  if (result.final_checkpoint.empty() && start_epoch > 0)
    result.final_checkpoint = checkpoint_path(out_dir, start_epoch - 1);
  return result;
}

}  // namespace msgdn
