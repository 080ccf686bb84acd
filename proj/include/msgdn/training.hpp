#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "msgdn/adversarial.hpp"
#include "msgdn/data_pipeline.hpp"
#include "msgdn/losses.hpp"
#include "msgdn/model.hpp"

namespace msgdn {

struct PhaseSpec {
  std::string loss;  // "l1" | "mse" | "hybrid"
  int epochs = 1;
};

struct TrainPlan {
  std::string track = "objective";  // "objective" | "gan"
  std::vector<PhaseSpec> phases;
  int batch_size = 8;
  double base_lr = 1e-4;
  double lr_decay_factor = 0.5;
  int lr_decay_every_epochs = 100;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  int patch_size = 64;

  ModelConfig model;
  DiscriminatorConfig discriminator;
  double d_lr = -1.0;  // < 0 means base_lr
  int d_steps_per_g = 1;
  HybridLossWeights loss_weights;
  FeatureExtractorSpec extractor;       // consulted only when w_perc > 0
  std::string init_generator_from;      // optional checkpoint to warm-start from
  double collapse_threshold = 0.99;
  int collapse_window = 50;

  void validate() const;
  std::string to_json_string() const;
  static TrainPlan from_json_string(const std::string& s);
  static TrainPlan from_json_file(const std::string& path);
  double discriminator_lr() const { return d_lr < 0.0 ? base_lr : d_lr; }
};

// base_lr * factor^floor(epoch / every).
double lr_at(int epoch, const TrainPlan& plan);

// Per-ParameterSet Adam with bias correction. Moment tensors keep the
// parameter names so they serialize into checkpoints.
class Adam {
 public:
  Adam(ParameterSet& params, double beta1, double beta2, double eps);

  // Applies one update from the accumulated grads (missing grads are treated
  // as zero) and clears them.
  void step(double lr);

  double grad_norm() const;  // L2 over all grads, before step()
  std::int64_t step_count() const { return t_; }

  std::map<std::string, Tensor4> state_tensors(const std::string& prefix) const;
  void load_state(const std::map<std::string, Tensor4>& tensors, const std::string& prefix,
                  std::int64_t step_count);

 private:
  ParameterSet* params_;
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::map<std::string, Tensor4> m_, v_;
};

struct StepMetrics {
  std::string loss_name;
  double loss = 0.0;
  double grad_norm = 0.0;
  double l1 = 0.0;
  double adv = 0.0;
  double perc = 0.0;
  double d_loss = 0.0;
  double d_real_mean = 0.0;  // mean relativistic D(x_r, x_f)
  double d_fake_mean = 0.0;  // mean relativistic D(x_f, x_r)
  bool collapse_flag = false;
};

// One optimizer update of the generator on (original, compressed) batches.
// loss is "l1" or "mse". Throws on non-finite loss with the batch label in
// the message.
StepMetrics train_step_objective(const Tensor4& original, const Tensor4& compressed,
                                 ParameterSet& generator, const ModelConfig& config, Adam& opt,
                                 double lr, const std::string& loss,
                                 const std::string& batch_label);

// d_steps relativistic discriminator updates (real crops vs detached
// generator outputs), then one generator update on the hybrid loss.
StepMetrics train_step_gan(const Tensor4& original, const Tensor4& compressed,
                           ParameterSet& generator, const ModelConfig& g_config,
                           ParameterSet& discriminator, const DiscriminatorConfig& d_config,
                           Adam& g_opt, Adam& d_opt, double g_lr, double d_lr,
                           const HybridLossWeights& weights, const FeatureExtractor* extractor,
                           const std::string& batch_label, int d_steps = 1);

struct RunResult {
  std::string final_checkpoint;
  std::string final_generator;
  int epochs_run = 0;
  std::int64_t steps_run = 0;
};

// Executes the plan over the manifest: per epoch one random patch per pair in
// a shuffled order, checkpoints every epoch, structured metrics log, resume
// from the newest checkpoint.
RunResult run(const TrainPlan& plan, const DatasetManifest& manifest,
              const std::string& manifest_dir, const std::string& out_dir, bool resume);

// Checkpoint file helpers (named-tensor archive, kind "checkpoint").
struct CheckpointData {
  ModelConfig model_config;
  std::map<std::string, Tensor4> generator;
  std::optional<DiscriminatorConfig> disc_config;
  std::map<std::string, Tensor4> discriminator;
  std::map<std::string, Tensor4> adam_g;
  std::map<std::string, Tensor4> adam_d;
  std::int64_t adam_g_steps = 0;
  std::int64_t adam_d_steps = 0;
  int epoch = 0;
  std::int64_t global_step = 0;
  std::array<std::uint64_t, 4> rng_state{};
};
void save_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::string& path);

// Loads generator params from either a training checkpoint or a plain
// generator archive, verifying the stored config fingerprint.
std::pair<ModelConfig, std::map<std::string, Tensor4>> load_generator_archive(
    const std::string& path);
void save_generator_archive(const std::string& path, const ModelConfig& config,
                            const std::map<std::string, Tensor4>& values);

}  // namespace msgdn
