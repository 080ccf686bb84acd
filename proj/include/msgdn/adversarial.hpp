#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msgdn/autograd.hpp"
#include "msgdn/model.hpp"
#include "msgdn/rng.hpp"

namespace msgdn {

// Raw discriminator outputs C(x) for one mini-batch. No sigmoid is applied
// here; the relativistic formulation applies it to logit differences.
struct LogitBatch {
  enum class Origin { Real, Fake };
  std::vector<double> values;
  Origin origin = Origin::Real;
};

struct DiscriminatorConfig {
  int base_channels = 64;
  int num_downsampling_stages = 4;
  int patch_size = 64;
  int fc_hidden = 100;
  int channel_cap_multiplier = 8;
  int input_channels = 3;

  void validate() const;
  std::string to_json_string() const;
  static DiscriminatorConfig from_json_string(const std::string& s);
  std::uint64_t fingerprint() const;
};

std::vector<LayerShape> discriminator_shapes(const DiscriminatorConfig& config);
ParameterSet init_discriminator_params(const DiscriminatorConfig& config, Rng& rng);

// Conv classifier: stride-1 stem, num_downsampling_stages stride-2
// conv+batchnorm+leaky-ReLU stages with doubling channels, then two dense
// layers to one logit per image. Returns shape (N,1,1,1).
autograd::Var discriminator_forward_var(const autograd::Var& images, ParameterSet& params,
                                        const DiscriminatorConfig& config);
LogitBatch discriminator_forward(const Tensor4& images, ParameterSet& params,
                                 const DiscriminatorConfig& config, LogitBatch::Origin origin);

// Relativistic average discriminator: sigmoid(C(x_i) - mean(c_other)).
std::vector<double> relativistic_d(const LogitBatch& c_primary, const LogitBatch& c_other);

// -E_r[log D(x_r,x_f)] - E_f[log(1-D(x_f,x_r))], via stable softplus.
double discriminator_loss(const LogitBatch& c_real, const LogitBatch& c_fake);
// -E_r[log(1-D(x_r,x_f))] - E_f[log D(x_f,x_r)]; the role-swapped mirror of
// discriminator_loss.
double generator_adv_loss(const LogitBatch& c_real, const LogitBatch& c_fake);

// Differentiable counterparts on (N,1,1,1) logit tensors.
autograd::Var discriminator_loss_var(const autograd::Var& c_real, const autograd::Var& c_fake);
autograd::Var generator_adv_loss_var(const autograd::Var& c_real, const autograd::Var& c_fake);

}  // namespace msgdn
