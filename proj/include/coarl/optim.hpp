#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "coarl/autodiff.hpp"

namespace coarl::optim {

using ParamMap = std::map<std::string, ad::Tensor>;

/// sqrt of the sum of squared gradients over trainable params (missing grads count as 0).
double global_grad_norm(const ParamMap& params);

/// Scales all gradients so the global norm is at most max_norm. Returns the
/// norm before clipping. max_norm <= 0 disables clipping.
double clip_grad_norm(ParamMap& params, double max_norm);

void zero_grads(ParamMap& params);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam. Params with requires_grad == false are skipped and get
// no moment buffers.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamMap& params, double lr);

  std::uint64_t steps() const { return step_; }
  const AdamConfig& config() const { return cfg_; }
  bool has_state(const std::string& name) const { return m_.count(name) != 0; }
  const std::vector<double>& first_moment(const std::string& name) const { return m_.at(name); }
  const std::vector<double>& second_moment(const std::string& name) const { return v_.at(name); }

  /// Moments as tensors named "adam.m.<param>" / "adam.v.<param>".
  ParamMap state_tensors() const;
  /// Inverse of state_tensors; `steps` comes from checkpoint metadata.
  void load_state(const ParamMap& tensors, std::uint64_t steps);

 private:
  AdamConfig cfg_;
  std::uint64_t step_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

}  // namespace coarl::optim
