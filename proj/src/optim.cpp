#include "coarl/optim.hpp"

#include <cmath>

#include "coarl/error.hpp"

namespace coarl::optim {

double global_grad_norm(const ParamMap& params) {
  double sq = 0.0;
  for (const auto& [name, p] : params) {
    if (!p.requires_grad() || !p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_grad_norm(ParamMap& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm <= 0.0 || norm <= max_norm || !std::isfinite(norm)) return norm;
  const double s = max_norm / norm;
  for (auto& [name, p] : params) {
    if (!p.requires_grad() || !p.has_grad()) continue;
    for (double& g : p.grad()) g *= s;
  }
  return norm;
}

void zero_grads(ParamMap& params) {
  for (auto& [name, p] : params) {
    if (p.has_grad()) p.zero_grad();
  }
}

void Adam::step(ParamMap& params, double lr) {
  ++step_;
  const double t = static_cast<double>(step_);
  const double c1 = 1.0 - std::pow(cfg_.beta1, t);
  const double c2 = 1.0 - std::pow(cfg_.beta2, t);
  for (auto& [name, p] : params) {
    if (!p.requires_grad()) continue;
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(p.numel(), 0.0);
      v.assign(p.numel(), 0.0);
    }
    if (m.size() != p.numel()) {
      throw Error("shape_mismatch", "adam: moment buffer for " + name + " does not match the parameter");
    }
    const bool has_grad = p.has_grad();  // a missing gradient is a zero gradient
    std::span<double> w = p.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = has_grad ? p.grad()[i] : 0.0;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mh = m[i] / c1;
      const double vh = v[i] / c2;
      w[i] -= lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
  }
}

ParamMap Adam::state_tensors() const {
  ParamMap out;
  for (const auto& [name, m] : m_) {
    out.emplace("adam.m." + name, ad::Tensor::from({m.size()}, m));
    out.emplace("adam.v." + name, ad::Tensor::from({m.size()}, v_.at(name)));
  }
  return out;
}

void Adam::load_state(const ParamMap& tensors, std::uint64_t steps) {
  m_.clear();
  v_.clear();
  const std::string pm = "adam.m.", pv = "adam.v.";
  for (const auto& [key, t] : tensors) {
    if (key.rfind(pm, 0) == 0) m_[key.substr(pm.size())] = t.values();
    if (key.rfind(pv, 0) == 0) v_[key.substr(pv.size())] = t.values();
  }
  for (const auto& [name, m] : m_) {
    auto it = v_.find(name);
    if (it == v_.end() || it->second.size() != m.size()) {
      throw Error("corrupt_checkpoint", "adam state for " + name + " is incomplete");
    }
  }
  step_ = steps;
}

}  // namespace coarl::optim
