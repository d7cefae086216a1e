#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "coarl/autodiff.hpp"
#include "coarl/error.hpp"
#include "coarl/rng.hpp"

namespace testutil {

using coarl::ad::Tensor;

inline Tensor random_tensor(coarl::ad::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  coarl::Rng rng(seed);
  std::vector<double> v(coarl::ad::shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// |analytic - numeric| / max(|analytic|, |numeric|, floor). The floor keeps
// gradients that are zero up to rounding from blowing the ratio up.
inline double rel_error(double a, double n, double floor = 1.0) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

struct GradCheck {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

// Compares the tape gradient of f(inputs) with central differences for every
// element of every input.
inline GradCheck gradcheck(std::vector<Tensor> inputs, const std::function<Tensor(std::vector<Tensor>&)>& f,
                           double h = 1e-6, double floor = 1e-8) {
  for (auto& t : inputs) t.zero_grad();
  {
    coarl::ad::Tape tape;
    coarl::ad::TapeScope scope(&tape);
    Tensor loss = f(inputs);
    tape.backward(loss);
  }
  GradCheck out;
  coarl::ad::TapeScope off(nullptr);
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double x0 = t.values()[i];
      t.values()[i] = x0 + h;
      const double fp = f(inputs).item();
      t.values()[i] = x0 - h;
      const double fm = f(inputs).item();
      t.values()[i] = x0;
      const double numeric = (fp - fm) / (2.0 * h);
      out.max_rel = std::max(out.max_rel, rel_error(analytic[i], numeric, floor));
      ++out.checked;
    }
  }
  return out;
}

// Weighted sum with fixed pseudo-random weights so every output element
// contributes a distinct gradient.
inline Tensor probe(const Tensor& y, std::uint64_t seed = 99) {
  Tensor w = random_tensor(y.shape(), seed, -1.0, 1.0, false);
  return coarl::ad::sum(coarl::ad::mul(y, w));
}

inline std::string error_code(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const coarl::Error& e) {
    return e.code();
  }
  return "";
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("coarl-test-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testutil
