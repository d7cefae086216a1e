#include "coarl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include <Eigen/Dense>

#include "coarl/error.hpp"
#include "coarl/rng.hpp"

namespace coarl::ad {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;

thread_local Tape* g_tape = nullptr;

[[noreturn]] void shape_error(std::string_view op, const std::string& detail) {
  throw Error("shape_mismatch", std::string(op) + ": " + detail);
}

void require_rank(std::string_view op, const Tensor& t, std::size_t r) {
  if (!t.defined()) throw Error("invalid_argument", std::string(op) + ": undefined tensor");
  if (t.rank() != r) {
    shape_error(op, "expected rank " + std::to_string(r) + ", got " + shape_str(t.shape()));
  }
}

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  if (g_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

Tensor finish(std::string_view op, std::initializer_list<const Tensor*> inputs, Shape shape,
              std::vector<double> data, std::function<void(Node&)> bw) {
  const bool track = wants_grad(inputs);
  Tensor out = make_tensor(std::move(shape), std::move(data), track);
  if (track) {
    Node node;
    node.op = op;
    for (const Tensor* t : inputs) node.inputs.push_back(t->impl());
    node.output = out.impl();
    node.backward = std::move(bw);
    out.impl()->node_id = g_tape->record(std::move(node));
  }
  return out;
}

// Accumulation target for input i, or nullptr when that input is constant.
double* grad_of(Node& n, std::size_t i) {
  TensorImpl& in = *n.inputs[i];
  if (!in.requires_grad) return nullptr;
  in.ensure_grad();
  return in.grad.data();
}

std::size_t normalize_axis(std::string_view op, const Tensor& x, int axis) {
  const int r = static_cast<int>(x.rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw Error("invalid_axis", std::string(op) + ": axis out of range");
  if (x.dim(static_cast<std::size_t>(a)) == 0) {
    throw Error("empty_axis", std::string(op) + ": reduction axis is empty");
  }
  return static_cast<std::size_t>(a);
}

struct AxisGeometry {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisGeometry geometry(const Shape& s, std::size_t axis) {
  AxisGeometry g;
  for (std::size_t i = 0; i < axis; ++i) g.outer *= s[i];
  g.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) g.inner *= s[i];
  return g;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor make_tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw Error("shape_mismatch", "tensor: shape " + shape_str(shape) + " does not hold " +
                                      std::to_string(data.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  if (requires_grad) impl->ensure_grad();
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return make_tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return make_tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return make_tensor(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return make_tensor({}, {value}, requires_grad);
}

void Tensor::zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

void Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (on) {
    impl_->ensure_grad();
  } else {
    impl_->grad.clear();
  }
}

double Tensor::item() const {
  if (numel() != 1) throw Error("shape_mismatch", "item: tensor is not a scalar " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t i, std::size_t j) const {
  if (rank() != 2) throw Error("shape_mismatch", "at(i,j): tensor is not 2-D");
  return impl_->data.at(i * impl_->shape[1] + j);
}

Tensor Tensor::detach() const { return make_tensor(shape(), values(), false); }

Tensor Tensor::clone() const {
  Tensor t = make_tensor(shape(), values(), false);
  t.set_requires_grad(requires_grad());
  return t;
}

// ---- tape ------------------------------------------------------------------

std::int64_t Tape::record(Node node) {
  if (consumed_) {
    throw Error("tape_consumed", "cannot record on a tape that was already used for backward");
  }
  nodes_.push_back(std::move(node));
  return static_cast<std::int64_t>(nodes_.size()) - 1;
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) {
    throw Error("tape_consumed", "backward called twice on the same record; re-run forward first");
  }
  if (!loss.defined() || loss.numel() != 1) {
    throw Error("non_scalar_loss", "backward requires a scalar loss, got " +
                                       (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  }
  const std::int64_t id = loss.node_id();
  TensorImpl& li = *loss.impl();
  if (id < 0 || id >= static_cast<std::int64_t>(nodes_.size()) ||
      nodes_[static_cast<std::size_t>(id)].output != loss.impl()) {
    if (!li.requires_grad) {
      throw Error("not_recorded", "backward: loss was not produced by recorded ops");
    }
    li.ensure_grad();
    li.grad[0] += 1.0;
    clear();
    consumed_ = true;
    return;
  }
  li.ensure_grad();
  li.grad[0] += 1.0;
  for (std::int64_t i = id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.output->grad.empty()) continue;
    n.backward(n);
  }
  clear();
  consumed_ = true;
}

void Tape::clear() {
  for (Node& n : nodes_) n.output->node_id = -1;
  nodes_.clear();
  consumed_ = false;
}

TapeScope::TapeScope(Tape* tape) : previous_(g_tape) { g_tape = tape; }
TapeScope::~TapeScope() { g_tape = previous_; }

Tape* active_tape() { return g_tape; }

void backward(const Tensor& loss) {
  if (g_tape == nullptr) throw Error("no_tape", "backward: no active computation record");
  g_tape->backward(loss);
}

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    shape_error("matmul", "inner dimensions differ: " + shape_str(a.shape()) + " x " +
                              shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  MapM(out.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), k, n);
  return finish("matmul", {&a, &b}, {m, n}, std::move(out), [m, k, n](Node& node) {
    MapC dc(node.output->grad.data(), m, n);
    if (double* ga = grad_of(node, 0)) {
      MapM(ga, m, k).noalias() += dc * MapC(node.inputs[1]->data.data(), k, n).transpose();
    }
    if (double* gb = grad_of(node, 1)) {
      MapM(gb, k, n).noalias() += MapC(node.inputs[0]->data.data(), m, k).transpose() * dc;
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w) {
  require_rank("linear", x, 2);
  require_rank("linear", w, 2);
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(0);
  if (w.dim(1) != k) {
    shape_error("linear", "input " + shape_str(x.shape()) + " incompatible with weight " +
                              shape_str(w.shape()));
  }
  std::vector<double> out(m * n);
  MapM(out.data(), m, n).noalias() =
      MapC(x.data().data(), m, k) * MapC(w.data().data(), n, k).transpose();
  return finish("linear", {&x, &w}, {m, n}, std::move(out), [m, k, n](Node& node) {
    MapC dy(node.output->grad.data(), m, n);
    if (double* gx = grad_of(node, 0)) {
      MapM(gx, m, k).noalias() += dy * MapC(node.inputs[1]->data.data(), n, k);
    }
    if (double* gw = grad_of(node, 1)) {
      MapM(gw, n, k).noalias() += dy.transpose() * MapC(node.inputs[0]->data.data(), m, k);
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  MapM(out.data(), n, m) = MapC(a.data().data(), m, n).transpose();
  return finish("transpose", {&a}, {n, m}, std::move(out), [m, n](Node& node) {
    if (double* ga = grad_of(node, 0)) {
      MapM(ga, m, n) += MapC(node.output->grad.data(), n, m).transpose();
    }
  });
}

// ---- elementwise -----------------------------------------------------------

namespace {

void require_same(std::string_view op, const Tensor& a, const Tensor& b) {
  if (!a.defined() || !b.defined()) throw Error("invalid_argument", std::string(op) + ": undefined tensor");
  if (a.shape() != b.shape()) {
    shape_error(op, shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  return finish("add", {&a, &b}, a.shape(), std::move(out), [](Node& node) {
    const auto& g = node.output->grad;
    for (std::size_t k = 0; k < 2; ++k) {
      if (double* gi = grad_of(node, k)) {
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  return finish("sub", {&a, &b}, a.shape(), std::move(out), [](Node& node) {
    const auto& g = node.output->grad;
    if (double* ga = grad_of(node, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (double* gb = grad_of(node, 1)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return finish("mul", {&a, &b}, a.shape(), std::move(out), [](Node& node) {
    const auto& g = node.output->grad;
    const auto& av = node.inputs[0]->data;
    const auto& bv = node.inputs[1]->data;
    if (double* ga = grad_of(node, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (double* gb = grad_of(node, 1)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Tensor add_row(const Tensor& x, const Tensor& bias) {
  require_rank("add_row", x, 2);
  require_rank("add_row", bias, 1);
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.dim(0) != n) shape_error("add_row", shape_str(x.shape()) + " + " + shape_str(bias.shape()));
  std::vector<double> out(x.values());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias.at(j);
  }
  return finish("add_row", {&x, &bias}, x.shape(), std::move(out), [m, n](Node& node) {
    const auto& g = node.output->grad;
    if (double* gx = grad_of(node, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (double* gb = grad_of(node, 1)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.values());
  for (double& v : out) v *= s;
  return finish("scale", {&a}, a.shape(), std::move(out), [s](Node& node) {
    const auto& g = node.output->grad;
    if (double* ga = grad_of(node, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
    }
  });
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.at(i));
  return finish("exp", {&a}, a.shape(), std::move(out), [](Node& node) {
    const auto& g = node.output->grad;
    const auto& y = node.output->data;
    if (double* ga = grad_of(node, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    }
  });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw Error("invalid_argument", "clamp: lo > hi");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(a.at(i), lo, hi);
  return finish("clamp", {&a}, a.shape(), std::move(out), [lo, hi](Node& node) {
    const auto& g = node.output->grad;
    const auto& x = node.inputs[0]->data;
    if (double* ga = grad_of(node, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] >= lo && x[i] <= hi) ga[i] += g[i];
      }
    }
  });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  require_same("minimum", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(a.at(i), b.at(i));
  return finish("minimum", {&a, &b}, a.shape(), std::move(out), [](Node& node) {
    const auto& g = node.output->grad;
    const auto& av = node.inputs[0]->data;
    const auto& bv = node.inputs[1]->data;
    double* ga = grad_of(node, 0);
    double* gb = grad_of(node, 1);
    for (std::size_t i = 0; i < g.size(); ++i) {
      // ties route to the first operand
      if (av[i] <= bv[i]) {
        if (ga) ga[i] += g[i];
      } else if (gb) {
        gb[i] += g[i];
      }
    }
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return finish("sum", {&a}, {}, {s}, [](Node& node) {
    const double g = node.output->grad[0];
    if (double* ga = grad_of(node, 0)) {
      for (std::size_t i = 0; i < node.inputs[0]->data.size(); ++i) ga[i] += g;
    }
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw Error("empty_axis", "mean: empty tensor");
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double inv = 1.0 / static_cast<double>(a.numel());
  return finish("mean", {&a}, {}, {s * inv}, [inv](Node& node) {
    const double g = node.output->grad[0] * inv;
    if (double* ga = grad_of(node, 0)) {
      for (std::size_t i = 0; i < node.inputs[0]->data.size(); ++i) ga[i] += g;
    }
  });
}

// ---- normalizations --------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis("softmax", x, axis);
  const AxisGeometry g = geometry(x.shape(), ax);
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t o = 0; o < g.outer; ++o) {
    for (std::size_t in = 0; in < g.inner; ++in) {
      const std::size_t base = o * g.n * g.inner + in;
      double mx = xv[base];
      for (std::size_t k = 1; k < g.n; ++k) mx = std::max(mx, xv[base + k * g.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < g.n; ++k) {
        const double e = std::exp(xv[base + k * g.inner] - mx);
        out[base + k * g.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < g.n; ++k) out[base + k * g.inner] /= z;
    }
  }
  return finish("softmax", {&x}, x.shape(), std::move(out), [g](Node& node) {
    double* gx = grad_of(node, 0);
    if (!gx) return;
    const auto& y = node.output->data;
    const auto& dy = node.output->grad;
    for (std::size_t o = 0; o < g.outer; ++o) {
      for (std::size_t in = 0; in < g.inner; ++in) {
        const std::size_t base = o * g.n * g.inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < g.n; ++k) dot += dy[base + k * g.inner] * y[base + k * g.inner];
        for (std::size_t k = 0; k < g.n; ++k) {
          const std::size_t idx = base + k * g.inner;
          gx[idx] += y[idx] * (dy[idx] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis("log_softmax", x, axis);
  const AxisGeometry g = geometry(x.shape(), ax);
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t o = 0; o < g.outer; ++o) {
    for (std::size_t in = 0; in < g.inner; ++in) {
      const std::size_t base = o * g.n * g.inner + in;
      double mx = xv[base];
      for (std::size_t k = 1; k < g.n; ++k) mx = std::max(mx, xv[base + k * g.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < g.n; ++k) z += std::exp(xv[base + k * g.inner] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t k = 0; k < g.n; ++k) out[base + k * g.inner] = xv[base + k * g.inner] - lz;
    }
  }
  return finish("log_softmax", {&x}, x.shape(), std::move(out), [g](Node& node) {
    double* gx = grad_of(node, 0);
    if (!gx) return;
    const auto& y = node.output->data;
    const auto& dy = node.output->grad;
    for (std::size_t o = 0; o < g.outer; ++o) {
      for (std::size_t in = 0; in < g.inner; ++in) {
        const std::size_t base = o * g.n * g.inner + in;
        double s = 0.0;
        for (std::size_t k = 0; k < g.n; ++k) s += dy[base + k * g.inner];
        for (std::size_t k = 0; k < g.n; ++k) {
          const std::size_t idx = base + k * g.inner;
          gx[idx] += dy[idx] - std::exp(y[idx]) * s;
        }
      }
    }
  });
}

Tensor causal_softmax(const Tensor& x) {
  require_rank("causal_softmax", x, 2);
  const std::size_t t = x.dim(0), s = x.dim(1);
  if (s == 0) throw Error("empty_axis", "causal_softmax: empty axis");
  std::vector<double> out(t * s, 0.0);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < t; ++i) {
    const std::size_t width = std::min(i + 1, s);
    const double* row = xv.data() + i * s;
    double mx = row[0];
    for (std::size_t j = 1; j < width; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      out[i * s + j] = std::exp(row[j] - mx);
      z += out[i * s + j];
    }
    for (std::size_t j = 0; j < width; ++j) out[i * s + j] /= z;
  }
  return finish("causal_softmax", {&x}, x.shape(), std::move(out), [t, s](Node& node) {
    double* gx = grad_of(node, 0);
    if (!gx) return;
    const auto& y = node.output->data;
    const auto& dy = node.output->grad;
    for (std::size_t i = 0; i < t; ++i) {
      const std::size_t width = std::min(i + 1, s);
      double dot = 0.0;
      for (std::size_t j = 0; j < width; ++j) dot += dy[i * s + j] * y[i * s + j];
      for (std::size_t j = 0; j < width; ++j) gx[i * s + j] += y[i * s + j] * (dy[i * s + j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank("layer_norm", gain, 1);
  require_rank("layer_norm", bias, 1);
  if (x.rank() == 0) shape_error("layer_norm", "scalar input");
  const std::size_t n = x.shape().back();
  if (n == 0) throw Error("empty_axis", "layer_norm: empty last axis");
  if (gain.dim(0) != n || bias.dim(0) != n) {
    shape_error("layer_norm", "gain/bias " + shape_str(gain.shape()) + " vs input " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel());
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * inv;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = h * gain.at(j) + bias.at(j);
    }
  }
  return finish("layer_norm", {&x, &gain, &bias}, x.shape(), std::move(out),
                [n, rows, xhat, inv_std](Node& node) {
                  const auto& dy = node.output->grad;
                  const auto& gv = node.inputs[1]->data;
                  double* gx = grad_of(node, 0);
                  double* gg = grad_of(node, 1);
                  double* gb = grad_of(node, 2);
                  std::vector<double> dxhat(n);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* h = xhat->data() + r * n;
                    const double* d = dy.data() + r * n;
                    if (gg) {
                      for (std::size_t j = 0; j < n; ++j) gg[j] += d[j] * h[j];
                    }
                    if (gb) {
                      for (std::size_t j = 0; j < n; ++j) gb[j] += d[j];
                    }
                    if (gx) {
                      double m1 = 0.0, m2 = 0.0;
                      for (std::size_t j = 0; j < n; ++j) {
                        dxhat[j] = d[j] * gv[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * h[j];
                      }
                      m1 /= static_cast<double>(n);
                      m2 /= static_cast<double>(n);
                      const double inv = (*inv_std)[r];
                      for (std::size_t j = 0; j < n; ++j) {
                        gx[r * n + j] += inv * (dxhat[j] - m1 - h[j] * m2);
                      }
                    }
                  }
                });
}

Tensor gelu(const Tensor& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.at(i);
    out[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  }
  return finish("gelu", {&x}, x.shape(), std::move(out), [](Node& node) {
    double* gx = grad_of(node, 0);
    if (!gx) return;
    const auto& xv = node.inputs[0]->data;
    const auto& dy = node.output->grad;
    for (std::size_t i = 0; i < dy.size(); ++i) {
      const double v = xv[i];
      const double t = std::tanh(kC * (v + kA * v * v * v));
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
      gx[i] += dy[i] * d;
    }
  });
}

// ---- indexing --------------------------------------------------------------

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank("embedding", table, 2);
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= v) {
      throw Error("id_out_of_range", "embedding: id " + std::to_string(ids[t]) +
                                         " outside vocabulary of " + std::to_string(v));
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[t]) * d, d, out.data() + t * d);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return finish("embedding", {&table}, {ids.size(), d}, std::move(out),
                [saved = std::move(saved), d](Node& node) {
                  double* gt = grad_of(node, 0);
                  if (!gt) return;
                  const auto& g = node.output->grad;
                  for (std::size_t t = 0; t < saved.size(); ++t) {
                    double* row = gt + static_cast<std::size_t>(saved[t]) * d;
                    for (std::size_t j = 0; j < d; ++j) row[j] += g[t * d + j];
                  }
                });
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len) {
  require_rank("slice_cols", x, 2);
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (start + len > n) shape_error("slice_cols", "columns [" + std::to_string(start) + ", " +
                                                     std::to_string(start + len) + ") of " +
                                                     shape_str(x.shape()));
  std::vector<double> out(m * len);
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(x.data().data() + i * n + start, len, out.data() + i * len);
  }
  return finish("slice_cols", {&x}, {m, len}, std::move(out), [m, n, start, len](Node& node) {
    double* gx = grad_of(node, 0);
    if (!gx) return;
    const auto& g = node.output->grad;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < len; ++j) gx[i * n + start + j] += g[i * len + j];
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw Error("invalid_argument", "concat_cols: no inputs");
  const std::size_t m = parts[0].dim(0);
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    require_rank("concat_cols", p, 2);
    if (p.dim(0) != m) shape_error("concat_cols", "row counts differ");
    total += p.dim(1);
  }
  std::vector<double> out(m * total);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < m; ++i) std::copy_n(p.data().data() + i * w, w, out.data() + i * total + off);
    off += w;
  }
  const bool track = [&] {
    if (g_tape == nullptr) return false;
    for (const Tensor& p : parts) if (p.requires_grad()) return true;
    return false;
  }();
  Tensor result = make_tensor({m, total}, std::move(out), track);
  if (track) {
    Node node;
    node.op = "concat_cols";
    for (const Tensor& p : parts) node.inputs.push_back(p.impl());
    node.output = result.impl();
    node.backward = [m, total](Node& n) {
      const auto& g = n.output->grad;
      std::size_t o = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t w = n.inputs[k]->shape[1];
        if (double* gp = grad_of(n, k)) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * total + o + j];
          }
        }
        o += w;
      }
    };
    result.impl()->node_id = g_tape->record(std::move(node));
  }
  return result;
}

Tensor gather_cols(const Tensor& x, std::span<const int> ids) {
  require_rank("gather_cols", x, 2);
  const std::size_t t = x.dim(0), v = x.dim(1);
  if (ids.size() != t) {
    shape_error("gather_cols", std::to_string(ids.size()) + " ids for " + shape_str(x.shape()));
  }
  std::vector<double> out(t);
  for (std::size_t i = 0; i < t; ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw Error("id_out_of_range", "gather_cols: id " + std::to_string(ids[i]) + " out of range");
    }
    out[i] = x.at(i * v + static_cast<std::size_t>(ids[i]));
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return finish("gather_cols", {&x}, {t}, std::move(out), [saved = std::move(saved), v](Node& node) {
    double* gx = grad_of(node, 0);
    if (!gx) return;
    const auto& g = node.output->grad;
    for (std::size_t i = 0; i < saved.size(); ++i) gx[i * v + static_cast<std::size_t>(saved[i])] += g[i];
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_id) {
  require_rank("cross_entropy", logits, 2);
  const std::size_t t = logits.dim(0), v = logits.dim(1);
  if (targets.size() != t) {
    shape_error("cross_entropy", std::to_string(targets.size()) + " targets for logits " +
                                     shape_str(logits.shape()));
  }
  std::size_t count = 0;
  for (int id : targets) {
    if (id == ignore_id) continue;
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw Error("id_out_of_range", "cross_entropy: target " + std::to_string(id) +
                                         " outside [0, " + std::to_string(v) + ")");
    }
    ++count;
  }
  if (count == 0) throw Error("empty_targets", "cross_entropy: every target is ignored");
  auto probs = std::make_shared<std::vector<double>>(t * v, 0.0);
  double total = 0.0;
  const auto& lv = logits.values();
  for (std::size_t i = 0; i < t; ++i) {
    if (targets[i] == ignore_id) continue;
    const double* row = lv.data() + i * v;
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      const double e = std::exp(row[j] - mx);
      (*probs)[i * v + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < v; ++j) (*probs)[i * v + j] /= z;
    total += mx + std::log(z) - row[targets[i]];
  }
  const double inv = 1.0 / static_cast<double>(count);
  std::vector<int> saved(targets.begin(), targets.end());
  return finish("cross_entropy", {&logits}, {}, {total * inv},
                [probs, saved = std::move(saved), v, inv, ignore_id](Node& node) {
                  double* gx = grad_of(node, 0);
                  if (!gx) return;
                  const double g = node.output->grad[0] * inv;
                  for (std::size_t i = 0; i < saved.size(); ++i) {
                    if (saved[i] == ignore_id) continue;
                    for (std::size_t j = 0; j < v; ++j) gx[i * v + j] += g * (*probs)[i * v + j];
                    gx[i * v + static_cast<std::size_t>(saved[i])] -= g;
                  }
                });
}

Tensor dropout(const Tensor& x, double p, Rng* rng) {
  if (p < 0.0 || p >= 1.0) throw Error("invalid_argument", "dropout: rate must be in [0, 1)");
  if (rng == nullptr || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng->uniform() < p ? 0.0 : keep_scale;
    out[i] = x.at(i) * (*mask)[i];
  }
  return finish("dropout", {&x}, x.shape(), std::move(out), [mask](Node& node) {
    double* gx = grad_of(node, 0);
    if (!gx) return;
    const auto& g = node.output->grad;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
  });
}

}  // namespace coarl::ad
