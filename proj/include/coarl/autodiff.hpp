#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle onto storage (shape, data, optional grad). Ops
// record a node on the thread's active Tape whenever a tape is installed and at
// least one input requires grad. `backward(loss)` replays the tape in exact
// reverse order, accumulating into `grad` buffers; parameter gradients
// accumulate across tapes until `zero_grad()` is called. A tape can be
// replayed once: it is consumed by backward and a second call throws.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace coarl {
class Rng;
}

namespace coarl::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is allocated
  bool requires_grad = false;
  std::int64_t node_id = -1;  // producing node on the recording tape, -1 for leaves

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  std::vector<double>& values() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  bool has_grad() const { return impl_->grad.size() == impl_->data.size(); }
  std::span<double> grad() { return impl_->grad; }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad();

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on);

  double item() const;
  double at(std::size_t i) const { return impl_->data.at(i); }
  double at(std::size_t i, std::size_t j) const;

  /// Deep copy of values; the copy is a leaf and does not require grad.
  Tensor detach() const;
  /// Deep copy of values and the requires_grad flag (grad not copied).
  Tensor clone() const;

  std::int64_t node_id() const { return impl_->node_id; }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  friend Tensor make_tensor(Shape shape, std::vector<double> data, bool requires_grad);

  std::shared_ptr<TensorImpl> impl_;
};

Tensor make_tensor(Shape shape, std::vector<double> data, bool requires_grad);

struct Node {
  std::string_view op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::shared_ptr<TensorImpl> output;
  // Reads output->grad and accumulates into inputs' grads. Inputs that do not
  // require grad must be left untouched.
  std::function<void(Node&)> backward;
};

// The computation record. Nodes are appended in execution order, so inputs
// always precede the node consuming them.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::int64_t record(Node node);
  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Seeds d(loss)/d(loss) = 1 and propagates in reverse recording order.
  /// Throws if loss is not a scalar, was not produced on this tape (unless it
  /// is a grad-requiring leaf), or the tape was already consumed.
  void backward(const Tensor& loss);
  void clear();

 private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Installs `tape` as the active recording tape for the current thread for the
// lifetime of the scope. Passing nullptr suspends recording (inference).
class TapeScope {
 public:
  explicit TapeScope(Tape* tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// backward on the active tape.
void backward(const Tensor& loss);

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);           // [m,k]x[k,n]
Tensor linear(const Tensor& x, const Tensor& w);           // x·wᵀ, [m,k]x[n,k]
Tensor transpose(const Tensor& a);                         // 2-D
Tensor add(const Tensor& a, const Tensor& b);              // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_row(const Tensor& x, const Tensor& bias);       // [m,n] + [n]
Tensor scale(const Tensor& a, double s);
Tensor exp(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor softmax(const Tensor& x, int axis = -1);
Tensor log_softmax(const Tensor& x, int axis = -1);
/// Row-wise softmax over a square-or-tall [T,S] score matrix where row i may
/// only attend to columns j <= i. Masked entries are exactly zero.
Tensor causal_softmax(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
/// tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
Tensor gelu(const Tensor& x);
Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len);
Tensor concat_cols(const std::vector<Tensor>& parts);
/// out[t] = x[t, ids[t]].
Tensor gather_cols(const Tensor& x, std::span<const int> ids);
/// Mean NLL over positions whose target != ignore_id.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_id);
/// Inverted dropout; identity when p == 0 or rng is null.
Tensor dropout(const Tensor& x, double p, Rng* rng);

}  // namespace coarl::ad
