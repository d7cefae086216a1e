#pragma once

// Tiny pre-norm encoder-decoder transformer over the byte vocabulary.
//
// Rows are positions: activations are [T x d_model]. Projection weights use the
// [d_out x d_in] convention so y = x·Wᵀ. The output projection is tied to the
// token embedding and positions use fixed sinusoidal encodings.

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "coarl/autodiff.hpp"
#include "coarl/checkpoint.hpp"
#include "coarl/vocab.hpp"

namespace coarl {
class Rng;
}

namespace coarl::nn {

class LoraAdapter;

struct ModelConfig {
  int vocab_size = kVocabSize;
  int d_model = 64;
  int n_heads = 4;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int d_ff = 256;
  int max_seq_len = 256;
  double dropout_rate = 0.0;

  void validate() const;

  /// V·d + L_enc·(4d² + 2·d·f + f + 5d) + L_dec·(8d² + 2·d·f + f + 7d) + 4d
  /// (embedding; per-layer attention, feed-forward and layer norms; two final
  /// layer norms). The output projection is tied and adds nothing.
  std::size_t parameter_count() const;

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct SamplingConfig {
  int top_k = 1;
  double top_p = 1.0;
  double temperature = 1.0;
  int max_new_tokens = 64;
  bool do_sample = false;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const SamplingConfig&) const = default;
};

struct ForwardOptions {
  // Non-null enables dropout (model residual dropout and adapter input dropout).
  Rng* dropout_rng = nullptr;
};

class Seq2SeqModel {
 public:
  /// Random initialization; each parameter draws from its own stream derived
  /// from (seed, parameter name), so init does not depend on creation order.
  Seq2SeqModel(ModelConfig cfg, std::uint64_t seed);

  static Seq2SeqModel from_checkpoint(const Checkpoint& ckpt);
  /// Base parameters only; adapters are saved separately.
  Checkpoint to_checkpoint(const std::string& kind = "model") const;

  const ModelConfig& config() const { return config_; }

  std::map<std::string, ad::Tensor>& parameters() { return params_; }
  const std::map<std::string, ad::Tensor>& parameters() const { return params_; }
  ad::Tensor& param(const std::string& name);
  const ad::Tensor& param(const std::string& name) const;
  bool has_param(const std::string& name) const { return params_.count(name) != 0; }

  void set_frozen(const std::string& name, bool frozen);
  void freeze_all();
  bool is_frozen(const std::string& name) const { return !param(name).requires_grad(); }

  /// Deep copy of base parameters; the adapter pointer is shared.
  Seq2SeqModel clone() const;
  /// Shallow copy sharing base parameter storage with `adapter` installed.
  Seq2SeqModel with_adapter(std::shared_ptr<LoraAdapter> adapter) const;

  void set_adapter(std::shared_ptr<LoraAdapter> adapter) { adapter_ = std::move(adapter); }
  const std::shared_ptr<LoraAdapter>& adapter() const { return adapter_; }

  ad::Tensor encode(std::span<const int> src, const ForwardOptions& opts = {}) const;
  /// Logits [|dec_in| x V] for a decoder input that already starts with BOS.
  ad::Tensor decode(const ad::Tensor& memory, std::span<const int> dec_in,
                    const ForwardOptions& opts = {}) const;
  /// Teacher-forced logits [|tgt| x V]: the decoder sees BOS + tgt[0..n-1), so
  /// row t depends only on src and tgt_{<t}.
  ad::Tensor forward(std::span<const int> src, std::span<const int> tgt,
                     const ForwardOptions& opts = {}) const;

  /// Input projection with the adapter branch when `weight` is an adapter target.
  ad::Tensor project(const ad::Tensor& x, const std::string& weight, const ForwardOptions& opts) const;

  /// Mean of the (unscaled) token embedding rows for `ids`.
  std::vector<double> mean_embedding(std::span<const int> ids) const;

 private:
  Seq2SeqModel(ModelConfig cfg, std::map<std::string, ad::Tensor> params);
  void check_ids(std::span<const int> ids, const char* what) const;
  ad::Tensor embed(std::span<const int> ids) const;
  ad::Tensor attention(const ad::Tensor& xq, const ad::Tensor& xkv, const std::string& prefix,
                       bool causal, const ForwardOptions& opts) const;
  ad::Tensor feed_forward(const ad::Tensor& x, const std::string& prefix) const;
  ad::Tensor norm(const ad::Tensor& x, const std::string& prefix) const;
  ad::Tensor residual_dropout(const ad::Tensor& x, const ForwardOptions& opts) const;

  ModelConfig config_;
  std::map<std::string, ad::Tensor> params_;
  std::shared_ptr<const std::vector<double>> positions_;  // [max_seq_len x d]
  std::shared_ptr<LoraAdapter> adapter_;
};

/// Parameter names in creation order for `cfg`.
std::vector<std::string> parameter_names(const ModelConfig& cfg);

/// Temperature, then top-k, then nucleus filtering; returns (ids, probabilities)
/// of the surviving tokens in descending-probability order, renormalized.
/// Ties are ordered by ascending id.
std::pair<std::vector<int>, std::vector<double>> filtered_distribution(
    std::span<const double> logits, const SamplingConfig& cfg);

/// Argmax (lowest id on ties) when !do_sample, otherwise one draw from
/// filtered_distribution.
int choose_token(std::span<const double> logits, const SamplingConfig& cfg, Rng& rng);

/// Decodes until EOS (included in the result) or max_new_tokens.
std::vector<int> generate(const Seq2SeqModel& model, std::span<const int> src,
                          const SamplingConfig& cfg);

/// log π(out_t | src, out_{<t}) for every position, as a differentiable [n] tensor.
ad::Tensor sequence_logprob_tensor(const Seq2SeqModel& model, std::span<const int> src,
                                   std::span<const int> out, const ForwardOptions& opts = {});
std::vector<double> sequence_logprob(const Seq2SeqModel& model, std::span<const int> src,
                                     std::span<const int> out);

}  // namespace coarl::nn
