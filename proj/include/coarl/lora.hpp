#pragma once

// Low-rank adapters on attention query/value projections.
//
// For a wrapped weight W [d x d] the projection becomes
//   y = x·Wᵀ + (alpha/rank)·(dropout(x)·Aᵀ)·Bᵀ,   A [rank x d], B [d x rank]
// which is W + (alpha/rank)·B·A in column-vector form. B starts at zero so a
// freshly attached adapter leaves every output bit-identical.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "coarl/autodiff.hpp"
#include "coarl/model.hpp"

namespace coarl::nn {

struct LoraConfig {
  int rank = 16;
  double alpha = 32.0;
  double dropout = 0.05;
  bool encoder_self_attn = true;
  bool decoder_self_attn = true;
  bool decoder_cross_attn = true;

  double scale() const { return alpha / static_cast<double>(rank); }
  void validate(int d_model) const;
  bool operator==(const LoraConfig&) const = default;
};

nlohmann::json to_json(const LoraConfig& cfg);
LoraConfig lora_config_from_json(const nlohmann::json& j);

struct LoraPair {
  ad::Tensor a;  // [rank x d]
  ad::Tensor b;  // [d x rank]
};

class LoraAdapter {
 public:
  LoraAdapter(LoraConfig cfg, int d_model) : config_(cfg), d_model_(d_model) {}

  const LoraConfig& config() const { return config_; }
  int d_model() const { return d_model_; }
  double scale() const { return config_.scale(); }

  /// Keyed by the wrapped base weight name.
  std::map<std::string, LoraPair>& targets() { return targets_; }
  const std::map<std::string, LoraPair>& targets() const { return targets_; }
  const LoraPair* find(const std::string& base_weight) const;

  /// Trainable tensors under the names "<base_weight>.lora_A" / ".lora_B".
  std::map<std::string, ad::Tensor> parameters() const;

  std::shared_ptr<LoraAdapter> clone() const;
  std::uint64_t hash() const { return tensor_map_hash(parameters()); }

 private:
  LoraConfig config_;
  int d_model_;
  std::map<std::string, LoraPair> targets_;
};

/// Base weight names wrapped under `cfg` for a model of shape `model_cfg`.
std::vector<std::string> lora_target_names(const ModelConfig& model_cfg, const LoraConfig& cfg);

/// Creates an adapter (A ~ U(-1/√d, 1/√d) from `seed`, B = 0), freezes every
/// base parameter and installs the adapter on `model`.
std::shared_ptr<LoraAdapter> attach(Seq2SeqModel& model, const LoraConfig& cfg, std::uint64_t seed);

/// Adapter-free deep copy with W' = W + (alpha/rank)·B·A for each target.
Seq2SeqModel merge(const Seq2SeqModel& model);

Checkpoint adapter_to_checkpoint(const LoraAdapter& adapter, const Seq2SeqModel& base);
void save_adapter(const std::filesystem::path& path, const LoraAdapter& adapter,
                  const Seq2SeqModel& base);
/// Validates the adapter against `model` (d_model, target names and shapes).
std::shared_ptr<LoraAdapter> adapter_from_checkpoint(const Checkpoint& ckpt, const Seq2SeqModel& model);
std::shared_ptr<LoraAdapter> load_adapter(const std::filesystem::path& path, const Seq2SeqModel& model);

}  // namespace coarl::nn
