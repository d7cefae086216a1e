#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "coarl/instructions.hpp"
#include "coarl/lora.hpp"
#include "coarl/model.hpp"
#include "coarl/ppo.hpp"
#include "coarl/reward.hpp"
#include "coarl/trainer.hpp"

namespace coarl {

struct DataConfig {
  std::string counterspeech = "data/fixtures/counterspeech.jsonl";
  std::string explanations = "data/fixtures/explanations.jsonl";
  std::string templates;  // empty: built-in templates
  data::MixingMode mixing = data::MixingMode::kUniform;

  bool operator==(const DataConfig&) const = default;
};

struct EvalConfig {
  std::string split = "test";
  bool model_embeddings = true;  // false: byte histograms for CosineSim
  int max_input_tokens = 256;

  bool operator==(const EvalConfig&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 42;
  nn::ModelConfig model;
  train::TrainConfig phase1 = train::phase1_defaults();
  train::TrainConfig phase2 = train::phase2_defaults();
  nn::LoraConfig lora;
  rl::PPOConfig ppo;
  nn::SamplingConfig sampling;
  reward::RewardConfig reward;
  DataConfig data;
  EvalConfig eval;

  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

nlohmann::json to_json(const nn::SamplingConfig& cfg);
nn::SamplingConfig sampling_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const RunConfig& cfg);
/// Strict: unknown keys fail with "config_schema" naming the key path.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// Seeds of independent streams, all derived from the one run seed unless a
// phase sets its own.
std::uint64_t model_init_seed(const RunConfig& cfg);
std::uint64_t lora_init_seed(const RunConfig& cfg);
std::uint64_t phase1_seed(const RunConfig& cfg);
std::uint64_t phase2_seed(const RunConfig& cfg);
std::uint64_t phase3_seed(const RunConfig& cfg);

/// Copy with every per-phase seed filled in, as written into run directories.
RunConfig resolve(const RunConfig& cfg);

}  // namespace coarl
