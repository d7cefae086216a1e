#pragma once

// Supervised training loop shared by instruction tuning (all base weights
// trainable) and adapter tuning (base frozen, only LoRA tensors trainable).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "coarl/checkpoint.hpp"
#include "coarl/instructions.hpp"
#include "coarl/model.hpp"
#include "coarl/optim.hpp"

namespace coarl::train {

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 8;
  int epochs = 3;
  int max_input_tokens = 256;
  double grad_clip_norm = 1.0;  // <= 0 disables clipping
  std::optional<std::uint64_t> seed;
  std::optional<int> max_steps;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

TrainConfig phase1_defaults();
TrainConfig phase2_defaults();
nlohmann::json to_json(const TrainConfig& cfg);
/// Keys not present keep the values from `defaults`.
TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& path, TrainConfig defaults);

enum class Phase { kInstruction, kAdapter };
std::string phase_dir(Phase p);  // "phase1" / "phase2"

struct TrainExample {
  data::TaskId task = data::TaskId::kI1;
  std::vector<int> src;  // prompt bytes + EOS
  std::vector<int> tgt;  // target bytes + EOS
};

TrainExample make_example(const data::PromptSample& s, std::size_t max_input_tokens, std::size_t max_target_tokens);

/// Ordered samples for a given epoch; must be a pure function of the epoch.
using EpochSource = std::function<std::vector<data::PromptSample>(std::uint64_t epoch)>;

EpochSource mixture_source(std::vector<data::ExplanationRecord> explanations, std::uint64_t seed,
                           data::MixingMode mode, data::TemplateSet templates = data::default_templates());
EpochSource counterspeech_source(std::vector<data::CSRecord> records, std::uint64_t seed,
                                 data::TemplateSet templates = data::default_templates());

struct StepStats {
  std::uint64_t step = 0;   // 1-based optimizer step
  std::uint64_t epoch = 0;  // 0-based epoch the batch came from
  bool epoch_end = false;
  double loss = 0.0;        // mean over samples of per-sample mean token loss
  double grad_norm = 0.0;   // before clipping
  std::map<data::TaskId, double> task_loss;
};

struct TrainerOptions {
  // Epoch and final checkpoints go to <checkpoint_root>/<phase_dir>/, the
  // best epoch is linked from <checkpoint_root>/best/<phase_dir>.ckpt.
  std::filesystem::path checkpoint_root;
  std::filesystem::path metrics_path;
  // Picks the best epoch; without it the mean training loss of the epoch is used.
  std::vector<data::PromptSample> dev;
};

class SupervisedTrainer {
 public:
  /// kAdapter requires an adapter on `model` and every base parameter frozen
  /// (error "base_unfrozen"). kInstruction requires an unfrozen model
  /// (error "frozen_model").
  SupervisedTrainer(nn::Seq2SeqModel& model, Phase phase, TrainConfig cfg, EpochSource source,
                    std::uint64_t seed);

  /// One optimizer step over the next batch.
  StepStats step();
  bool done() const;
  /// Steps until done, writing metrics and checkpoints.
  std::vector<StepStats> run(const TrainerOptions& opts);

  /// Mean per-sample loss without recording or dropout.
  double evaluate(const std::vector<data::PromptSample>& samples) const;

  /// Trainable weights plus optimizer moments and loop position.
  Checkpoint state() const;
  void restore(const Checkpoint& ckpt);
  /// What the phase produces: the full model (phase 1) or the adapter (phase 2).
  Checkpoint product() const;

  optim::ParamMap trainable() const;
  const optim::Adam& optimizer() const { return adam_; }
  std::uint64_t steps() const { return step_; }
  std::uint64_t epoch() const { return epoch_; }
  std::uint64_t base_hash() const { return base_hash_; }

 private:
  const std::vector<TrainExample>& epoch_examples();
  void check_base() const;

  nn::Seq2SeqModel& model_;
  Phase phase_;
  TrainConfig cfg_;
  EpochSource source_;
  std::uint64_t seed_;
  optim::Adam adam_;
  std::uint64_t step_ = 0;
  std::uint64_t epoch_ = 0;
  std::size_t offset_ = 0;
  std::optional<std::uint64_t> cached_epoch_;
  std::vector<TrainExample> cached_;
  std::uint64_t base_hash_ = 0;
};

}  // namespace coarl::train
