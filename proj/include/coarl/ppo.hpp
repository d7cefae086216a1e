#pragma once

// Policy optimization of the adapter with a clipped surrogate and a per-token
// KL penalty against the frozen starting policy.
//
// Per response token t:   kl_t     = log π(y_t) - log π_ref(y_t)
//                         r_t      = -β·kl_t  (+ sequence reward at the last token)
//                         G_t      = Σ_{k>=t} r_k
//                         Â_t      = whiten(G) over every token of the batch
// and the update maximizes mean_t min(ρ_t·Â_t, clip(ρ_t, 1-c, 1+c)·Â_t).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "coarl/checkpoint.hpp"
#include "coarl/model.hpp"
#include "coarl/optim.hpp"
#include "coarl/reward.hpp"

namespace coarl::rl {

struct PPOConfig {
  double learning_rate = 1.4e-6;
  double init_kl_coeff = 0.03;
  bool adaptive_kl = true;
  double target = 5.0;       // per-sequence KL the controller steers towards
  double horizon = 10000.0;
  double cliprange = 0.25;
  int batch_size = 32;
  int mini_batch_size = 2;
  int total_steps = 15000;   // number of rollout batches
  int ppo_epochs = 5;
  double grad_clip_norm = 1.0;
  std::optional<double> target_kl;  // early stop on per-token mean KL; off unless set
  int checkpoint_every = 100;
  int max_prompt_tokens = 256;
  int max_new_tokens = 64;
  double temperature = 1.0;
  std::optional<std::uint64_t> seed;

  void validate() const;
  bool operator==(const PPOConfig&) const = default;
};

nlohmann::json to_json(const PPOConfig& cfg);
PPOConfig ppo_config_from_json(const nlohmann::json& j);

struct PromptItem {
  std::string prompt;     // rendered instruction fed to the policy
  std::string statement;  // bare statement, for scorers that want it
};

struct Rollout {
  PromptItem item;
  std::vector<int> prompt_ids;
  std::vector<int> response;     // sampled ids, EOS included when produced
  std::string response_text;
  std::vector<double> logp_old;  // policy at sampling time
  std::vector<double> logp_ref;
  std::vector<double> kl;
  reward::RewardBreakdown reward;
  std::vector<double> shaped;
  std::vector<double> returns;
  std::vector<double> advantages;
};

struct RolloutBatch {
  std::vector<Rollout> rollouts;
  double beta = 0.0;
};

/// Samples one response per prompt (pure ancestral sampling at the configured
/// temperature), scores it, and fills log-probs, KL and shaped rewards. Scorer
/// failures are rethrown with the prompt index.
RolloutBatch generate_rollouts(const nn::Seq2SeqModel& policy, const nn::Seq2SeqModel& reference,
                               const std::vector<PromptItem>& prompts, const PPOConfig& cfg,
                               const reward::RewardFn& reward_fn, double beta, std::uint64_t seed);

/// shaped_t = -β·kl_t, plus `sequence_reward` on the last token.
std::vector<double> shape_rewards(std::span<const double> kl, double sequence_reward, double beta);
/// Suffix sums.
std::vector<double> reward_to_go(std::span<const double> shaped);
/// Zero mean, unit population variance; only centered when the variance is 0.
std::vector<double> whiten(std::span<const double> values);
/// Returns and whitened advantages for every rollout of the batch.
void compute_advantages(RolloutBatch& batch);

/// Batch mean of the per-sequence sum of log-ratios.
double compute_sequence_kl(const RolloutBatch& batch);
/// Σ_i w_i Σ_t (lp_policy[i][t] - lp_ref[i][t]); uniform weights when empty.
double weighted_sequence_kl(const std::vector<std::vector<double>>& lp_policy,
                            const std::vector<std::vector<double>>& lp_ref, std::span<const double> weights = {});
/// Exact KL(π‖π_ref) over the vocabulary at each response position (debug).
std::vector<double> full_vocab_kl(const nn::Seq2SeqModel& policy, const nn::Seq2SeqModel& reference,
                                  std::span<const int> src, std::span<const int> response);

/// min(ρ·A, clip(ρ, 1-c, 1+c)·A).
double clipped_objective(double ratio, double advantage, double cliprange);

/// Errors "invalid_config" when target <= 0.
double adaptive_kl_update(double beta, double observed_kl, double target, int batch_size, double horizon);

struct UpdateStats {
  double surrogate_loss = 0.0;  // mean over applied mini-batches of -objective
  int minibatches = 0;
  int skipped = 0;              // non-finite ratios
  bool early_stopped = false;
};

/// ppo_epochs passes of shuffled mini-batches; only adapter tensors move.
UpdateStats ppo_update(nn::Seq2SeqModel& policy, optim::Adam& adam, const RolloutBatch& batch, const PPOConfig& cfg,
                       std::uint64_t seed);

struct BatchStats {
  std::uint64_t batch = 0;  // 1-based
  double mean_reward = 0.0;
  double pc_mean = 0.0;
  double aq_mean = 0.0;
  double tox_mean = 0.0;
  double kl = 0.0;
  double beta = 0.0;  // coefficient used to shape this batch
  double surrogate_loss = 0.0;
  int skipped = 0;
};

struct PPORunOptions {
  std::filesystem::path checkpoint_root;  // <root>/phase3/batch-XXXXXX.ckpt and final.ckpt
  std::filesystem::path metrics_path;
};

class PPOTrainer {
 public:
  /// `policy` must carry an adapter over a fully frozen base; the reference
  /// policy is a frozen copy of that adapter.
  PPOTrainer(nn::Seq2SeqModel& policy, PPOConfig cfg, std::vector<PromptItem> prompts, reward::RewardFn reward_fn,
             std::uint64_t seed);

  BatchStats step();
  bool done() const { return batch_ >= static_cast<std::uint64_t>(cfg_.total_steps); }
  std::vector<BatchStats> run(const PPORunOptions& opts);

  double beta() const { return beta_; }
  std::uint64_t batches() const { return batch_; }
  const nn::Seq2SeqModel& reference() const { return reference_; }
  const RolloutBatch& last_batch() const { return last_; }
  Checkpoint policy_checkpoint() const;

 private:
  std::vector<PromptItem> next_prompts();

  nn::Seq2SeqModel& policy_;
  nn::Seq2SeqModel reference_;
  PPOConfig cfg_;
  std::vector<PromptItem> prompts_;
  reward::RewardFn reward_fn_;
  std::uint64_t seed_;
  optim::Adam adam_;
  double beta_;
  std::uint64_t batch_ = 0;
  std::uint64_t base_hash_ = 0;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::uint64_t pass_ = 0;
  RolloutBatch last_;
};

}  // namespace coarl::rl
