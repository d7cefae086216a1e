#include "coarl/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/format.h>

#include "coarl/error.hpp"
#include "coarl/json_fields.hpp"
#include "coarl/log.hpp"
#include "coarl/lora.hpp"
#include "coarl/rng.hpp"
#include "coarl/tokenizer.hpp"

namespace coarl::rl {

using ad::Tensor;

void PPOConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw Error("invalid_config", "ppo.learning_rate must be >= 0");
  if (!(init_kl_coeff > 0.0)) throw Error("invalid_config", "ppo.init_kl_coeff must be > 0");
  if (!(target > 0.0)) throw Error("invalid_config", "ppo.target must be > 0");
  if (!(horizon > 0.0)) throw Error("invalid_config", "ppo.horizon must be > 0");
  if (!(cliprange > 0.0 && cliprange < 1.0)) throw Error("invalid_config", "ppo.cliprange must be in (0, 1)");
  if (batch_size < 1 || mini_batch_size < 1) throw Error("invalid_config", "ppo batch sizes must be >= 1");
  if (batch_size % mini_batch_size != 0) {
    throw Error("invalid_config", "ppo.mini_batch_size must divide ppo.batch_size");
  }
  if (total_steps < 1 || ppo_epochs < 1) throw Error("invalid_config", "ppo.total_steps and ppo.ppo_epochs must be >= 1");
  if (checkpoint_every < 0) throw Error("invalid_config", "ppo.checkpoint_every must be >= 0");
  if (max_prompt_tokens < 2 || max_new_tokens < 1) throw Error("invalid_config", "ppo token limits too small");
  if (!(temperature > 0.0)) throw Error("invalid_config", "ppo.temperature must be > 0");
  if (target_kl && !(*target_kl > 0.0)) throw Error("invalid_config", "ppo.target_kl must be > 0");
}

nlohmann::json to_json(const PPOConfig& c) {
  nlohmann::json j = {{"learning_rate", c.learning_rate},
                      {"init_kl_coeff", c.init_kl_coeff},
                      {"adaptive_kl", c.adaptive_kl},
                      {"target", c.target},
                      {"horizon", c.horizon},
                      {"cliprange", c.cliprange},
                      {"batch_size", c.batch_size},
                      {"mini_batch_size", c.mini_batch_size},
                      {"total_steps", c.total_steps},
                      {"ppo_epochs", c.ppo_epochs},
                      {"grad_clip_norm", c.grad_clip_norm},
                      {"checkpoint_every", c.checkpoint_every},
                      {"max_prompt_tokens", c.max_prompt_tokens},
                      {"max_new_tokens", c.max_new_tokens},
                      {"temperature", c.temperature}};
  if (c.target_kl) j["target_kl"] = *c.target_kl;
  if (c.seed) j["seed"] = *c.seed;
  return j;
}

PPOConfig ppo_config_from_json(const nlohmann::json& j) {
  PPOConfig c;
  JsonFields f(j, "ppo");
  f.read("learning_rate", c.learning_rate);
  f.read("init_kl_coeff", c.init_kl_coeff);
  f.read("adaptive_kl", c.adaptive_kl);
  f.read("target", c.target);
  f.read("horizon", c.horizon);
  f.read("cliprange", c.cliprange);
  f.read("batch_size", c.batch_size);
  f.read("mini_batch_size", c.mini_batch_size);
  f.read("total_steps", c.total_steps);
  f.read("ppo_epochs", c.ppo_epochs);
  f.read("grad_clip_norm", c.grad_clip_norm);
  f.read("checkpoint_every", c.checkpoint_every);
  f.read("max_prompt_tokens", c.max_prompt_tokens);
  f.read("max_new_tokens", c.max_new_tokens);
  f.read("temperature", c.temperature);
  double target_kl = 0.0;
  if (f.read("target_kl", target_kl)) c.target_kl = target_kl;
  std::uint64_t seed = 0;
  if (f.read("seed", seed)) c.seed = seed;
  f.finish();
  return c;
}

std::vector<double> shape_rewards(std::span<const double> kl, double sequence_reward, double beta) {
  std::vector<double> out(kl.size());
  for (std::size_t t = 0; t < kl.size(); ++t) out[t] = -beta * kl[t];
  if (!out.empty()) out.back() += sequence_reward;
  return out;
}

std::vector<double> reward_to_go(std::span<const double> shaped) {
  std::vector<double> out(shaped.size());
  double acc = 0.0;
  for (std::size_t t = shaped.size(); t-- > 0;) {
    acc += shaped[t];
    out[t] = acc;
  }
  return out;
}

std::vector<double> whiten(std::span<const double> values) {
  std::vector<double> out(values.begin(), values.end());
  if (out.empty()) return out;
  const double n = static_cast<double>(out.size());
  const double mean = std::accumulate(out.begin(), out.end(), 0.0) / n;
  double var = 0.0;
  for (double v : out) var += (v - mean) * (v - mean);
  var /= n;
  const double inv_std = var > 0.0 ? 1.0 / std::sqrt(var) : 1.0;
  for (double& v : out) v = (v - mean) * inv_std;
  return out;
}

void compute_advantages(RolloutBatch& batch) {
  std::vector<double> all;
  for (Rollout& r : batch.rollouts) {
    r.returns = reward_to_go(r.shaped);
    all.insert(all.end(), r.returns.begin(), r.returns.end());
  }
  const std::vector<double> white = whiten(all);
  std::size_t k = 0;
  for (Rollout& r : batch.rollouts) {
    r.advantages.assign(white.begin() + k, white.begin() + k + r.returns.size());
    k += r.returns.size();
  }
}

RolloutBatch generate_rollouts(const nn::Seq2SeqModel& policy, const nn::Seq2SeqModel& reference,
                               const std::vector<PromptItem>& prompts, const PPOConfig& cfg,
                               const reward::RewardFn& reward_fn, double beta, std::uint64_t seed) {
  RolloutBatch batch;
  batch.beta = beta;
  nn::SamplingConfig sampling;
  sampling.do_sample = true;
  sampling.temperature = cfg.temperature;
  sampling.top_k = policy.config().vocab_size;
  sampling.top_p = 1.0;
  sampling.max_new_tokens = cfg.max_new_tokens;
  const std::size_t max_src = std::min(cfg.max_prompt_tokens, policy.config().max_seq_len);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    Rollout r;
    r.item = prompts[i];
    r.prompt_ids = data::encode_with_eos(r.item.prompt, max_src).ids;
    sampling.seed = derive_seed(seed, "rollout", i);
    r.response = nn::generate(policy, r.prompt_ids, sampling);
    r.response_text = data::detokenize(r.response);
    r.logp_old = nn::sequence_logprob(policy, r.prompt_ids, r.response);
    r.logp_ref = nn::sequence_logprob(reference, r.prompt_ids, r.response);
    r.kl.resize(r.response.size());
    for (std::size_t t = 0; t < r.kl.size(); ++t) r.kl[t] = r.logp_old[t] - r.logp_ref[t];
    try {
      r.reward = reward_fn(r.item.prompt, r.item.statement, r.response_text);
    } catch (const Error& e) {
      throw Error(e.code(), fmt::format("rollout {}: {}", i, e.what()));
    }
    r.shaped = shape_rewards(r.kl, r.reward.total, beta);
    batch.rollouts.push_back(std::move(r));
  }
  compute_advantages(batch);
  return batch;
}

double compute_sequence_kl(const RolloutBatch& batch) {
  if (batch.rollouts.empty()) return 0.0;
  double total = 0.0;
  for (const Rollout& r : batch.rollouts) total += std::accumulate(r.kl.begin(), r.kl.end(), 0.0);
  return total / static_cast<double>(batch.rollouts.size());
}

double weighted_sequence_kl(const std::vector<std::vector<double>>& lp_policy,
                            const std::vector<std::vector<double>>& lp_ref, std::span<const double> weights) {
  if (lp_policy.size() != lp_ref.size() || (!weights.empty() && weights.size() != lp_policy.size())) {
    throw Error("length_mismatch", "weighted_sequence_kl: inputs differ in length");
  }
  if (lp_policy.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < lp_policy.size(); ++i) {
    if (lp_policy[i].size() != lp_ref[i].size()) throw Error("length_mismatch", "weighted_sequence_kl: token counts differ");
    double s = 0.0;
    for (std::size_t t = 0; t < lp_policy[i].size(); ++t) s += lp_policy[i][t] - lp_ref[i][t];
    total += (weights.empty() ? 1.0 / static_cast<double>(lp_policy.size()) : weights[i]) * s;
  }
  return total;
}

std::vector<double> full_vocab_kl(const nn::Seq2SeqModel& policy, const nn::Seq2SeqModel& reference,
                                  std::span<const int> src, std::span<const int> response) {
  ad::TapeScope no_record(nullptr);
  const Tensor lp = ad::log_softmax(policy.forward(src, response));
  const Tensor lr = ad::log_softmax(reference.forward(src, response));
  const std::size_t v = lp.dim(1);
  std::vector<double> out(response.size(), 0.0);
  for (std::size_t t = 0; t < response.size(); ++t) {
    for (std::size_t j = 0; j < v; ++j) {
      const double a = lp.at(t, j);
      out[t] += std::exp(a) * (a - lr.at(t, j));
    }
  }
  return out;
}

double clipped_objective(double ratio, double advantage, double cliprange) {
  return std::min(ratio * advantage, std::clamp(ratio, 1.0 - cliprange, 1.0 + cliprange) * advantage);
}

double adaptive_kl_update(double beta, double observed_kl, double target, int batch_size, double horizon) {
  if (!(target > 0.0)) throw Error("invalid_config", "adaptive KL target must be > 0");
  if (!(beta > 0.0)) throw Error("invalid_config", "KL coefficient must be > 0");
  const double e = std::clamp((observed_kl - target) / target, -0.2, 0.2);
  return beta * (1.0 + e * static_cast<double>(batch_size) / horizon);
}

UpdateStats ppo_update(nn::Seq2SeqModel& policy, optim::Adam& adam, const RolloutBatch& batch, const PPOConfig& cfg,
                       std::uint64_t seed) {
  if (!policy.adapter()) throw Error("missing_adapter", "ppo_update needs an adapter");
  optim::ParamMap params = policy.adapter()->parameters();
  UpdateStats stats;
  double loss_sum = 0.0;
  const std::size_t n = batch.rollouts.size();
  const std::size_t mb = static_cast<std::size_t>(cfg.mini_batch_size);
  for (int epoch = 0; epoch < cfg.ppo_epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, "minibatch", static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    double kl_sum = 0.0;
    std::size_t kl_tokens = 0;
    for (std::size_t start = 0; start < n; start += mb) {
      const std::size_t end = std::min(n, start + mb);
      std::size_t tokens = 0;
      for (std::size_t k = start; k < end; ++k) tokens += batch.rollouts[order[k]].response.size();
      if (tokens == 0) continue;
      const double inv_tokens = 1.0 / static_cast<double>(tokens);
      optim::zero_grads(params);
      double objective = 0.0;
      bool finite = true;
      for (std::size_t k = start; k < end && finite; ++k) {
        const Rollout& r = batch.rollouts[order[k]];
        const std::size_t len = r.response.size();
        ad::Tape tape;
        ad::TapeScope scope(&tape);
        Tensor logp = nn::sequence_logprob_tensor(policy, r.prompt_ids, r.response);
        Tensor ratio = ad::exp(ad::sub(logp, Tensor::from({len}, r.logp_old)));
        for (std::size_t t = 0; t < len; ++t) {
          if (!std::isfinite(ratio.at(t))) finite = false;
          kl_sum += r.logp_old[t] - logp.at(t);
        }
        kl_tokens += len;
        if (!finite) break;
        const Tensor adv = Tensor::from({len}, r.advantages);
        Tensor unclipped = ad::mul(ratio, adv);
        Tensor clipped = ad::mul(ad::clamp(ratio, 1.0 - cfg.cliprange, 1.0 + cfg.cliprange), adv);
        Tensor obj = ad::sum(ad::minimum(unclipped, clipped));
        objective += obj.item();
        tape.backward(ad::scale(obj, -inv_tokens));
      }
      if (!finite) {
        ++stats.skipped;
        log::info("ppo: skipped a mini-batch with a non-finite ratio ({} so far)", stats.skipped);
        optim::zero_grads(params);
        continue;
      }
      optim::clip_grad_norm(params, cfg.grad_clip_norm);
      adam.step(params, cfg.learning_rate);
      optim::zero_grads(params);
      loss_sum += -objective * inv_tokens;
      ++stats.minibatches;
    }
    if (cfg.target_kl && kl_tokens > 0 && kl_sum / static_cast<double>(kl_tokens) > *cfg.target_kl) {
      stats.early_stopped = true;
      break;
    }
  }
  stats.surrogate_loss = stats.minibatches > 0 ? loss_sum / stats.minibatches : 0.0;
  return stats;
}

PPOTrainer::PPOTrainer(nn::Seq2SeqModel& policy, PPOConfig cfg, std::vector<PromptItem> prompts,
                       reward::RewardFn reward_fn, std::uint64_t seed)
    : policy_(policy),
      reference_(policy.with_adapter(policy.adapter() ? policy.adapter()->clone() : nullptr)),
      cfg_(cfg),
      prompts_(std::move(prompts)),
      reward_fn_(std::move(reward_fn)),
      seed_(seed),
      beta_(cfg.init_kl_coeff) {
  cfg_.validate();
  if (!policy_.adapter()) throw Error("missing_adapter", "policy optimization needs an adapter");
  if (prompts_.empty()) throw Error("empty_dataset", "no prompts for policy optimization");
  for (const auto& [name, p] : policy_.parameters()) {
    if (p.requires_grad()) throw Error("base_unfrozen", "base parameter " + name + " is trainable");
  }
  for (auto& [name, t] : reference_.adapter()->parameters()) t.set_requires_grad(false);
  base_hash_ = tensor_map_hash(policy_.parameters());
}

std::vector<PromptItem> PPOTrainer::next_prompts() {
  std::vector<PromptItem> out;
  out.reserve(cfg_.batch_size);
  while (out.size() < static_cast<std::size_t>(cfg_.batch_size)) {
    if (cursor_ >= order_.size()) {
      order_.resize(prompts_.size());
      std::iota(order_.begin(), order_.end(), 0);
      Rng rng(derive_seed(seed_, "prompt-order", pass_++));
      rng.shuffle(order_);
      cursor_ = 0;
    }
    out.push_back(prompts_[order_[cursor_++]]);
  }
  return out;
}

BatchStats PPOTrainer::step() {
  if (done()) throw Error("training_finished", "no batches left");
  const std::uint64_t index = batch_ + 1;
  BatchStats stats;
  stats.batch = index;
  stats.beta = beta_;
  try {
    last_ = generate_rollouts(policy_, reference_, next_prompts(), cfg_, reward_fn_, beta_,
                              derive_seed(seed_, "rollouts", index));
    const double n = static_cast<double>(last_.rollouts.size());
    for (const Rollout& r : last_.rollouts) {
      stats.mean_reward += r.reward.total / n;
      stats.pc_mean += r.reward.pc_raw / n;
      stats.aq_mean += r.reward.aq_raw / n;
      stats.tox_mean += r.reward.tox_raw / n;
    }
    stats.kl = compute_sequence_kl(last_);
    const UpdateStats up = ppo_update(policy_, adam_, last_, cfg_, derive_seed(seed_, "update", index));
    stats.surrogate_loss = up.surrogate_loss;
    stats.skipped = up.skipped;
  } catch (const Error& e) {
    throw Error(e.code(), fmt::format("batch {}: {}", index, e.what()));
  }
  if (cfg_.adaptive_kl) beta_ = adaptive_kl_update(beta_, stats.kl, cfg_.target, cfg_.batch_size, cfg_.horizon);
  batch_ = index;
  return stats;
}

Checkpoint PPOTrainer::policy_checkpoint() const {
  Checkpoint ckpt = policy_.to_checkpoint("ppo-policy");
  const nn::LoraAdapter& adapter = *policy_.adapter();
  ckpt.config["adapter"] = {{"lora", nn::to_json(adapter.config())}, {"d_model", adapter.d_model()}};
  ckpt.meta = {{"batch", batch_}, {"beta", beta_}, {"base_hash", fmt::format("{:016x}", base_hash_)}};
  for (auto& [name, t] : adapter.parameters()) ckpt.tensors.emplace(name, t);
  return ckpt;
}

std::vector<BatchStats> PPOTrainer::run(const PPORunOptions& opts) {
  namespace fs = std::filesystem;
  std::ofstream metrics;
  if (!opts.metrics_path.empty()) {
    if (opts.metrics_path.has_parent_path()) fs::create_directories(opts.metrics_path.parent_path());
    metrics.open(opts.metrics_path, std::ios::trunc);
    if (!metrics) throw Error("io_error", "cannot write metrics to " + opts.metrics_path.string());
    metrics << "batch,mean_reward,pc_mean,aq_mean,tox_mean,kl,beta,surrogate_loss\n";
  }
  const fs::path dir = opts.checkpoint_root.empty() ? fs::path{} : opts.checkpoint_root / "phase3";
  if (!dir.empty()) fs::create_directories(dir);
  auto check_base = [this] {
    if (tensor_map_hash(policy_.parameters()) != base_hash_) {
      throw Error("base_modified", "base weights changed during policy optimization");
    }
  };
  std::vector<BatchStats> history;
  while (!done()) {
    BatchStats s = step();
    if (metrics.is_open()) {
      metrics << fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n", s.batch, s.mean_reward,
                             s.pc_mean, s.aq_mean, s.tox_mean, s.kl, s.beta, s.surrogate_loss);
    }
    log::info("phase3 batch {} reward {:.4f} kl {:.4f} beta {:.5f}", s.batch, s.mean_reward, s.kl, s.beta);
    if (!dir.empty() && cfg_.checkpoint_every > 0 && s.batch % static_cast<std::uint64_t>(cfg_.checkpoint_every) == 0) {
      check_base();
      save_checkpoint_file(dir / fmt::format("batch-{:06d}.ckpt", s.batch), policy_checkpoint());
    }
    history.push_back(s);
  }
  check_base();
  if (!dir.empty()) save_checkpoint_file(dir / "final.ckpt", policy_checkpoint());
  return history;
}

}  // namespace coarl::rl
