#include "coarl/trainer.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include <fmt/format.h>

#include "coarl/error.hpp"
#include "coarl/json_fields.hpp"
#include "coarl/log.hpp"
#include "coarl/lora.hpp"
#include "coarl/rng.hpp"
#include "coarl/tokenizer.hpp"

namespace coarl::train {

using ad::Tensor;

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw Error("invalid_config", "learning_rate must be a finite value >= 0");
  }
  if (batch_size < 1) throw Error("invalid_config", "batch_size must be >= 1");
  if (epochs < 1) throw Error("invalid_config", "epochs must be >= 1");
  if (max_input_tokens < 2) throw Error("invalid_config", "max_input_tokens must be >= 2");
  if (max_steps && *max_steps < 1) throw Error("invalid_config", "max_steps must be >= 1");
}

TrainConfig phase1_defaults() { return TrainConfig{}; }

TrainConfig phase2_defaults() {
  TrainConfig c;
  c.learning_rate = 4e-6;
  c.epochs = 16;
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j = {{"learning_rate", c.learning_rate},
                      {"batch_size", c.batch_size},
                      {"epochs", c.epochs},
                      {"max_input_tokens", c.max_input_tokens},
                      {"grad_clip_norm", c.grad_clip_norm}};
  if (c.seed) j["seed"] = *c.seed;
  if (c.max_steps) j["max_steps"] = *c.max_steps;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& path, TrainConfig c) {
  JsonFields f(j, path);
  f.read("learning_rate", c.learning_rate);
  f.read("batch_size", c.batch_size);
  f.read("epochs", c.epochs);
  f.read("max_input_tokens", c.max_input_tokens);
  f.read("grad_clip_norm", c.grad_clip_norm);
  std::uint64_t seed = 0;
  if (f.read("seed", seed)) c.seed = seed;
  int max_steps = 0;
  if (f.read("max_steps", max_steps)) c.max_steps = max_steps;
  f.finish();
  return c;
}

std::string phase_dir(Phase p) { return p == Phase::kInstruction ? "phase1" : "phase2"; }

TrainExample make_example(const data::PromptSample& s, std::size_t max_input_tokens, std::size_t max_target_tokens) {
  TrainExample ex;
  ex.task = s.task;
  data::Encoded src = data::encode_with_eos(s.prompt, max_input_tokens);
  data::Encoded tgt = data::encode_with_eos(s.target, max_target_tokens);
  if (src.truncated) {
    log::debug("prompt truncated from {} to {} tokens", src.original_length + 1, src.ids.size());
  }
  ex.src = std::move(src.ids);
  ex.tgt = std::move(tgt.ids);
  return ex;
}

EpochSource mixture_source(std::vector<data::ExplanationRecord> explanations, std::uint64_t seed,
                           data::MixingMode mode, data::TemplateSet templates) {
  return [explanations = std::move(explanations), seed, mode, templates = std::move(templates)](std::uint64_t epoch) {
    return data::build_multitask_mixture(explanations, seed, epoch, mode, templates);
  };
}

EpochSource counterspeech_source(std::vector<data::CSRecord> records, std::uint64_t seed,
                                 data::TemplateSet templates) {
  return [records = std::move(records), seed, templates = std::move(templates)](std::uint64_t epoch) {
    std::vector<data::PromptSample> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(data::counterspeech_sample(r, templates));
    Rng rng(derive_seed(seed, "phase2-order", epoch));
    rng.shuffle(out);
    return out;
  };
}

SupervisedTrainer::SupervisedTrainer(nn::Seq2SeqModel& model, Phase phase, TrainConfig cfg, EpochSource source,
                                     std::uint64_t seed)
    : model_(model), phase_(phase), cfg_(cfg), source_(std::move(source)), seed_(seed) {
  cfg_.validate();
  if (phase_ == Phase::kAdapter) {
    if (!model_.adapter()) throw Error("missing_adapter", "adapter training needs an attached adapter");
    check_base();
    base_hash_ = tensor_map_hash(model_.parameters());
  } else {
    for (const auto& [name, p] : model_.parameters()) {
      if (!p.requires_grad()) throw Error("frozen_model", "instruction tuning needs an unfrozen model (" + name + ")");
    }
  }
}

void SupervisedTrainer::check_base() const {
  for (const auto& [name, p] : model_.parameters()) {
    if (p.requires_grad()) throw Error("base_unfrozen", "base parameter " + name + " is trainable");
  }
}

optim::ParamMap SupervisedTrainer::trainable() const {
  if (phase_ == Phase::kAdapter) return model_.adapter()->parameters();
  return model_.parameters();
}

const std::vector<TrainExample>& SupervisedTrainer::epoch_examples() {
  if (cached_epoch_ != epoch_) {
    const std::vector<data::PromptSample> samples = source_(epoch_);
    if (samples.empty()) throw Error("empty_dataset", "no training samples");
    const std::size_t max_tgt = model_.config().max_seq_len;
    const std::size_t max_src = std::min<std::size_t>(cfg_.max_input_tokens, max_tgt);
    cached_.clear();
    cached_.reserve(samples.size());
    for (const auto& s : samples) cached_.push_back(make_example(s, max_src, max_tgt));
    cached_epoch_ = epoch_;
  }
  return cached_;
}

bool SupervisedTrainer::done() const {
  if (cfg_.max_steps && step_ >= static_cast<std::uint64_t>(*cfg_.max_steps)) return true;
  return epoch_ >= static_cast<std::uint64_t>(cfg_.epochs);
}

StepStats SupervisedTrainer::step() {
  if (done()) throw Error("training_finished", "no steps left");
  const std::vector<TrainExample>& examples = epoch_examples();
  const std::size_t begin = offset_;
  const std::size_t end = std::min(examples.size(), begin + static_cast<std::size_t>(cfg_.batch_size));
  const double inv_batch = 1.0 / static_cast<double>(end - begin);

  StepStats stats;
  stats.step = step_ + 1;
  stats.epoch = epoch_;

  optim::ParamMap params = trainable();
  optim::zero_grads(params);
  Rng dropout_rng(derive_seed(seed_, "dropout", stats.step));
  const nn::ForwardOptions opts{&dropout_rng};
  std::map<data::TaskId, std::pair<double, int>> per_task;
  for (std::size_t i = begin; i < end; ++i) {
    const TrainExample& ex = examples[i];
    ad::Tape tape;
    ad::TapeScope scope(&tape);
    Tensor logits = model_.forward(ex.src, ex.tgt, opts);
    Tensor loss = ad::cross_entropy(logits, ex.tgt, kPadId);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw Error("non_finite_loss", fmt::format("step {} epoch {} sample {} ({}): loss is {}", stats.step, epoch_,
                                                 i, data::task_name(ex.task), value));
    }
    tape.backward(ad::scale(loss, inv_batch));
    stats.loss += value * inv_batch;
    auto& acc = per_task[ex.task];
    acc.first += value;
    acc.second += 1;
  }
  for (const auto& [task, acc] : per_task) stats.task_loss[task] = acc.first / acc.second;

  stats.grad_norm = optim::clip_grad_norm(params, cfg_.grad_clip_norm);
  if (!std::isfinite(stats.grad_norm)) {
    throw Error("non_finite_loss", fmt::format("step {}: gradient norm is {}", stats.step, stats.grad_norm));
  }
  adam_.step(params, cfg_.learning_rate);
  optim::zero_grads(params);

  ++step_;
  offset_ = end;
  if (offset_ >= examples.size()) {
    stats.epoch_end = true;
    ++epoch_;
    offset_ = 0;
  }
  return stats;
}

double SupervisedTrainer::evaluate(const std::vector<data::PromptSample>& samples) const {
  if (samples.empty()) throw Error("empty_dataset", "no evaluation samples");
  ad::TapeScope no_record(nullptr);
  const std::size_t max_tgt = model_.config().max_seq_len;
  const std::size_t max_src = std::min<std::size_t>(cfg_.max_input_tokens, max_tgt);
  double total = 0.0;
  for (const auto& s : samples) {
    const TrainExample ex = make_example(s, max_src, max_tgt);
    total += ad::cross_entropy(model_.forward(ex.src, ex.tgt), ex.tgt, kPadId).item();
  }
  return total / static_cast<double>(samples.size());
}

Checkpoint SupervisedTrainer::product() const {
  if (phase_ == Phase::kAdapter) return nn::adapter_to_checkpoint(*model_.adapter(), model_);
  return model_.to_checkpoint("model");
}

Checkpoint SupervisedTrainer::state() const {
  Checkpoint ckpt = product();
  for (auto& [name, t] : adam_.state_tensors()) ckpt.tensors.emplace(name, t);
  ckpt.meta["train_state"] = {{"phase", phase_dir(phase_)},
                              {"step", step_},
                              {"epoch", epoch_},
                              {"offset", offset_},
                              {"adam_steps", adam_.steps()}};
  return ckpt;
}

void SupervisedTrainer::restore(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("train_state")) {
    throw Error("wrong_kind", "checkpoint carries no training state");
  }
  const nlohmann::json& st = ckpt.meta.at("train_state");
  if (st.at("phase").get<std::string>() != phase_dir(phase_)) {
    throw Error("wrong_kind", "training state belongs to " + st.at("phase").get<std::string>());
  }
  optim::ParamMap params = trainable();
  for (auto& [name, p] : params) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) throw Error("corrupt_checkpoint", "training state is missing " + name);
    if (it->second.shape() != p.shape()) throw Error("shape_mismatch", "training state tensor " + name);
    p.values() = it->second.values();
  }
  adam_.load_state(ckpt.tensors, st.at("adam_steps").get<std::uint64_t>());
  step_ = st.at("step").get<std::uint64_t>();
  epoch_ = st.at("epoch").get<std::uint64_t>();
  offset_ = st.at("offset").get<std::size_t>();
}

std::vector<StepStats> SupervisedTrainer::run(const TrainerOptions& opts) {
  namespace fs = std::filesystem;
  std::ofstream metrics;
  if (!opts.metrics_path.empty()) {
    const bool fresh = !fs::exists(opts.metrics_path) || fs::file_size(opts.metrics_path) == 0;
    if (opts.metrics_path.has_parent_path()) fs::create_directories(opts.metrics_path.parent_path());
    metrics.open(opts.metrics_path, std::ios::app);
    if (!metrics) throw Error("io_error", "cannot write metrics to " + opts.metrics_path.string());
    if (fresh) metrics << "step,task,loss,lr,grad_norm\n";
  }
  const fs::path phase_path = opts.checkpoint_root.empty() ? fs::path{} : opts.checkpoint_root / phase_dir(phase_);
  if (!phase_path.empty()) fs::create_directories(phase_path);

  std::vector<StepStats> history;
  double best = std::numeric_limits<double>::infinity();
  double epoch_sum = 0.0;
  std::size_t epoch_batches = 0;
  while (!done()) {
    StepStats s = step();
    epoch_sum += s.loss;
    ++epoch_batches;
    if (metrics.is_open()) {
      metrics << fmt::format("{},all,{:.17g},{:.17g},{:.17g}\n", s.step, s.loss, cfg_.learning_rate, s.grad_norm);
      for (const auto& [task, loss] : s.task_loss) {
        metrics << fmt::format("{},{},{:.17g},{:.17g},\n", s.step, data::task_name(task), loss, cfg_.learning_rate);
      }
    }
    log::debug("{} step {} loss {:.6f} grad_norm {:.4f}", phase_dir(phase_), s.step, s.loss, s.grad_norm);
    const bool last = done();
    if (s.epoch_end || last) {
      if (phase_ == Phase::kAdapter) {
        check_base();
        if (tensor_map_hash(model_.parameters()) != base_hash_) {
          throw Error("base_modified", "base weights changed during adapter training");
        }
      }
      const double train_mean = epoch_sum / static_cast<double>(epoch_batches);
      const double score = opts.dev.empty() ? train_mean : evaluate(opts.dev);
      log::info("{} epoch {} done at step {}: train loss {:.6f}{}", phase_dir(phase_), s.epoch + 1, s.step,
                train_mean, opts.dev.empty() ? std::string() : fmt::format(", dev loss {:.6f}", score));
      epoch_sum = 0.0;
      epoch_batches = 0;
      if (!phase_path.empty() && s.epoch_end) {
        const std::string name = fmt::format("epoch-{:03d}.ckpt", s.epoch + 1);
        save_checkpoint_file(phase_path / name, state());
        if (score < best) {
          best = score;
          const fs::path best_dir = opts.checkpoint_root / "best";
          fs::create_directories(best_dir);
          const fs::path link = best_dir / (phase_dir(phase_) + ".ckpt");
          fs::remove(link);
          fs::create_symlink(fs::path("..") / phase_dir(phase_) / name, link);
        }
      }
    }
    history.push_back(std::move(s));
  }
  if (metrics.is_open()) metrics.flush();
  if (!phase_path.empty()) save_checkpoint_file(phase_path / "final.ckpt", product());
  return history;
}

}  // namespace coarl::train
