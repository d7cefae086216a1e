#include "coarl/pipeline.hpp"

#include <fstream>

#include "coarl/error.hpp"
#include "coarl/log.hpp"
#include "coarl/lora.hpp"
#include "coarl/ppo.hpp"
#include "coarl/reward.hpp"
#include "coarl/trainer.hpp"

namespace coarl::pipeline {

namespace fs = std::filesystem;

RunDir prepare_run_dir(const fs::path& out_dir, const RunConfig& cfg, bool force) {
  if (out_dir.empty()) throw Error("invalid_argument", "an output directory is required");
  if (fs::exists(out_dir)) {
    if (!fs::is_directory(out_dir)) throw Error("run_dir_exists", out_dir.string() + " exists and is not a directory");
    if (!fs::is_empty(out_dir)) {
      if (!force) throw Error("run_dir_exists", out_dir.string() + " is not empty (use --force to overwrite)");
      for (const auto& entry : fs::directory_iterator(out_dir)) fs::remove_all(entry.path());
    }
  }
  RunDir dir{out_dir};
  fs::create_directories(dir.checkpoints());
  fs::create_directories(dir.metrics());
  fs::create_directories(dir.generations());
  std::ofstream out(dir.config(), std::ios::trunc);
  if (!out) throw Error("io_error", "cannot write " + dir.config().string());
  out << to_json(resolve(cfg)).dump(2) << '\n';
  return dir;
}

data::TemplateSet load_templates(const RunConfig& cfg) {
  return cfg.data.templates.empty() ? data::default_templates() : data::TemplateSet::from_file(cfg.data.templates);
}

namespace {

template <typename Result>
void require_clean(const Result& r, const std::string& path) {
  if (r.ok()) return;
  const auto& first = r.issues.front();
  throw Error("invalid_dataset", path + ": " + std::to_string(r.issues.size()) + " problem(s), first at line " +
                                     std::to_string(first.line) + ": " + first.message);
}

std::vector<data::CSRecord> split_or_throw(const RunConfig& cfg, data::Split split) {
  auto records = data::filter_split(load_counterspeech(cfg), split);
  if (records.empty()) {
    throw Error("empty_dataset", cfg.data.counterspeech + " has no records in split " +
                                     std::string(data::split_name(split)));
  }
  return records;
}

}  // namespace

std::vector<data::CSRecord> load_counterspeech(const RunConfig& cfg) {
  auto r = data::load_cs_jsonl(cfg.data.counterspeech);
  require_clean(r, cfg.data.counterspeech);
  return std::move(r.records);
}

std::vector<data::ExplanationRecord> load_explanations(const RunConfig& cfg) {
  auto r = data::load_explanation_jsonl(cfg.data.explanations);
  require_clean(r, cfg.data.explanations);
  return std::move(r.records);
}

nn::Seq2SeqModel load_model(const fs::path& checkpoint, const std::optional<fs::path>& adapter_path) {
  const Checkpoint ckpt = load_checkpoint_file(checkpoint);
  if (ckpt.kind != "model" && ckpt.kind != "ppo-policy") {
    throw Error("wrong_kind", checkpoint.string() + " holds a '" + ckpt.kind + "' checkpoint, not a model");
  }
  nn::Seq2SeqModel model = nn::Seq2SeqModel::from_checkpoint(ckpt);
  std::shared_ptr<nn::LoraAdapter> adapter;
  if (adapter_path) {
    adapter = nn::load_adapter(*adapter_path, model);
  } else if (ckpt.kind == "ppo-policy") {
    adapter = nn::adapter_from_checkpoint(ckpt, model);
  }
  if (adapter) {
    model.freeze_all();
    model.set_adapter(adapter);
  }
  return model;
}

fs::path run_phase1(const RunConfig& cfg, const RunDir& dir) {
  const auto explanations = load_explanations(cfg);
  const std::uint64_t seed = phase1_seed(cfg);
  nn::Seq2SeqModel model(cfg.model, model_init_seed(cfg));
  log::info("phase1: {} explanation records, {} parameters", explanations.size(), cfg.model.parameter_count());
  train::SupervisedTrainer trainer(model, train::Phase::kInstruction, cfg.phase1,
                                   train::mixture_source(explanations, seed, cfg.data.mixing, load_templates(cfg)),
                                   seed);
  trainer.run({dir.checkpoints(), dir.metrics() / "phase1.csv", {}});
  return dir.checkpoints() / "phase1" / "final.ckpt";
}

fs::path run_phase2(const RunConfig& cfg, const RunDir& dir, const fs::path& base) {
  if (!fs::exists(base)) throw Error("missing_file", "phase-1 checkpoint not found: " + base.string());
  const auto templates = load_templates(cfg);
  auto train_set = split_or_throw(cfg, data::Split::kTrain);
  std::vector<data::PromptSample> dev;
  for (const auto& r : data::filter_split(load_counterspeech(cfg), data::Split::kDev)) {
    dev.push_back(data::counterspeech_sample(r, templates));
  }
  nn::Seq2SeqModel model = load_model(base);
  if (model.config() != cfg.model) {
    log::info("phase2: using the architecture stored in {}", base.string());
  }
  nn::attach(model, cfg.lora, lora_init_seed(cfg));
  const std::uint64_t seed = phase2_seed(cfg);
  log::info("phase2: {} training pairs, {} dev pairs", train_set.size(), dev.size());
  train::SupervisedTrainer trainer(model, train::Phase::kAdapter, cfg.phase2,
                                   train::counterspeech_source(std::move(train_set), seed, templates), seed);
  trainer.run({dir.checkpoints(), dir.metrics() / "phase2.csv", std::move(dev)});
  return dir.checkpoints() / "phase2" / "final.ckpt";
}

fs::path run_phase3(const RunConfig& cfg, const RunDir& dir, const fs::path& base, const fs::path& adapter) {
  if (!fs::exists(base)) throw Error("missing_file", "base checkpoint not found: " + base.string());
  if (!fs::exists(adapter)) throw Error("missing_file", "adapter checkpoint not found: " + adapter.string());
  const auto templates = load_templates(cfg);
  std::vector<rl::PromptItem> prompts;
  for (const auto& r : split_or_throw(cfg, data::Split::kTrain)) {
    prompts.push_back({data::render_instruction(data::TaskId::kI8, r.hate_speech, r.intent, templates), r.hate_speech});
  }
  nn::Seq2SeqModel policy = load_model(base, adapter);
  rl::PPOTrainer trainer(policy, cfg.ppo, std::move(prompts), reward::make_reward_fn(cfg.reward), phase3_seed(cfg));
  trainer.run({dir.checkpoints(), dir.metrics() / "phase3.csv"});
  return dir.checkpoints() / "phase3" / "final.ckpt";
}

fs::path run_generate(const RunConfig& cfg, const RunDir& dir, const nn::Seq2SeqModel& model) {
  const auto split = data::parse_split(cfg.eval.split);
  const auto records = split_or_throw(cfg, *split);
  const auto gens = eval::generate_outputs(model, records, cfg.sampling, cfg.eval.max_input_tokens, load_templates(cfg));
  const fs::path out = dir.generations() / "generations.jsonl";
  eval::save_generations(out, gens);
  return out;
}

eval::MetricReport run_evaluate(const RunConfig& cfg, const fs::path& generations, const nn::Seq2SeqModel* model,
                                const std::optional<RunDir>& dir) {
  const auto split = data::parse_split(cfg.eval.split);
  const auto records = split_or_throw(cfg, *split);
  const reward::CompositeReward scorers = reward::make_composite(cfg.reward);
  eval::EvalOptions opts;
  opts.embedding_model = cfg.eval.model_embeddings ? model : nullptr;
  opts.scorers = &scorers;
  eval::MetricReport report = eval::evaluate_run(eval::load_generations(generations), records, opts);
  if (dir) {
    fs::create_directories(dir->metrics());
    std::ofstream(dir->metrics() / "report.txt") << eval::render_table(report);
    std::ofstream(dir->metrics() / "report.csv") << eval::render_csv(report);
    std::ofstream(dir->metrics() / "report.json") << eval::to_json(report).dump(2) << '\n';
  }
  return report;
}

}  // namespace coarl::pipeline
