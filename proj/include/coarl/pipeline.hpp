#pragma once

// Phase drivers shared by the command-line tool and the end-to-end tests.
// Every phase runs in its own run directory:
//   <out>/config.json      resolved configuration, written before training
//   <out>/checkpoints/     phase1/, phase2/, phase3/, best/
//   <out>/metrics/         CSV logs and evaluation reports
//   <out>/generations/     decoded outputs

#include <filesystem>
#include <optional>
#include <vector>

#include "coarl/config.hpp"
#include "coarl/evaluate.hpp"
#include "coarl/model.hpp"

namespace coarl::pipeline {

struct RunDir {
  std::filesystem::path root;
  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path metrics() const { return root / "metrics"; }
  std::filesystem::path generations() const { return root / "generations"; }
  std::filesystem::path config() const { return root / "config.json"; }
};

/// Creates the layout and writes the resolved config. A non-empty existing
/// directory is an error ("run_dir_exists") unless `force`, which clears it.
RunDir prepare_run_dir(const std::filesystem::path& out_dir, const RunConfig& cfg, bool force);

data::TemplateSet load_templates(const RunConfig& cfg);
/// Loads and validates; any validation issue is an error ("invalid_dataset").
std::vector<data::CSRecord> load_counterspeech(const RunConfig& cfg);
std::vector<data::ExplanationRecord> load_explanations(const RunConfig& cfg);

/// Base model (kind "model" or "ppo-policy") plus an optional adapter. A
/// policy checkpoint brings its own adapter; `adapter_path` overrides it.
nn::Seq2SeqModel load_model(const std::filesystem::path& checkpoint,
                            const std::optional<std::filesystem::path>& adapter_path = std::nullopt);

/// Each returns the path of the checkpoint the phase produces.
std::filesystem::path run_phase1(const RunConfig& cfg, const RunDir& dir);
std::filesystem::path run_phase2(const RunConfig& cfg, const RunDir& dir, const std::filesystem::path& base);
std::filesystem::path run_phase3(const RunConfig& cfg, const RunDir& dir, const std::filesystem::path& base,
                                 const std::filesystem::path& adapter);

/// Decodes the configured evaluation split to <out>/generations/generations.jsonl.
std::filesystem::path run_generate(const RunConfig& cfg, const RunDir& dir, const nn::Seq2SeqModel& model);

/// Scores generations against the configured split; writes report.txt,
/// report.csv and report.json under <out>/metrics when `dir` is given.
eval::MetricReport run_evaluate(const RunConfig& cfg, const std::filesystem::path& generations,
                                const nn::Seq2SeqModel* model, const std::optional<RunDir>& dir);

}  // namespace coarl::pipeline
