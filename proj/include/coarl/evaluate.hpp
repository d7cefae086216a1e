#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "coarl/dataset.hpp"
#include "coarl/instructions.hpp"
#include "coarl/model.hpp"
#include "coarl/reward.hpp"

namespace coarl::eval {

struct Generation {
  std::string id;
  data::Intent intent = data::Intent::kInformative;
  std::string generated;
};

nlohmann::json to_json(const Generation& g);
std::vector<Generation> load_generations(const std::filesystem::path& path);
void save_generations(const std::filesystem::path& path, const std::vector<Generation>& gens);

/// Greedy (or configured) decoding of the I8 prompt for each record.
std::vector<Generation> generate_outputs(const nn::Seq2SeqModel& model, const std::vector<data::CSRecord>& records,
                                         const nn::SamplingConfig& sampling, int max_input_tokens,
                                         const data::TemplateSet& templates = data::default_templates());

// Column order of the report.
inline constexpr std::array<const char*, 10> kMetricNames = {"R1", "R2", "RL", "METEOR", "CosineSim",
                                                            "CA", "Toxicity", "PC_ref", "AQ_ref", "Reward_ref"};

struct SampleMetrics {
  std::string id;
  data::Intent intent = data::Intent::kInformative;
  std::array<double, kMetricNames.size()> values{};
};

struct MetricReport {
  std::vector<SampleMetrics> samples;
  std::array<double, kMetricNames.size()> overall{};
  std::map<data::Intent, std::array<double, kMetricNames.size()>> per_intent;
  std::map<data::Intent, std::size_t> counts;
};

struct EvalOptions {
  const nn::Seq2SeqModel* embedding_model = nullptr;  // byte histograms when null
  const reward::CompositeReward* scorers = nullptr;   // required
};

/// Joins generations with the test set by id; every id must appear on both
/// sides with the same intent (error "id_mismatch").
MetricReport evaluate_run(const std::vector<Generation>& generations, const std::vector<data::CSRecord>& test_set,
                          const EvalOptions& opts);

/// Fixed-width table: one row per intent present plus "ALL".
std::string render_table(const MetricReport& report);
std::string render_csv(const MetricReport& report);
nlohmann::json to_json(const MetricReport& report);

}  // namespace coarl::eval
