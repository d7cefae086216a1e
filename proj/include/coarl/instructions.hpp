#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "coarl/dataset.hpp"

namespace coarl::data {

// I1..I7 are explanation tasks, I8 is intent-conditioned counterspeech.
enum class TaskId { kI1 = 1, kI2, kI3, kI4, kI5, kI6, kI7, kI8 };

inline constexpr std::size_t kTaskCount = 8;

std::string task_name(TaskId t);  // "I1" .. "I8"
std::optional<TaskId> parse_task(std::string_view s);
TaskId task_for_dimension(Dimension d);

class TemplateSet {
 public:
  /// The built-in templates.
  TemplateSet();

  const std::string& text(TaskId t) const { return texts_[static_cast<std::size_t>(t) - 1]; }

  /// Overrides from a JSON object {"I1": "...", ...}. Tasks not listed keep
  /// the built-in text. Every template must contain {HS}; only I8 may (and
  /// must) contain {INT}.
  static TemplateSet from_json(const nlohmann::json& j);
  static TemplateSet from_file(const std::filesystem::path& path);
  nlohmann::json to_json() const;

 private:
  std::array<std::string, kTaskCount> texts_;
};

const TemplateSet& default_templates();

/// Errors: "missing_intent" for I8 without an intent, "unexpected_intent" for
/// I1..I7 with one.
std::string render_instruction(TaskId task, std::string_view hs, std::optional<Intent> intent,
                               const TemplateSet& templates = default_templates());

struct PromptSample {
  TaskId task = TaskId::kI1;
  std::string prompt;
  std::string target;
};

enum class MixingMode {
  kUniform,   // every record once per epoch, one seeded shuffle over all tasks
  kBalanced,  // smaller tasks are upsampled to the size of the largest
};

std::string_view mixing_name(MixingMode m);
std::optional<MixingMode> parse_mixing(std::string_view s);

/// One epoch of the explanation mixture. Errors "missing_dimension" when any
/// of the seven dimensions has no records.
std::vector<PromptSample> build_multitask_mixture(const std::vector<ExplanationRecord>& explanations,
                                                  std::uint64_t seed, std::uint64_t epoch = 0,
                                                  MixingMode mode = MixingMode::kUniform,
                                                  const TemplateSet& templates = default_templates());

/// I8 prompt for a counterspeech record, target = its counterspeech.
PromptSample counterspeech_sample(const CSRecord& rec, const TemplateSet& templates = default_templates());

/// Preamble, instruction, optional exemplar block and the open query.
std::string build_fewshot_prompt(std::string_view query_hs, Intent intent,
                                 const std::vector<CSRecord>& exemplars, std::string_view preamble);

/// Short built-in preamble defining the four intents.
std::string_view default_preamble();

}  // namespace coarl::data
