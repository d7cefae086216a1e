#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <istream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace coarl::data {

enum class Intent { kInformative, kPositive, kQuestioning, kDenouncing };

inline constexpr std::array<Intent, 4> kAllIntents = {Intent::kInformative, Intent::kPositive,
                                                      Intent::kQuestioning, Intent::kDenouncing};

/// "INF" / "POS" / "QUE" / "DEN".
std::string_view intent_code(Intent intent);
/// Lowercase word used inside instructions, e.g. "positive".
std::string_view intent_word(Intent intent);
/// Accepts the codes and the words, case-insensitively.
std::optional<Intent> parse_intent(std::string_view s);

// The seven explanation facets of a hateful statement.
enum class Dimension {
  kOffensiveness,
  kTargetGroup,
  kSpeakerIntent,
  kPowerDynamics,
  kImplication,
  kEmotionalReaction,
  kCognitiveReaction,
};

inline constexpr std::size_t kDimensionCount = 7;
inline constexpr std::array<Dimension, kDimensionCount> kAllDimensions = {
    Dimension::kOffensiveness,     Dimension::kTargetGroup, Dimension::kSpeakerIntent,
    Dimension::kPowerDynamics,     Dimension::kImplication, Dimension::kEmotionalReaction,
    Dimension::kCognitiveReaction};

std::string_view dimension_name(Dimension d);
std::optional<Dimension> parse_dimension(std::string_view s);

enum class Split { kTrain, kDev, kTest };
std::string_view split_name(Split s);
std::optional<Split> parse_split(std::string_view s);

struct CSRecord {
  std::string id;
  std::string hate_speech;
  Intent intent = Intent::kInformative;
  std::string counterspeech;
  std::optional<std::string> target_group;
  Split split = Split::kTrain;
  nlohmann::json extra = nlohmann::json::object();  // unknown fields, preserved verbatim
};

struct ExplanationRecord {
  std::string statement;
  Dimension dimension = Dimension::kOffensiveness;
  std::string explanation;
  nlohmann::json extra = nlohmann::json::object();
};

struct ValidationIssue {
  std::size_t line = 0;  // 1-based
  std::string message;
};

template <typename Record>
struct LoadResult {
  std::vector<Record> records;
  std::vector<ValidationIssue> issues;
  bool ok() const { return issues.empty(); }
};

// Line-oriented readers. Every line is checked and every problem is reported;
// records with problems are left out of `records`. Blank lines are skipped.
LoadResult<CSRecord> parse_cs_jsonl(std::istream& in);
LoadResult<ExplanationRecord> parse_explanation_jsonl(std::istream& in);
LoadResult<CSRecord> load_cs_jsonl(const std::filesystem::path& path);
LoadResult<ExplanationRecord> load_explanation_jsonl(const std::filesystem::path& path);

nlohmann::json to_json(const CSRecord& r);
nlohmann::json to_json(const ExplanationRecord& r);

std::vector<CSRecord> filter_split(const std::vector<CSRecord>& records, Split split);

}  // namespace coarl::data
