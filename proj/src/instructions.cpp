#include "coarl/instructions.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>

#include "coarl/error.hpp"
#include "coarl/rng.hpp"

namespace coarl::data {
namespace {

constexpr std::array<std::string_view, kTaskCount> kBuiltinTemplates = {
    "Analyze the offensiveness of the statement: {HS}",
    "Identify the group of people that the speaker is targeting or discriminating against in the "
    "offensive statement: {HS}",
    "Analyze the speaker's intention behind writing the offensive statement: {HS}",
    "Explain the underlying power dynamics between the speaker and the target group in the "
    "offensive statement: {HS}",
    "Explain the implied meaning underlying the offensive statement: {HS}",
    "Describe how the target group might feel emotionally after reading or listening to the "
    "offensive statement: {HS}",
    "Describe how the target group might react cognitively after reading or listening to the "
    "offensive statement: {HS}",
    "Analyze the different aspects such as offensiveness, target group, stereotype, power dynamics, "
    "implied meaning, emotional, and cognitive reactions before writing a {INT} counterspeech for "
    "the offensive statement: {HS}",
};

constexpr std::string_view kHs = "{HS}";
constexpr std::string_view kInt = "{INT}";

std::size_t count_of(std::string_view text, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string_view::npos; pos = text.find(needle, pos + needle.size())) {
    ++n;
  }
  return n;
}

void check_template(TaskId t, const std::string& text) {
  const std::size_t hs = count_of(text, kHs);
  const std::size_t in = count_of(text, kInt);
  const std::string name = task_name(t);
  if (hs != 1) throw Error("invalid_template", name + ": template must contain {HS} exactly once");
  if (t == TaskId::kI8 && in != 1) throw Error("invalid_template", name + ": template must contain {INT} exactly once");
  if (t != TaskId::kI8 && in != 0) throw Error("invalid_template", name + ": only I8 may use {INT}");
}

// Left-to-right single pass, so placeholder text inside the statement itself
// is never expanded.
std::string substitute(std::string_view tmpl, std::string_view hs, std::string_view intent) {
  std::string out;
  out.reserve(tmpl.size() + hs.size() + intent.size());
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl.compare(i, kHs.size(), kHs) == 0) {
      out += hs;
      i += kHs.size();
    } else if (tmpl.compare(i, kInt.size(), kInt) == 0) {
      out += intent;
      i += kInt.size();
    } else {
      out += tmpl[i++];
    }
  }
  return out;
}

std::string capitalized(std::string_view word) {
  std::string s(word);
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

constexpr std::string_view kPreamble =
    "An Informative Counterspeech answers a hateful statement with facts and evidence that correct "
    "the claim it makes.\n"
    "A Positive Counterspeech answers with empathy and affiliation, reaching out to the speaker "
    "without hostility.\n"
    "A Questioning Counterspeech asks the speaker about the assumptions behind the statement so that "
    "its weak points become visible.\n"
    "A Denouncing Counterspeech names the statement as hateful and rejects it firmly while staying "
    "respectful.\n"
    "\n"
    "A good counterspeech stays on the topic of the statement, argues against its content, and "
    "contains no insults or provocation.";

}  // namespace

std::string task_name(TaskId t) { return "I" + std::to_string(static_cast<int>(t)); }

std::optional<TaskId> parse_task(std::string_view s) {
  if (s.size() != 2 || (s[0] != 'I' && s[0] != 'i') || s[1] < '1' || s[1] > '8') return std::nullopt;
  return static_cast<TaskId>(s[1] - '0');
}

TaskId task_for_dimension(Dimension d) { return static_cast<TaskId>(static_cast<int>(d) + 1); }

TemplateSet::TemplateSet() {
  for (std::size_t i = 0; i < kTaskCount; ++i) texts_[i] = std::string(kBuiltinTemplates[i]);
}

TemplateSet TemplateSet::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error("invalid_template", "templates must be a JSON object keyed by task id");
  TemplateSet set;
  for (const auto& [key, value] : j.items()) {
    auto task = parse_task(key);
    if (!task) throw Error("invalid_template", "unknown task id '" + key + "'");
    if (!value.is_string()) throw Error("invalid_template", key + ": template must be a string");
    std::string text = value.get<std::string>();
    check_template(*task, text);
    set.texts_[static_cast<std::size_t>(*task) - 1] = std::move(text);
  }
  return set;
}

TemplateSet TemplateSet::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("missing_file", "cannot open template file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("invalid_template", path.string() + ": " + e.what());
  }
  return from_json(j);
}

nlohmann::json TemplateSet::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < kTaskCount; ++i) j[task_name(static_cast<TaskId>(i + 1))] = texts_[i];
  return j;
}

const TemplateSet& default_templates() {
  static const TemplateSet set;
  return set;
}

std::string render_instruction(TaskId task, std::string_view hs, std::optional<Intent> intent,
                               const TemplateSet& templates) {
  if (task == TaskId::kI8 && !intent) {
    throw Error("missing_intent", "I8 needs an intent");
  }
  if (task != TaskId::kI8 && intent) {
    throw Error("unexpected_intent", task_name(task) + " takes no intent");
  }
  return substitute(templates.text(task), hs, intent ? intent_word(*intent) : std::string_view{});
}

std::string_view mixing_name(MixingMode m) { return m == MixingMode::kUniform ? "uniform" : "balanced"; }

std::optional<MixingMode> parse_mixing(std::string_view s) {
  if (s == "uniform") return MixingMode::kUniform;
  if (s == "balanced") return MixingMode::kBalanced;
  return std::nullopt;
}

std::vector<PromptSample> build_multitask_mixture(const std::vector<ExplanationRecord>& explanations,
                                                  std::uint64_t seed, std::uint64_t epoch, MixingMode mode,
                                                  const TemplateSet& templates) {
  std::array<std::vector<const ExplanationRecord*>, kDimensionCount> by_dim;
  for (const auto& r : explanations) by_dim[static_cast<std::size_t>(r.dimension)].push_back(&r);
  std::size_t largest = 0;
  for (Dimension d : kAllDimensions) {
    const auto& group = by_dim[static_cast<std::size_t>(d)];
    if (group.empty()) {
      throw Error("missing_dimension", "no explanation records for dimension " + std::string(dimension_name(d)));
    }
    largest = std::max(largest, group.size());
  }

  std::vector<PromptSample> samples;
  for (Dimension d : kAllDimensions) {
    const auto& group = by_dim[static_cast<std::size_t>(d)];
    const TaskId task = task_for_dimension(d);
    const std::size_t count = mode == MixingMode::kUniform ? group.size() : largest;
    for (std::size_t i = 0; i < count; ++i) {
      const ExplanationRecord& r = *group[i % group.size()];
      samples.push_back({task, render_instruction(task, r.statement, std::nullopt, templates), r.explanation});
    }
  }
  Rng rng(derive_seed(seed, "mixture", epoch));
  rng.shuffle(samples);
  return samples;
}

PromptSample counterspeech_sample(const CSRecord& rec, const TemplateSet& templates) {
  return {TaskId::kI8, render_instruction(TaskId::kI8, rec.hate_speech, rec.intent, templates), rec.counterspeech};
}

std::string build_fewshot_prompt(std::string_view query_hs, Intent intent, const std::vector<CSRecord>& exemplars,
                                 std::string_view preamble) {
  const std::string label = capitalized(intent_word(intent)) + " Counterspeech";
  std::string out;
  if (!preamble.empty()) {
    out += preamble;
    out += "\n\n";
  }
  out += "»»»» Instruction »»»»\n";
  out += "Given a hate speech statement, generate a " + label + " by following the definitions given above.\n";
  if (!exemplars.empty()) {
    out += "\n»»»» Examples »»»»\n";
    for (const CSRecord& ex : exemplars) {
      out += "Statement – " + ex.hate_speech + "\n";
      out += label + " – " + ex.counterspeech + "\n";
    }
  }
  out += "\nStatement – ";
  out += query_hs;
  out += "\n" + label + " –";
  return out;
}

std::string_view default_preamble() { return kPreamble; }

}  // namespace coarl::data
