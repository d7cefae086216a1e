#include "coarl/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include "coarl/error.hpp"

namespace coarl::data {
namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

constexpr std::array<std::string_view, kDimensionCount> kDimensionNames = {
    "offensiveness", "target_group",       "speaker_intent",    "power_dynamics",
    "implication",   "emotional_reaction", "cognitive_reaction"};

// Pulls a required non-empty string field; records the problem otherwise.
std::optional<std::string> take_text(nlohmann::json& obj, const char* key,
                                     std::vector<std::string>& problems) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    problems.push_back(std::string("missing field '") + key + "'");
    return std::nullopt;
  }
  if (!it->is_string()) {
    problems.push_back(std::string("field '") + key + "' must be a string");
    return std::nullopt;
  }
  std::string v = it->get<std::string>();
  obj.erase(it);
  if (v.find_first_not_of(" \t\r\n") == std::string::npos) {
    problems.push_back(std::string("field '") + key + "' is empty");
    return std::nullopt;
  }
  return v;
}

template <typename Record, typename ParseFn>
LoadResult<Record> parse_lines(std::istream& in, ParseFn parse_one) {
  LoadResult<Record> result;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      result.issues.push_back({lineno, std::string("malformed JSON: ") + e.what()});
      continue;
    }
    if (!obj.is_object()) {
      result.issues.push_back({lineno, "expected a JSON object"});
      continue;
    }
    std::vector<std::string> problems;
    std::optional<Record> rec = parse_one(obj, problems);
    for (auto& p : problems) result.issues.push_back({lineno, std::move(p)});
    if (rec && problems.empty()) result.records.push_back(std::move(*rec));
  }
  return result;
}

std::ifstream open_or_throw(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("missing_file", "cannot open dataset " + path.string());
  return in;
}

}  // namespace

std::string_view intent_code(Intent intent) {
  switch (intent) {
    case Intent::kInformative: return "INF";
    case Intent::kPositive: return "POS";
    case Intent::kQuestioning: return "QUE";
    case Intent::kDenouncing: return "DEN";
  }
  return "?";
}

std::string_view intent_word(Intent intent) {
  switch (intent) {
    case Intent::kInformative: return "informative";
    case Intent::kPositive: return "positive";
    case Intent::kQuestioning: return "questioning";
    case Intent::kDenouncing: return "denouncing";
  }
  return "?";
}

std::optional<Intent> parse_intent(std::string_view s) {
  const std::string l = lower(s);
  for (Intent i : kAllIntents) {
    if (l == lower(intent_code(i)) || l == intent_word(i)) return i;
  }
  return std::nullopt;
}

std::string_view dimension_name(Dimension d) { return kDimensionNames[static_cast<std::size_t>(d)]; }

std::optional<Dimension> parse_dimension(std::string_view s) {
  const std::string l = lower(s);
  for (Dimension d : kAllDimensions) {
    if (l == dimension_name(d)) return d;
  }
  return std::nullopt;
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kDev: return "dev";
    case Split::kTest: return "test";
  }
  return "?";
}

std::optional<Split> parse_split(std::string_view s) {
  const std::string l = lower(s);
  if (l == "train") return Split::kTrain;
  if (l == "dev") return Split::kDev;
  if (l == "test") return Split::kTest;
  return std::nullopt;
}

LoadResult<CSRecord> parse_cs_jsonl(std::istream& in) {
  return parse_lines<CSRecord>(in, [](nlohmann::json& obj, std::vector<std::string>& problems)
                                       -> std::optional<CSRecord> {
    CSRecord r;
    auto id = obj.find("id");
    if (id == obj.end()) {
      problems.push_back("missing field 'id'");
    } else if (id->is_string()) {
      r.id = id->get<std::string>();
      obj.erase(id);
    } else if (id->is_number_integer()) {
      r.id = std::to_string(id->get<long long>());
      obj.erase(id);
    } else {
      problems.push_back("field 'id' must be a string or integer");
    }
    auto hs = take_text(obj, "hate_speech", problems);
    auto cs = take_text(obj, "counterspeech", problems);
    auto intent = obj.find("intent");
    if (intent == obj.end()) {
      problems.push_back("missing field 'intent'");
    } else if (!intent->is_string()) {
      problems.push_back("field 'intent' must be a string");
    } else if (auto parsed = parse_intent(intent->get<std::string>())) {
      r.intent = *parsed;
      obj.erase(intent);
    } else {
      problems.push_back("unknown intent '" + intent->get<std::string>() + "'");
    }
    auto split = obj.find("split");
    if (split == obj.end()) {
      problems.push_back("missing field 'split'");
    } else if (!split->is_string()) {
      problems.push_back("field 'split' must be a string");
    } else if (auto parsed = parse_split(split->get<std::string>())) {
      r.split = *parsed;
      obj.erase(split);
    } else {
      problems.push_back("unknown split '" + split->get<std::string>() + "'");
    }
    auto tg = obj.find("target_group");
    if (tg != obj.end()) {
      if (tg->is_string()) {
        r.target_group = tg->get<std::string>();
        obj.erase(tg);
      } else if (tg->is_null()) {
        obj.erase(tg);
      } else {
        problems.push_back("field 'target_group' must be a string");
      }
    }
    if (!hs || !cs) return std::nullopt;
    r.hate_speech = std::move(*hs);
    r.counterspeech = std::move(*cs);
    r.extra = std::move(obj);
    return r;
  });
}

LoadResult<ExplanationRecord> parse_explanation_jsonl(std::istream& in) {
  return parse_lines<ExplanationRecord>(
      in, [](nlohmann::json& obj, std::vector<std::string>& problems) -> std::optional<ExplanationRecord> {
        ExplanationRecord r;
        auto st = take_text(obj, "statement", problems);
        auto ex = take_text(obj, "explanation", problems);
        auto dim = obj.find("dimension");
        if (dim == obj.end()) {
          problems.push_back("missing field 'dimension'");
        } else if (!dim->is_string()) {
          problems.push_back("field 'dimension' must be a string");
        } else if (auto parsed = parse_dimension(dim->get<std::string>())) {
          r.dimension = *parsed;
          obj.erase(dim);
        } else {
          problems.push_back("unknown dimension '" + dim->get<std::string>() + "'");
        }
        if (!st || !ex) return std::nullopt;
        r.statement = std::move(*st);
        r.explanation = std::move(*ex);
        r.extra = std::move(obj);
        return r;
      });
}

LoadResult<CSRecord> load_cs_jsonl(const std::filesystem::path& path) {
  auto in = open_or_throw(path);
  return parse_cs_jsonl(in);
}

LoadResult<ExplanationRecord> load_explanation_jsonl(const std::filesystem::path& path) {
  auto in = open_or_throw(path);
  return parse_explanation_jsonl(in);
}

nlohmann::json to_json(const CSRecord& r) {
  nlohmann::json j = r.extra.is_object() ? r.extra : nlohmann::json::object();
  j["id"] = r.id;
  j["hate_speech"] = r.hate_speech;
  j["intent"] = intent_code(r.intent);
  j["counterspeech"] = r.counterspeech;
  if (r.target_group) j["target_group"] = *r.target_group;
  j["split"] = split_name(r.split);
  return j;
}

nlohmann::json to_json(const ExplanationRecord& r) {
  nlohmann::json j = r.extra.is_object() ? r.extra : nlohmann::json::object();
  j["statement"] = r.statement;
  j["dimension"] = dimension_name(r.dimension);
  j["explanation"] = r.explanation;
  return j;
}

std::vector<CSRecord> filter_split(const std::vector<CSRecord>& records, Split split) {
  std::vector<CSRecord> out;
  std::copy_if(records.begin(), records.end(), std::back_inserter(out),
               [split](const CSRecord& r) { return r.split == split; });
  return out;
}

}  // namespace coarl::data
