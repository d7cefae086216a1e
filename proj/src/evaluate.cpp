#include "coarl/evaluate.hpp"

#include <fstream>
#include <set>

#include <fmt/format.h>

#include "coarl/error.hpp"
#include "coarl/metrics.hpp"
#include "coarl/tokenizer.hpp"

namespace coarl::eval {

nlohmann::json to_json(const Generation& g) {
  return {{"id", g.id}, {"intent", data::intent_code(g.intent)}, {"generated", g.generated}};
}

std::vector<Generation> load_generations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("missing_file", "cannot open generations " + path.string());
  std::vector<Generation> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    const std::string where = fmt::format("{}:{}", path.string(), lineno);
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw Error("malformed_json", where + ": expected a JSON object");
    Generation g;
    try {
      const auto& id = j.at("id");
      g.id = id.is_string() ? id.get<std::string>() : id.dump();
      g.generated = j.at("generated").get<std::string>();
      auto intent = data::parse_intent(j.at("intent").get<std::string>());
      if (!intent) throw Error("unknown_intent", where + ": unknown intent " + j.at("intent").dump());
      g.intent = *intent;
    } catch (const nlohmann::json::exception& e) {
      throw Error("malformed_json", where + ": " + e.what());
    }
    out.push_back(std::move(g));
  }
  return out;
}

void save_generations(const std::filesystem::path& path, const std::vector<Generation>& gens) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("io_error", "cannot write " + path.string());
  for (const auto& g : gens) out << to_json(g).dump() << '\n';
}

std::vector<Generation> generate_outputs(const nn::Seq2SeqModel& model, const std::vector<data::CSRecord>& records,
                                         const nn::SamplingConfig& sampling, int max_input_tokens,
                                         const data::TemplateSet& templates) {
  std::vector<Generation> out;
  out.reserve(records.size());
  const std::size_t max_src = std::min(max_input_tokens, model.config().max_seq_len);
  for (const auto& r : records) {
    const data::PromptSample s = data::counterspeech_sample(r, templates);
    const auto src = data::encode_with_eos(s.prompt, max_src).ids;
    out.push_back({r.id, r.intent, data::detokenize(nn::generate(model, src, sampling))});
  }
  return out;
}

MetricReport evaluate_run(const std::vector<Generation>& generations, const std::vector<data::CSRecord>& test_set,
                          const EvalOptions& opts) {
  if (!opts.scorers) throw Error("missing_scorer", "evaluation needs reward scorers");
  std::map<std::string, const data::CSRecord*> by_id;
  for (const auto& r : test_set) {
    if (!by_id.emplace(r.id, &r).second) throw Error("id_mismatch", "duplicate test id " + r.id);
  }
  std::set<std::string> seen;
  MetricReport report;
  for (const Generation& g : generations) {
    auto it = by_id.find(g.id);
    if (it == by_id.end()) throw Error("id_mismatch", "generation id " + g.id + " is not in the test set");
    if (!seen.insert(g.id).second) throw Error("id_mismatch", "generation id " + g.id + " appears twice");
    const data::CSRecord& ref = *it->second;
    if (ref.intent != g.intent) {
      throw Error("id_mismatch", "generation " + g.id + " has intent " + std::string(data::intent_code(g.intent)) +
                                     " but the test record has " + std::string(data::intent_code(ref.intent)));
    }
    const reward::RewardBreakdown rw = (*opts.scorers)(ref.hate_speech, g.generated);
    SampleMetrics m;
    m.id = g.id;
    m.intent = g.intent;
    m.values = {rouge_n(g.generated, ref.counterspeech, 1).f1,
                rouge_n(g.generated, ref.counterspeech, 2).f1,
                rouge_l(g.generated, ref.counterspeech).f1,
                meteor_exact(g.generated, ref.counterspeech).score,
                cosine_sim(opts.embedding_model, g.generated, ref.counterspeech),
                category_match(g.generated, g.intent),
                rw.tox_raw,
                rw.pc_raw,
                rw.aq_raw,
                rw.total};
    report.samples.push_back(std::move(m));
  }
  if (seen.size() != by_id.size()) {
    for (const auto& [id, rec] : by_id) {
      if (!seen.count(id)) throw Error("id_mismatch", "test id " + id + " has no generation");
    }
  }
  for (const SampleMetrics& m : report.samples) {
    ++report.counts[m.intent];
    auto& acc = report.per_intent[m.intent];
    for (std::size_t k = 0; k < kMetricNames.size(); ++k) {
      acc[k] += m.values[k];
      report.overall[k] += m.values[k];
    }
  }
  for (auto& [intent, acc] : report.per_intent) {
    for (double& v : acc) v /= static_cast<double>(report.counts[intent]);
  }
  if (!report.samples.empty()) {
    for (double& v : report.overall) v /= static_cast<double>(report.samples.size());
  }
  return report;
}

namespace {

template <typename RowFn>
void for_each_row(const MetricReport& report, RowFn fn) {
  for (data::Intent i : data::kAllIntents) {
    auto it = report.per_intent.find(i);
    if (it != report.per_intent.end()) fn(std::string(data::intent_code(i)), report.counts.at(i), it->second);
  }
  fn(std::string("ALL"), report.samples.size(), report.overall);
}

}  // namespace

std::string render_table(const MetricReport& report) {
  std::string out = fmt::format("{:<6}{:>6}", "group", "n");
  for (const char* name : kMetricNames) out += fmt::format("{:>11}", name);
  out += '\n';
  for_each_row(report, [&out](const std::string& group, std::size_t n, const auto& values) {
    out += fmt::format("{:<6}{:>6}", group, n);
    for (double v : values) out += fmt::format("{:>11.4f}", v);
    out += '\n';
  });
  out += "PC_ref, AQ_ref, Reward_ref and Toxicity are reference-scorer variants.\n";
  return out;
}

std::string render_csv(const MetricReport& report) {
  std::string out = "group,n";
  for (const char* name : kMetricNames) out += std::string(",") + name;
  out += '\n';
  for_each_row(report, [&out](const std::string& group, std::size_t n, const auto& values) {
    out += fmt::format("{},{}", group, n);
    for (double v : values) out += fmt::format(",{:.17g}", v);
    out += '\n';
  });
  return out;
}

nlohmann::json to_json(const MetricReport& report) {
  nlohmann::json j = nlohmann::json::object();
  nlohmann::json groups = nlohmann::json::object();
  for_each_row(report, [&groups](const std::string& group, std::size_t n, const auto& values) {
    nlohmann::json row = {{"n", n}};
    for (std::size_t k = 0; k < kMetricNames.size(); ++k) row[kMetricNames[k]] = values[k];
    groups[group] = row;
  });
  j["groups"] = groups;
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& m : report.samples) {
    nlohmann::json row = {{"id", m.id}, {"intent", data::intent_code(m.intent)}};
    for (std::size_t k = 0; k < kMetricNames.size(); ++k) row[kMetricNames[k]] = m.values[k];
    samples.push_back(row);
  }
  j["samples"] = samples;
  return j;
}

}  // namespace coarl::eval
