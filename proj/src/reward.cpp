#include "coarl/reward.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include "coarl/error.hpp"
#include "coarl/json_fields.hpp"
#include "coarl/log.hpp"
#include "coarl/remote_scorer.hpp"

namespace coarl::reward {

std::string_view kind_name(ScorerKind k) {
  switch (k) {
    case ScorerKind::kStance: return "stance";
    case ScorerKind::kQuality: return "quality";
    case ScorerKind::kToxicity: return "toxicity";
  }
  return "?";
}

std::optional<ScorerKind> parse_kind(std::string_view s) {
  for (ScorerKind k : {ScorerKind::kStance, ScorerKind::kQuality, ScorerKind::kToxicity}) {
    if (s == kind_name(k)) return k;
  }
  return std::nullopt;
}

std::pair<double, double> kind_range(ScorerKind k) {
  return k == ScorerKind::kStance ? std::pair{-1.0, 1.0} : std::pair{0.0, 1.0};
}

std::vector<std::string> scorer_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur += static_cast<char>(std::tolower(c));
    } else if (ch == '\'') {
      continue;
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

const std::set<std::string>& default_stopwords() {
  static const std::set<std::string> words = {
      "a",    "an",   "the",  "and",   "or",   "but",  "if",   "of",    "to",   "in",
      "on",   "at",   "by",   "for",   "with", "from", "as",   "is",    "are",  "was",
      "were", "be",   "been", "being", "it",   "its",  "this", "that",  "these", "those",
      "i",    "you",  "he",   "she",   "we",   "they", "me",   "him",   "her",  "us",
      "them", "my",   "your", "our",   "their", "what", "which", "who", "do",   "does"};
  return words;
}

const std::set<std::string>& default_negations() {
  static const std::set<std::string> words = {"not",  "never", "no",   "wrong",   "false",
                                              "isnt", "arent", "dont", "shouldnt"};
  return words;
}

std::set<std::string> load_term_list(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("missing_file", "cannot open term list " + path.string());
  std::set<std::string> terms;
  std::string line;
  while (std::getline(in, line)) {
    for (auto& t : scorer_tokens(line)) terms.insert(std::move(t));
  }
  return terms;
}

ReferenceStance::ReferenceStance(std::set<std::string> stopwords, std::set<std::string> negations)
    : stop_(std::move(stopwords)), neg_(std::move(negations)) {}

double ReferenceStance::score(std::string_view topic, std::string_view text) const {
  std::set<std::string> topic_content;
  for (auto& t : scorer_tokens(topic)) {
    if (!stop_.count(t)) topic_content.insert(std::move(t));
  }
  if (topic_content.empty()) return 0.0;
  std::set<std::string> text_tokens;
  for (auto& t : scorer_tokens(text)) text_tokens.insert(std::move(t));
  std::size_t shared = 0;
  bool negated = false;
  for (const auto& t : topic_content) shared += text_tokens.count(t);
  for (const auto& t : text_tokens) negated = negated || neg_.count(t) != 0;
  const double overlap = static_cast<double>(shared) / static_cast<double>(topic_content.size());
  return negated ? -overlap : overlap;
}

double ReferenceQuality::score(std::string_view, std::string_view text) const {
  const auto toks = scorer_tokens(text);
  if (toks.empty()) return 0.0;
  const std::set<std::string> distinct(toks.begin(), toks.end());
  const double n = static_cast<double>(toks.size());
  return std::min(1.0, n / kTargetLength) * static_cast<double>(distinct.size()) / n;
}

ReferenceToxicity ReferenceToxicity::from_file(const std::filesystem::path& path) {
  return ReferenceToxicity(load_term_list(path));
}

double ReferenceToxicity::score(std::string_view, std::string_view text) const {
  const auto toks = scorer_tokens(text);
  if (toks.empty()) return 0.0;
  const auto hits = std::count_if(toks.begin(), toks.end(), [this](const std::string& t) { return lexicon_.count(t) != 0; });
  return std::clamp(static_cast<double>(hits) / static_cast<double>(toks.size()), 0.0, 1.0);
}

nlohmann::json to_json(const RewardBreakdown& r) {
  return {{"pc_raw", r.pc_raw},   {"aq_raw", r.aq_raw},     {"tox_raw", r.tox_raw}, {"pc_norm", r.pc_norm},
          {"aq_term", r.aq_term}, {"tox_term", r.tox_term}, {"total", r.total}};
}

namespace {

double clamp_logged(double v, ScorerKind k) {
  const auto [lo, hi] = kind_range(k);
  if (v < lo || v > hi) {
    log::info("{} score {} outside [{}, {}], clamped", kind_name(k), v, lo, hi);
    return std::clamp(v, lo, hi);
  }
  return v;
}

}  // namespace

RewardBreakdown combine(double pc_raw, double aq_raw, double tox_raw) {
  RewardBreakdown r;
  r.pc_raw = pc_raw;
  r.aq_raw = aq_raw;
  r.tox_raw = tox_raw;
  r.pc_norm = (1.0 - clamp_logged(pc_raw, ScorerKind::kStance)) / 2.0;
  r.aq_term = clamp_logged(aq_raw, ScorerKind::kQuality);
  r.tox_term = 1.0 - clamp_logged(tox_raw, ScorerKind::kToxicity);
  r.total = (r.pc_norm + r.aq_term + r.tox_term) / 3.0;
  return r;
}

CompositeReward::CompositeReward(std::vector<std::shared_ptr<const Scorer>> scorers) {
  for (auto& s : scorers) {
    if (!s) throw Error("missing_scorer", "null scorer");
    const ScorerKind k = s->kind();
    if (!by_kind_.emplace(k, std::move(s)).second) {
      throw Error("duplicate_scorer", "two scorers of kind " + std::string(kind_name(k)));
    }
  }
  for (ScorerKind k : {ScorerKind::kStance, ScorerKind::kQuality, ScorerKind::kToxicity}) {
    if (!by_kind_.count(k)) throw Error("missing_scorer", "no scorer of kind " + std::string(kind_name(k)));
  }
}

const Scorer& CompositeReward::scorer(ScorerKind k) const { return *by_kind_.at(k); }

RewardBreakdown CompositeReward::operator()(std::string_view topic, std::string_view text) const {
  return combine(scorer(ScorerKind::kStance).score(topic, text), scorer(ScorerKind::kQuality).score(topic, text),
                 scorer(ScorerKind::kToxicity).score(topic, text));
}

nlohmann::json to_json(const RewardConfig& c) {
  nlohmann::json j = {{"lexicon", c.lexicon}, {"raw_statement", c.raw_statement}};
  if (!c.stopwords.empty()) j["stopwords"] = c.stopwords;
  if (!c.negations.empty()) j["negations"] = c.negations;
  if (!c.remote.empty()) {
    nlohmann::json r = nlohmann::json::object();
    for (const auto& [k, rc] : c.remote) {
      r[std::string(kind_name(k))] = {
          {"url", rc.url}, {"timeout_s", rc.timeout_s}, {"retries", rc.retries}, {"backoff_s", rc.backoff_s}};
    }
    j["remote"] = r;
  }
  return j;
}

RewardConfig reward_config_from_json(const nlohmann::json& j) {
  RewardConfig c;
  JsonFields f(j, "reward");
  f.read("lexicon", c.lexicon);
  f.read("stopwords", c.stopwords);
  f.read("negations", c.negations);
  f.read("raw_statement", c.raw_statement);
  if (const nlohmann::json* remote = f.find("remote")) {
    JsonFields rf(*remote, "reward.remote");
    for (ScorerKind k : {ScorerKind::kStance, ScorerKind::kQuality, ScorerKind::kToxicity}) {
      const std::string key(kind_name(k));
      if (const nlohmann::json* one = rf.find(key)) {
        RemoteConfig rc;
        JsonFields of(*one, rf.child(key));
        of.require("url", rc.url);
        of.read("timeout_s", rc.timeout_s);
        of.read("retries", rc.retries);
        of.read("backoff_s", rc.backoff_s);
        of.finish();
        if (rc.timeout_s <= 0 || rc.retries < 0 || rc.backoff_s < 0) {
          throw Error("invalid_config", rf.child(key) + ": timeout_s > 0, retries >= 0, backoff_s >= 0 required");
        }
        c.remote.emplace(k, rc);
      }
    }
    rf.finish();
  }
  f.finish();
  return c;
}

CompositeReward make_composite(const RewardConfig& cfg) {
  std::vector<std::shared_ptr<const Scorer>> scorers;
  auto remote_or = [&](ScorerKind k, auto make_local) {
    auto it = cfg.remote.find(k);
    if (it != cfg.remote.end()) {
      scorers.push_back(std::make_shared<RemoteScorer>(k, it->second));
    } else {
      scorers.push_back(make_local());
    }
  };
  remote_or(ScorerKind::kStance, [&]() -> std::shared_ptr<const Scorer> {
    return std::make_shared<ReferenceStance>(
        cfg.stopwords.empty() ? default_stopwords() : load_term_list(cfg.stopwords),
        cfg.negations.empty() ? default_negations() : load_term_list(cfg.negations));
  });
  remote_or(ScorerKind::kQuality, []() -> std::shared_ptr<const Scorer> { return std::make_shared<ReferenceQuality>(); });
  remote_or(ScorerKind::kToxicity, [&]() -> std::shared_ptr<const Scorer> {
    return std::make_shared<ReferenceToxicity>(ReferenceToxicity::from_file(cfg.lexicon));
  });
  return CompositeReward(std::move(scorers));
}

RewardFn make_reward_fn(const RewardConfig& cfg) {
  auto composite = std::make_shared<CompositeReward>(make_composite(cfg));
  const bool raw = cfg.raw_statement;
  return [composite, raw](std::string_view prompt, std::string_view statement, std::string_view response) {
    return (*composite)(raw ? statement : prompt, response);
  };
}

}  // namespace coarl::reward
