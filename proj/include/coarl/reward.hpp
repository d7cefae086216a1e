#pragma once

// Composite reward over a stance scorer (PC, [-1, 1], +1 = agrees with the
// statement), an argument quality scorer (AQ, [0, 1]) and a toxicity scorer
// (T, [0, 1]):
//   total = ((1 - PC)/2 + AQ + (1 - T)) / 3

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace coarl::reward {

enum class ScorerKind { kStance, kQuality, kToxicity };

std::string_view kind_name(ScorerKind k);
std::optional<ScorerKind> parse_kind(std::string_view s);
/// Documented output range of a scorer kind.
std::pair<double, double> kind_range(ScorerKind k);

class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual ScorerKind kind() const = 0;
  /// `topic` is the (instruction formatted) prompt, `text` the response.
  /// Must be safe to call concurrently.
  virtual double score(std::string_view topic, std::string_view text) const = 0;
};

/// Lowercase alphanumeric runs; apostrophes are dropped so "isn't" -> "isnt".
std::vector<std::string> scorer_tokens(std::string_view text);

const std::set<std::string>& default_stopwords();
const std::set<std::string>& default_negations();
/// One term per line, lowercased; blank lines ignored. Error "missing_file".
std::set<std::string> load_term_list(const std::filesystem::path& path);

// Content-word overlap, signed by the presence of a negation cue.
class ReferenceStance final : public Scorer {
 public:
  ReferenceStance(std::set<std::string> stopwords = default_stopwords(),
                  std::set<std::string> negations = default_negations());
  ScorerKind kind() const override { return ScorerKind::kStance; }
  double score(std::string_view topic, std::string_view text) const override;

 private:
  std::set<std::string> stop_;
  std::set<std::string> neg_;
};

// min(1, n/40) * distinct/n over response tokens.
class ReferenceQuality final : public Scorer {
 public:
  static constexpr double kTargetLength = 40.0;
  ScorerKind kind() const override { return ScorerKind::kQuality; }
  double score(std::string_view topic, std::string_view text) const override;
};

// Fraction of response tokens found in a lexicon.
class ReferenceToxicity final : public Scorer {
 public:
  explicit ReferenceToxicity(std::set<std::string> lexicon) : lexicon_(std::move(lexicon)) {}
  static ReferenceToxicity from_file(const std::filesystem::path& path);
  ScorerKind kind() const override { return ScorerKind::kToxicity; }
  double score(std::string_view topic, std::string_view text) const override;

 private:
  std::set<std::string> lexicon_;
};

struct RewardBreakdown {
  double pc_raw = 0.0;
  double aq_raw = 0.0;
  double tox_raw = 0.0;
  double pc_norm = 0.0;
  double aq_term = 0.0;
  double tox_term = 0.0;
  double total = 0.0;
};

nlohmann::json to_json(const RewardBreakdown& r);

/// Applies the normalization and mean. Raw scores outside their range are
/// clamped with a log line.
RewardBreakdown combine(double pc_raw, double aq_raw, double tox_raw);

class CompositeReward {
 public:
  /// Exactly one scorer per kind; errors "missing_scorer" / "duplicate_scorer".
  explicit CompositeReward(std::vector<std::shared_ptr<const Scorer>> scorers);
  RewardBreakdown operator()(std::string_view topic, std::string_view text) const;
  const Scorer& scorer(ScorerKind k) const;

 private:
  std::map<ScorerKind, std::shared_ptr<const Scorer>> by_kind_;
};

/// How the reward sees a rollout: (prompt text, raw statement, response text).
using RewardFn = std::function<RewardBreakdown(std::string_view prompt, std::string_view statement,
                                               std::string_view response)>;

struct RemoteConfig {
  std::string url;  // http://host:port/path
  double timeout_s = 10.0;
  int retries = 2;
  double backoff_s = 0.5;  // wait before retry i (1-based) is backoff_s * 2^(i-1)

  bool operator==(const RemoteConfig&) const = default;
};

struct RewardConfig {
  std::string lexicon = "data/lexicon/toxicity.txt";
  std::string stopwords;  // empty: built-in list
  std::string negations;  // empty: built-in list
  std::map<ScorerKind, RemoteConfig> remote;  // replaces the reference scorer of that kind
  bool raw_statement = false;  // score against the bare statement instead of the prompt

  bool operator==(const RewardConfig&) const = default;
};

nlohmann::json to_json(const RewardConfig& cfg);
RewardConfig reward_config_from_json(const nlohmann::json& j);

CompositeReward make_composite(const RewardConfig& cfg);
RewardFn make_reward_fn(const RewardConfig& cfg);

}  // namespace coarl::reward
