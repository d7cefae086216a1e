#pragma once

#include "coarl/reward.hpp"

namespace coarl::reward {

// HTTP client for an external classifier. POSTs {"topic", "text", "kind"} and
// expects {"score": number}. Transport failures, timeouts and non-2xx replies
// are retried with exponential backoff; an out-of-range score is an immediate
// "score_out_of_range" error. Exhausted retries raise "scorer_unavailable".
class RemoteScorer final : public Scorer {
 public:
  RemoteScorer(ScorerKind kind, RemoteConfig cfg);
  ScorerKind kind() const override { return kind_; }
  double score(std::string_view topic, std::string_view text) const override;

 private:
  ScorerKind kind_;
  RemoteConfig cfg_;
  std::string host_;  // scheme://host:port
  std::string path_;
};

}  // namespace coarl::reward
