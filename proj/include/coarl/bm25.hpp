#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "coarl/dataset.hpp"

namespace coarl::data {

/// Lowercased, split on ASCII whitespace.
std::vector<std::string> bm25_tokens(std::string_view text);

// Okapi BM25 over a fixed document list.
class Bm25Index {
 public:
  static constexpr double kK1 = 1.2;
  static constexpr double kB = 0.75;

  explicit Bm25Index(const std::vector<std::string>& documents);

  std::size_t size() const { return docs_.size(); }
  /// ln(1 + (N - df + 0.5) / (df + 0.5)); never negative.
  double idf(const std::string& term) const;
  /// Repeated query terms contribute once per occurrence.
  double score(std::string_view query, std::size_t doc) const;
  std::vector<double> scores(std::string_view query) const;

 private:
  struct Doc {
    std::unordered_map<std::string, std::size_t> tf;
    std::size_t length = 0;
  };
  std::vector<Doc> docs_;
  std::unordered_map<std::string, std::size_t> df_;
  double avg_len_ = 0.0;
};

/// Top-n corpus records by BM25 against their hate_speech field, best first,
/// ties by ascending id. Errors: "empty_corpus", "too_many_exemplars".
std::vector<CSRecord> bm25_select_exemplars(std::string_view query_hs, const std::vector<CSRecord>& corpus,
                                            std::size_t n);

}  // namespace coarl::data
