#include "coarl/bm25.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include "coarl/error.hpp"

namespace coarl::data {

std::vector<std::string> bm25_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += static_cast<char>(std::tolower(c));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Bm25Index::Bm25Index(const std::vector<std::string>& documents) {
  docs_.reserve(documents.size());
  std::size_t total = 0;
  for (const auto& text : documents) {
    Doc d;
    for (auto& tok : bm25_tokens(text)) {
      ++d.tf[tok];
      ++d.length;
    }
    for (const auto& [term, count] : d.tf) ++df_[term];
    total += d.length;
    docs_.push_back(std::move(d));
  }
  avg_len_ = docs_.empty() ? 0.0 : static_cast<double>(total) / static_cast<double>(docs_.size());
}

double Bm25Index::idf(const std::string& term) const {
  auto it = df_.find(term);
  const double df = it == df_.end() ? 0.0 : static_cast<double>(it->second);
  const double n = static_cast<double>(docs_.size());
  return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
}

double Bm25Index::score(std::string_view query, std::size_t doc) const {
  const Doc& d = docs_.at(doc);
  // Every document may be empty; treat the length ratio as 1 then.
  const double len_ratio = avg_len_ > 0.0 ? static_cast<double>(d.length) / avg_len_ : 1.0;
  double s = 0.0;
  for (const auto& term : bm25_tokens(query)) {
    auto it = d.tf.find(term);
    if (it == d.tf.end()) continue;
    const double f = static_cast<double>(it->second);
    s += idf(term) * f * (kK1 + 1.0) / (f + kK1 * (1.0 - kB + kB * len_ratio));
  }
  return s;
}

std::vector<double> Bm25Index::scores(std::string_view query) const {
  std::vector<double> out(docs_.size());
  for (std::size_t i = 0; i < docs_.size(); ++i) out[i] = score(query, i);
  return out;
}

std::vector<CSRecord> bm25_select_exemplars(std::string_view query_hs, const std::vector<CSRecord>& corpus,
                                            std::size_t n) {
  if (corpus.empty()) throw Error("empty_corpus", "bm25: exemplar corpus is empty");
  if (n > corpus.size()) {
    throw Error("too_many_exemplars", "bm25: asked for " + std::to_string(n) + " exemplars from a corpus of " +
                                          std::to_string(corpus.size()));
  }
  std::vector<std::string> docs;
  docs.reserve(corpus.size());
  for (const auto& r : corpus) docs.push_back(r.hate_speech);
  const Bm25Index index(docs);
  const std::vector<double> s = index.scores(query_hs);

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (s[a] != s[b]) return s[a] > s[b];
    return corpus[a].id < corpus[b].id;
  });
  std::vector<CSRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(corpus[order[i]]);
  return out;
}

}  // namespace coarl::data
