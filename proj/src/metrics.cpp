#include "coarl/metrics.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <map>

#include "coarl/model.hpp"
#include "coarl/tokenizer.hpp"

namespace coarl::eval {
namespace {

PRF make_prf(double overlap, double cand_total, double ref_total) {
  PRF out;
  out.precision = cand_total > 0 ? overlap / cand_total : 0.0;
  out.recall = ref_total > 0 ? overlap / ref_total : 0.0;
  const double s = out.precision + out.recall;
  out.f1 = s > 0 ? 2.0 * out.precision * out.recall / s : 0.0;
  return out;
}

std::map<std::vector<std::string>, std::size_t> ngram_counts(const std::vector<std::string>& toks, int n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  const std::size_t k = static_cast<std::size_t>(n);
  for (std::size_t i = 0; i + k <= toks.size(); ++i) {
    ++counts[std::vector<std::string>(toks.begin() + i, toks.begin() + i + k)];
  }
  return counts;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool contains_any(const std::string& haystack, std::initializer_list<std::string_view> cues) {
  return std::any_of(cues.begin(), cues.end(),
                     [&](std::string_view c) { return haystack.find(c) != std::string::npos; });
}

}  // namespace

std::vector<std::string> metric_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur += static_cast<char>(std::tolower(c));
    }
  }
  flush();
  return out;
}

PRF rouge_n(std::string_view candidate, std::string_view reference, int n) {
  const auto cand = ngram_counts(metric_tokens(candidate), n);
  const auto ref = ngram_counts(metric_tokens(reference), n);
  double overlap = 0.0, cand_total = 0.0, ref_total = 0.0;
  for (const auto& [g, c] : cand) {
    cand_total += static_cast<double>(c);
    auto it = ref.find(g);
    if (it != ref.end()) overlap += static_cast<double>(std::min(c, it->second));
  }
  for (const auto& [g, c] : ref) ref_total += static_cast<double>(c);
  return make_prf(overlap, cand_total, ref_total);
}

PRF rouge_l(std::string_view candidate, std::string_view reference) {
  const auto a = metric_tokens(candidate);
  const auto b = metric_tokens(reference);
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return make_prf(static_cast<double>(prev[b.size()]), static_cast<double>(a.size()), static_cast<double>(b.size()));
}

MeteorDetail meteor_exact(std::string_view candidate, std::string_view reference) {
  const auto cand = metric_tokens(candidate);
  const auto ref = metric_tokens(reference);
  std::vector<bool> used(ref.size(), false);
  std::vector<std::ptrdiff_t> align(cand.size(), -1);
  for (std::size_t i = 0; i < cand.size(); ++i) {
    for (std::size_t j = 0; j < ref.size(); ++j) {
      if (!used[j] && ref[j] == cand[i]) {
        used[j] = true;
        align[i] = static_cast<std::ptrdiff_t>(j);
        break;
      }
    }
  }
  MeteorDetail d;
  std::ptrdiff_t last = -2;
  bool in_chunk = false;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    if (align[i] < 0) {
      in_chunk = false;
      continue;
    }
    ++d.matches;
    if (!in_chunk || align[i] != last + 1) ++d.chunks;
    in_chunk = true;
    last = align[i];
  }
  if (d.matches == 0) return d;
  const double m = static_cast<double>(d.matches);
  const double p = m / static_cast<double>(cand.size());
  const double r = m / static_cast<double>(ref.size());
  d.fmean = 10.0 * p * r / (r + 9.0 * p);
  d.penalty = 0.5 * std::pow(static_cast<double>(d.chunks) / m, 3.0);
  d.score = d.fmean * (1.0 - d.penalty);
  return d;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

double cosine_sim(const nn::Seq2SeqModel* model, std::string_view a, std::string_view b) {
  if (model) {
    const auto ia = data::tokenize(a);
    const auto ib = data::tokenize(b);
    if (ia.empty() || ib.empty()) return 0.0;
    const auto ea = model->mean_embedding(ia);
    const auto eb = model->mean_embedding(ib);
    return cosine(ea, eb);
  }
  std::array<double, 256> ha{}, hb{};
  for (unsigned char c : a) ha[c] += 1.0;
  for (unsigned char c : b) hb[c] += 1.0;
  return cosine(ha, hb);
}

data::Intent classify_intent(std::string_view text) {
  const std::string t = lower(text);
  if (t.find('?') != std::string::npos) return data::Intent::kQuestioning;
  if (contains_any(t, {"in fact", "research", "according to", "studies", "evidence"})) {
    return data::Intent::kInformative;
  }
  if (contains_any(t, {"unacceptable", "wrong", "hateful", "harmful", "not okay"})) {
    return data::Intent::kDenouncing;
  }
  return data::Intent::kPositive;
}

double category_match(std::string_view generated, data::Intent intended) {
  return classify_intent(generated) == intended ? 1.0 : 0.0;
}

}  // namespace coarl::eval
