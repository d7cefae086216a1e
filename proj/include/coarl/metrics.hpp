#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "coarl/dataset.hpp"

namespace coarl::nn {
class Seq2SeqModel;
}

namespace coarl::eval {

/// Lowercased; whitespace separates tokens and every ASCII punctuation
/// character is a token of its own ("don't!" -> "don", "'", "t", "!").
std::vector<std::string> metric_tokens(std::string_view text);

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Clipped n-gram overlap.
PRF rouge_n(std::string_view candidate, std::string_view reference, int n);
/// Longest common subsequence based.
PRF rouge_l(std::string_view candidate, std::string_view reference);

struct MeteorDetail {
  std::size_t matches = 0;
  std::size_t chunks = 0;
  double fmean = 0.0;
  double penalty = 0.0;
  double score = 0.0;
};

/// Exact-match METEOR: each candidate token, left to right, aligns to the
/// earliest unaligned identical reference token.
MeteorDetail meteor_exact(std::string_view candidate, std::string_view reference);

/// Cosine with the convention cos(0, x) = 0.
double cosine(std::span<const double> a, std::span<const double> b);
/// Cosine of mean token embeddings under `model`; with no model, of
/// byte-count histograms.
double cosine_sim(const nn::Seq2SeqModel* model, std::string_view a, std::string_view b);

/// Ordered rules: '?' -> QUE; factual cue -> INF; condemnation cue -> DEN; else POS.
data::Intent classify_intent(std::string_view text);
double category_match(std::string_view generated, data::Intent intended);

}  // namespace coarl::eval
