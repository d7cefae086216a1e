#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "coarl/vocab.hpp"

namespace coarl::data {

struct Encoded {
  std::vector<int> ids;
  bool truncated = false;
  std::size_t original_length = 0;
};

/// One id per byte; keeps at most `max_len` ids and flags truncation.
Encoded tokenize(std::string_view text, std::size_t max_len);
std::vector<int> tokenize(std::string_view text);

/// Inverse of tokenize; special ids are dropped.
std::string detokenize(std::span<const int> ids);

/// Bytes followed by EOS, cut to at most max_len ids with EOS always kept.
/// Used for encoder inputs and for decoder labels.
Encoded encode_with_eos(std::string_view text, std::size_t max_len);

}  // namespace coarl::data
