#include "coarl/tokenizer.hpp"

#include "coarl/log.hpp"

namespace coarl::data {

Encoded tokenize(std::string_view text, std::size_t max_len) {
  Encoded e;
  e.original_length = text.size();
  const std::size_t n = std::min(text.size(), max_len);
  e.ids.reserve(n);
  for (std::size_t i = 0; i < n; ++i) e.ids.push_back(static_cast<unsigned char>(text[i]));
  e.truncated = n < text.size();
  if (e.truncated) log::debug("tokenize: truncated {} bytes to {}", text.size(), max_len);
  return e;
}

std::vector<int> tokenize(std::string_view text) { return tokenize(text, text.size()).ids; }

std::string detokenize(std::span<const int> ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id >= 0 && id < kByteCount) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

Encoded encode_with_eos(std::string_view text, std::size_t max_len) {
  Encoded e = tokenize(text, max_len == 0 ? 0 : max_len - 1);
  if (max_len > 0) e.ids.push_back(kEosId);
  return e;
}

}  // namespace coarl::data
