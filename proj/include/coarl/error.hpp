#pragma once

#include <stdexcept>
#include <string>

namespace coarl {

// Base error for everything thrown by the library. `code` is a short
// machine-parseable tag (e.g. "shape_mismatch", "corrupt_checkpoint") that the
// CLI prints ahead of the human message.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

}  // namespace coarl
