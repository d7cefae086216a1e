#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace coarl::cli {

/// Runs one command line (without the program name). Returns the exit status;
/// failures print a single "error: <code>: <message>" line to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace coarl::cli
