#include "coarl/log.hpp"

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <string>

namespace coarl::log {
namespace {

Level parse_env() {
  const char* v = std::getenv("COARL_LOG");
  if (v == nullptr) return Level::kInfo;
  std::string s(v);
  if (s == "error") return Level::kError;
  if (s == "debug") return Level::kDebug;
  return Level::kInfo;
}

std::atomic<int>& current() {
  static std::atomic<int> lvl{static_cast<int>(parse_env())};
  return lvl;
}

std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace

Level level() { return static_cast<Level>(current().load()); }

void set_level(Level l) { current().store(static_cast<int>(l)); }

void write(Level l, std::string_view msg) {
  static constexpr std::string_view kNames[] = {"error", "info", "debug"};
  std::lock_guard<std::mutex> lock(sink_mutex());
  std::cerr << "[" << kNames[static_cast<int>(l)] << "] " << msg << '\n';
}

}  // namespace coarl::log
