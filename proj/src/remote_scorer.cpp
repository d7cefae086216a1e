#include "coarl/remote_scorer.hpp"

#include <chrono>
#include <cmath>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "coarl/error.hpp"
#include "coarl/log.hpp"

namespace coarl::reward {

RemoteScorer::RemoteScorer(ScorerKind kind, RemoteConfig cfg) : kind_(kind), cfg_(std::move(cfg)) {
  const auto scheme_end = cfg_.url.find("://");
  if (scheme_end == std::string::npos || cfg_.url.compare(0, scheme_end, "http") != 0) {
    throw Error("invalid_config", "remote scorer url must start with http:// (" + cfg_.url + ")");
  }
  const auto path_start = cfg_.url.find('/', scheme_end + 3);
  host_ = cfg_.url.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : cfg_.url.substr(path_start);
}

double RemoteScorer::score(std::string_view topic, std::string_view text) const {
  const std::string body =
      nlohmann::json{{"topic", topic}, {"text", text}, {"kind", kind_name(kind_)}}.dump();
  const auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(
      std::chrono::duration<double>(cfg_.timeout_s));
  std::string last_error;
  const int attempts = cfg_.retries + 1;
  for (int attempt = 1; attempt <= attempts; ++attempt) {
    if (attempt > 1) {
      const double wait = cfg_.backoff_s * std::pow(2.0, attempt - 2);
      std::this_thread::sleep_for(std::chrono::duration<double>(wait));
    }
    // A fresh client per call keeps concurrent scoring on independent connections.
    httplib::Client client(host_);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    auto res = client.Post(path_, body, "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
    } else if (res->status < 200 || res->status >= 300) {
      last_error = "HTTP " + std::to_string(res->status);
    } else {
      nlohmann::json reply = nlohmann::json::parse(res->body, nullptr, false);
      if (reply.is_discarded() || !reply.is_object() || !reply.contains("score") || !reply["score"].is_number()) {
        last_error = "reply is not {\"score\": number}";
      } else {
        const double s = reply["score"].get<double>();
        const auto [lo, hi] = kind_range(kind_);
        if (!(s >= lo && s <= hi)) {
          throw Error("score_out_of_range", std::string(kind_name(kind_)) + " scorer at " + cfg_.url + " returned " +
                                                std::to_string(s) + ", expected [" + std::to_string(lo) + ", " +
                                                std::to_string(hi) + "]");
        }
        return s;
      }
    }
    log::info("{} scorer attempt {}/{} failed: {}", kind_name(kind_), attempt, attempts, last_error);
  }
  throw Error("scorer_unavailable", std::string(kind_name(kind_)) + " scorer at " + cfg_.url + " failed after " +
                                        std::to_string(attempts) + " attempts (" + std::to_string(cfg_.retries) +
                                        " retries): " + last_error);
}

}  // namespace coarl::reward
