#include "coarl/config.hpp"

#include <fstream>

#include "coarl/error.hpp"
#include "coarl/json_fields.hpp"
#include "coarl/rng.hpp"

namespace coarl {

void RunConfig::validate() const {
  model.validate();
  phase1.validate();
  phase2.validate();
  lora.validate(model.d_model);
  ppo.validate();
  sampling.validate();
  if (!data::parse_split(eval.split)) throw Error("invalid_config", "eval.split must be train, dev or test");
}

nlohmann::json to_json(const nn::SamplingConfig& c) {
  return {{"top_k", c.top_k},
          {"top_p", c.top_p},
          {"temperature", c.temperature},
          {"max_new_tokens", c.max_new_tokens},
          {"do_sample", c.do_sample},
          {"seed", c.seed}};
}

nn::SamplingConfig sampling_config_from_json(const nlohmann::json& j) {
  nn::SamplingConfig c;
  JsonFields f(j, "sampling");
  f.read("top_k", c.top_k);
  f.read("top_p", c.top_p);
  f.read("temperature", c.temperature);
  f.read("max_new_tokens", c.max_new_tokens);
  f.read("do_sample", c.do_sample);
  f.read("seed", c.seed);
  f.finish();
  return c;
}

namespace {

nlohmann::json to_json(const DataConfig& d) {
  nlohmann::json j = {{"counterspeech", d.counterspeech},
                      {"explanations", d.explanations},
                      {"mixing", data::mixing_name(d.mixing)}};
  if (!d.templates.empty()) j["templates"] = d.templates;
  return j;
}

DataConfig data_config_from_json(const nlohmann::json& j) {
  DataConfig d;
  JsonFields f(j, "data");
  f.read("counterspeech", d.counterspeech);
  f.read("explanations", d.explanations);
  f.read("templates", d.templates);
  std::string mixing(data::mixing_name(d.mixing));
  if (f.read("mixing", mixing)) {
    auto m = data::parse_mixing(mixing);
    if (!m) throw Error("config_schema", "data.mixing: expected \"uniform\" or \"balanced\"");
    d.mixing = *m;
  }
  f.finish();
  return d;
}

nlohmann::json to_json(const EvalConfig& e) {
  return {{"split", e.split}, {"model_embeddings", e.model_embeddings}, {"max_input_tokens", e.max_input_tokens}};
}

EvalConfig eval_config_from_json(const nlohmann::json& j) {
  EvalConfig e;
  JsonFields f(j, "eval");
  f.read("split", e.split);
  f.read("model_embeddings", e.model_embeddings);
  f.read("max_input_tokens", e.max_input_tokens);
  f.finish();
  return e;
}

}  // namespace

nlohmann::json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"model", nn::to_json(c.model)},
          {"phase1", train::to_json(c.phase1)},
          {"phase2", train::to_json(c.phase2)},
          {"lora", nn::to_json(c.lora)},
          {"ppo", rl::to_json(c.ppo)},
          {"sampling", to_json(c.sampling)},
          {"reward", reward::to_json(c.reward)},
          {"data", to_json(c.data)},
          {"eval", to_json(c.eval)}};
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  JsonFields f(j, "");
  f.read("seed", c.seed);
  if (auto* p = f.find("model")) c.model = nn::model_config_from_json(*p);
  if (auto* p = f.find("phase1")) c.phase1 = train::train_config_from_json(*p, "phase1", train::phase1_defaults());
  if (auto* p = f.find("phase2")) c.phase2 = train::train_config_from_json(*p, "phase2", train::phase2_defaults());
  if (auto* p = f.find("lora")) c.lora = nn::lora_config_from_json(*p);
  if (auto* p = f.find("ppo")) c.ppo = rl::ppo_config_from_json(*p);
  if (auto* p = f.find("sampling")) c.sampling = sampling_config_from_json(*p);
  if (auto* p = f.find("reward")) c.reward = reward::reward_config_from_json(*p);
  if (auto* p = f.find("data")) c.data = data_config_from_json(*p);
  if (auto* p = f.find("eval")) c.eval = eval_config_from_json(*p);
  f.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("missing_file", "cannot read config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("config_parse", path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

std::uint64_t model_init_seed(const RunConfig& c) { return derive_seed(c.seed, "model-init"); }
std::uint64_t lora_init_seed(const RunConfig& c) { return derive_seed(c.seed, "lora-init"); }
std::uint64_t phase1_seed(const RunConfig& c) { return c.phase1.seed.value_or(derive_seed(c.seed, "phase1")); }
std::uint64_t phase2_seed(const RunConfig& c) { return c.phase2.seed.value_or(derive_seed(c.seed, "phase2")); }
std::uint64_t phase3_seed(const RunConfig& c) { return c.ppo.seed.value_or(derive_seed(c.seed, "phase3")); }

RunConfig resolve(const RunConfig& cfg) {
  RunConfig r = cfg;
  r.phase1.seed = phase1_seed(cfg);
  r.phase2.seed = phase2_seed(cfg);
  r.ppo.seed = phase3_seed(cfg);
  return r;
}

}  // namespace coarl
