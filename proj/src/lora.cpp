#include "coarl/lora.hpp"

#include <cmath>

#include "coarl/error.hpp"
#include "coarl/json_fields.hpp"
#include "coarl/log.hpp"
#include "coarl/rng.hpp"

namespace coarl::nn {

using ad::Tensor;

void LoraConfig::validate(int d_model) const {
  if (rank < 1 || rank >= d_model) {
    throw Error("invalid_config", "lora: rank must satisfy 1 <= r < d_model (r=" + std::to_string(rank) +
                                      ", d_model=" + std::to_string(d_model) + ")");
  }
  if (!(alpha > 0.0)) throw Error("invalid_config", "lora: alpha must be > 0");
  if (dropout < 0.0 || dropout >= 1.0) throw Error("invalid_config", "lora: dropout must be in [0, 1)");
  if (!encoder_self_attn && !decoder_self_attn && !decoder_cross_attn) {
    throw Error("invalid_config", "lora: no target attention blocks selected");
  }
}

nlohmann::json to_json(const LoraConfig& c) {
  return {{"rank", c.rank},
          {"alpha", c.alpha},
          {"dropout", c.dropout},
          {"encoder_self_attn", c.encoder_self_attn},
          {"decoder_self_attn", c.decoder_self_attn},
          {"decoder_cross_attn", c.decoder_cross_attn}};
}

LoraConfig lora_config_from_json(const nlohmann::json& j) {
  LoraConfig c;
  JsonFields f(j, "lora");
  f.read("rank", c.rank);
  f.read("alpha", c.alpha);
  f.read("dropout", c.dropout);
  f.read("encoder_self_attn", c.encoder_self_attn);
  f.read("decoder_self_attn", c.decoder_self_attn);
  f.read("decoder_cross_attn", c.decoder_cross_attn);
  f.finish();
  return c;
}

const LoraPair* LoraAdapter::find(const std::string& base_weight) const {
  auto it = targets_.find(base_weight);
  return it == targets_.end() ? nullptr : &it->second;
}

std::map<std::string, Tensor> LoraAdapter::parameters() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, pair] : targets_) {
    out.emplace(name + ".lora_A", pair.a);
    out.emplace(name + ".lora_B", pair.b);
  }
  return out;
}

std::shared_ptr<LoraAdapter> LoraAdapter::clone() const {
  auto copy = std::make_shared<LoraAdapter>(config_, d_model_);
  for (const auto& [name, pair] : targets_) {
    copy->targets_.emplace(name, LoraPair{pair.a.clone(), pair.b.clone()});
  }
  return copy;
}

std::vector<std::string> lora_target_names(const ModelConfig& model_cfg, const LoraConfig& cfg) {
  std::vector<std::string> names;
  auto add = [&names](const std::string& block) {
    names.push_back(block + ".q.weight");
    names.push_back(block + ".v.weight");
  };
  if (cfg.encoder_self_attn) {
    for (int i = 0; i < model_cfg.n_enc_layers; ++i) add("encoder.layers." + std::to_string(i) + ".self_attn");
  }
  for (int i = 0; i < model_cfg.n_dec_layers; ++i) {
    const std::string p = "decoder.layers." + std::to_string(i);
    if (cfg.decoder_self_attn) add(p + ".self_attn");
    if (cfg.decoder_cross_attn) add(p + ".cross_attn");
  }
  return names;
}

std::shared_ptr<LoraAdapter> attach(Seq2SeqModel& model, const LoraConfig& cfg, std::uint64_t seed) {
  const int d = model.config().d_model;
  cfg.validate(d);
  auto adapter = std::make_shared<LoraAdapter>(cfg, d);
  const std::size_t r = cfg.rank, du = d;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  for (const std::string& name : lora_target_names(model.config(), cfg)) {
    if (!model.has_param(name)) throw Error("missing_target", "lora: model has no matrix named " + name);
    const Tensor& w = model.param(name);
    if (w.shape() != ad::Shape{du, du}) {
      throw Error("shape_mismatch", "lora: target " + name + " is " + ad::shape_str(w.shape()) +
                                        ", expected square d x d");
    }
    Rng rng(derive_seed(seed, name));
    std::vector<double> a(r * du);
    for (double& x : a) x = rng.uniform(-bound, bound);
    Tensor ta = Tensor::from({r, du}, std::move(a), true);
    Tensor tb = Tensor::zeros({du, r}, true);
    adapter->targets().emplace(name, LoraPair{std::move(ta), std::move(tb)});
  }
  model.freeze_all();
  model.set_adapter(adapter);
  return adapter;
}

Seq2SeqModel merge(const Seq2SeqModel& model) {
  Seq2SeqModel merged = model.clone();
  merged.set_adapter(nullptr);
  const auto& adapter = model.adapter();
  if (!adapter) return merged;
  const std::size_t d = adapter->d_model(), r = adapter->config().rank;
  const double s = adapter->scale();
  for (const auto& [name, pair] : adapter->targets()) {
    auto& w = merged.param(name).values();
    const auto& a = pair.a.values();
    const auto& b = pair.b.values();
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        double ba = 0.0;
        for (std::size_t k = 0; k < r; ++k) ba += b[i * r + k] * a[k * d + j];
        w[i * d + j] += s * ba;
      }
    }
  }
  return merged;
}

Checkpoint adapter_to_checkpoint(const LoraAdapter& adapter, const Seq2SeqModel& base) {
  Checkpoint ckpt;
  ckpt.kind = "lora";
  ckpt.config = {{"lora", to_json(adapter.config())}, {"d_model", adapter.d_model()}};
  ckpt.meta = {{"base_hash", fmt::format("{:016x}", tensor_map_hash(base.parameters()))}};
  ckpt.tensors = adapter.parameters();
  return ckpt;
}

void save_adapter(const std::filesystem::path& path, const LoraAdapter& adapter, const Seq2SeqModel& base) {
  save_checkpoint_file(path, adapter_to_checkpoint(adapter, base));
}

std::shared_ptr<LoraAdapter> adapter_from_checkpoint(const Checkpoint& ckpt, const Seq2SeqModel& model) {
  if (ckpt.kind != "lora" && ckpt.kind != "ppo-policy") {
    throw Error("wrong_kind", "expected an adapter checkpoint, found kind '" + ckpt.kind + "'");
  }
  const nlohmann::json& cfg_json = ckpt.kind == "lora" ? ckpt.config : ckpt.config.at("adapter");
  const LoraConfig cfg = lora_config_from_json(cfg_json.at("lora"));
  const int d = cfg_json.at("d_model").get<int>();
  if (d != model.config().d_model) {
    throw Error("shape_mismatch", "adapter was trained for d_model " + std::to_string(d) +
                                      " but the model has d_model " +
                                      std::to_string(model.config().d_model));
  }
  cfg.validate(d);
  const std::string expected_hash = fmt::format("{:016x}", tensor_map_hash(model.parameters()));
  if (ckpt.meta.contains("base_hash") && ckpt.meta["base_hash"] != expected_hash) {
    log::info("adapter was trained on a different base model (hash {} vs {})",
              ckpt.meta["base_hash"].get<std::string>(), expected_hash);
  }
  auto adapter = std::make_shared<LoraAdapter>(cfg, d);
  const std::size_t r = cfg.rank, du = d;
  for (const std::string& name : lora_target_names(model.config(), cfg)) {
    auto ia = ckpt.tensors.find(name + ".lora_A");
    auto ib = ckpt.tensors.find(name + ".lora_B");
    if (ia == ckpt.tensors.end() || ib == ckpt.tensors.end()) {
      throw Error("corrupt_checkpoint", "adapter is missing tensors for " + name);
    }
    if (ia->second.shape() != ad::Shape{r, du} || ib->second.shape() != ad::Shape{du, r}) {
      throw Error("shape_mismatch", "adapter tensors for " + name + " have unexpected shapes");
    }
    Tensor a = ia->second.detach();
    Tensor b = ib->second.detach();
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    adapter->targets().emplace(name, LoraPair{std::move(a), std::move(b)});
  }
  return adapter;
}

std::shared_ptr<LoraAdapter> load_adapter(const std::filesystem::path& path, const Seq2SeqModel& model) {
  return adapter_from_checkpoint(load_checkpoint_file(path), model);
}

}  // namespace coarl::nn
