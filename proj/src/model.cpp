#include "coarl/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "coarl/error.hpp"
#include "coarl/json_fields.hpp"
#include "coarl/lora.hpp"
#include "coarl/rng.hpp"

namespace coarl::nn {

using ad::Tensor;

// ---- configs ---------------------------------------------------------------

void ModelConfig::validate() const {
  auto bad = [](const std::string& m) { throw Error("invalid_config", "model: " + m); };
  if (vocab_size < kVocabSize) bad("vocab_size must be at least " + std::to_string(kVocabSize));
  if (d_model <= 0 || n_heads <= 0) bad("d_model and n_heads must be positive");
  if (d_model % n_heads != 0) bad("d_model must be divisible by n_heads");
  if (n_enc_layers < 0 || n_dec_layers < 1) bad("need at least one decoder layer");
  if (d_ff <= 0) bad("d_ff must be positive");
  if (max_seq_len < 2) bad("max_seq_len must be >= 2");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) bad("dropout_rate must be in [0, 1)");
}

std::size_t ModelConfig::parameter_count() const {
  const std::size_t v = vocab_size, d = d_model, f = d_ff;
  const std::size_t enc = 4 * d * d + 2 * d * f + f + 5 * d;
  const std::size_t dec = 8 * d * d + 2 * d * f + f + 7 * d;
  return v * d + n_enc_layers * enc + n_dec_layers * dec + 4 * d;
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},       {"n_heads", c.n_heads},
          {"n_enc_layers", c.n_enc_layers}, {"n_dec_layers", c.n_dec_layers}, {"d_ff", c.d_ff},
          {"max_seq_len", c.max_seq_len},   {"dropout_rate", c.dropout_rate}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  JsonFields f(j, "model");
  f.read("vocab_size", c.vocab_size);
  f.read("d_model", c.d_model);
  f.read("n_heads", c.n_heads);
  f.read("n_enc_layers", c.n_enc_layers);
  f.read("n_dec_layers", c.n_dec_layers);
  f.read("d_ff", c.d_ff);
  f.read("max_seq_len", c.max_seq_len);
  f.read("dropout_rate", c.dropout_rate);
  f.finish();
  c.validate();
  return c;
}

void SamplingConfig::validate() const {
  if (!(temperature > 0.0)) throw Error("invalid_config", "sampling: temperature must be > 0");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw Error("invalid_config", "sampling: top_p must be in (0, 1]");
  if (top_k < 1) throw Error("invalid_config", "sampling: top_k must be >= 1");
  if (max_new_tokens < 1) throw Error("invalid_config", "sampling: max_new_tokens must be >= 1");
}

// ---- construction ----------------------------------------------------------

std::vector<std::string> parameter_names(const ModelConfig& cfg) {
  std::vector<std::string> names{"embedding"};
  auto attn = [&names](const std::string& p) {
    for (const char* m : {"q", "k", "v", "o"}) names.push_back(p + "." + m + ".weight");
  };
  auto ln = [&names](const std::string& p) {
    names.push_back(p + ".gain");
    names.push_back(p + ".bias");
  };
  auto ff = [&names](const std::string& p) {
    for (const char* m : {"w1", "b1", "w2", "b2"}) names.push_back(p + "." + m);
  };
  for (int i = 0; i < cfg.n_enc_layers; ++i) {
    const std::string p = "encoder.layers." + std::to_string(i);
    ln(p + ".ln1");
    attn(p + ".self_attn");
    ln(p + ".ln2");
    ff(p + ".ff");
  }
  ln("encoder.final_ln");
  for (int i = 0; i < cfg.n_dec_layers; ++i) {
    const std::string p = "decoder.layers." + std::to_string(i);
    ln(p + ".ln1");
    attn(p + ".self_attn");
    ln(p + ".ln2");
    attn(p + ".cross_attn");
    ln(p + ".ln3");
    ff(p + ".ff");
  }
  ln("decoder.final_ln");
  return names;
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

ad::Shape param_shape(const std::string& name, const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model, f = cfg.d_ff;
  if (name == "embedding") return {static_cast<std::size_t>(cfg.vocab_size), d};
  if (ends_with(name, ".w1")) return {f, d};
  if (ends_with(name, ".b1")) return {f};
  if (ends_with(name, ".w2")) return {d, f};
  if (ends_with(name, ".weight")) return {d, d};
  return {d};  // layer-norm gain/bias and b2
}

Tensor init_param(const std::string& name, const ModelConfig& cfg, std::uint64_t seed) {
  ad::Shape shape = param_shape(name, cfg);
  if (ends_with(name, ".gain")) return Tensor::full(shape, 1.0, true);
  if (ends_with(name, ".bias") || ends_with(name, ".b1") || ends_with(name, ".b2")) {
    return Tensor::zeros(shape, true);
  }
  double bound = 0.0;
  if (name == "embedding") {
    // std 0.02 keeps the tied output layer close to uniform at init.
    bound = 0.02 * std::sqrt(3.0);
  } else {
    bound = 1.0 / std::sqrt(static_cast<double>(shape[1]));  // 1/sqrt(fan_in)
  }
  Rng rng(derive_seed(seed, name));
  std::vector<double> v(ad::shape_numel(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(v), true);
}

std::shared_ptr<const std::vector<double>> sinusoid_table(const ModelConfig& cfg) {
  const std::size_t t = cfg.max_seq_len, d = cfg.d_model;
  auto table = std::make_shared<std::vector<double>>(t * d);
  for (std::size_t pos = 0; pos < t; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      (*table)[pos * d + i] = std::sin(static_cast<double>(pos) * freq);
      if (i + 1 < d) (*table)[pos * d + i + 1] = std::cos(static_cast<double>(pos) * freq);
    }
  }
  return table;
}

}  // namespace

Seq2SeqModel::Seq2SeqModel(ModelConfig cfg, std::uint64_t seed) : config_(cfg) {
  config_.validate();
  for (const std::string& name : parameter_names(config_)) {
    params_.emplace(name, init_param(name, config_, seed));
  }
  positions_ = sinusoid_table(config_);
}

Seq2SeqModel::Seq2SeqModel(ModelConfig cfg, std::map<std::string, Tensor> params)
    : config_(cfg), params_(std::move(params)) {
  config_.validate();
  positions_ = sinusoid_table(config_);
}

Seq2SeqModel Seq2SeqModel::from_checkpoint(const Checkpoint& ckpt) {
  const ModelConfig cfg = model_config_from_json(ckpt.config.at("model"));
  std::map<std::string, Tensor> params;
  for (const std::string& name : parameter_names(cfg)) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) {
      throw Error("corrupt_checkpoint", "checkpoint is missing parameter " + name);
    }
    const ad::Shape expected = param_shape(name, cfg);
    if (it->second.shape() != expected) {
      throw Error("corrupt_checkpoint", "parameter " + name + " has shape " +
                                            ad::shape_str(it->second.shape()) + ", expected " +
                                            ad::shape_str(expected));
    }
    Tensor t = it->second.detach();
    t.set_requires_grad(true);
    params.emplace(name, std::move(t));
  }
  return Seq2SeqModel(cfg, std::move(params));
}

Checkpoint Seq2SeqModel::to_checkpoint(const std::string& kind) const {
  Checkpoint ckpt;
  ckpt.kind = kind;
  ckpt.config = {{"model", to_json(config_)}};
  for (const auto& [name, t] : params_) ckpt.tensors.emplace(name, t);
  return ckpt;
}

Tensor& Seq2SeqModel::param(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error("unknown_parameter", "no parameter named " + name);
  return it->second;
}

const Tensor& Seq2SeqModel::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error("unknown_parameter", "no parameter named " + name);
  return it->second;
}

void Seq2SeqModel::set_frozen(const std::string& name, bool frozen) {
  param(name).set_requires_grad(!frozen);
}

void Seq2SeqModel::freeze_all() {
  for (auto& [name, t] : params_) t.set_requires_grad(false);
}

Seq2SeqModel Seq2SeqModel::clone() const {
  std::map<std::string, Tensor> copy;
  for (const auto& [name, t] : params_) copy.emplace(name, t.clone());
  Seq2SeqModel m(config_, std::move(copy));
  m.adapter_ = adapter_;
  return m;
}

Seq2SeqModel Seq2SeqModel::with_adapter(std::shared_ptr<LoraAdapter> adapter) const {
  Seq2SeqModel m = *this;
  m.adapter_ = std::move(adapter);
  return m;
}

// ---- forward ---------------------------------------------------------------

void Seq2SeqModel::check_ids(std::span<const int> ids, const char* what) const {
  if (ids.empty()) throw Error("invalid_argument", std::string(what) + " sequence is empty");
  if (ids.size() > static_cast<std::size_t>(config_.max_seq_len)) {
    throw Error("sequence_too_long", std::string(what) + " length " + std::to_string(ids.size()) +
                                         " exceeds max_seq_len " + std::to_string(config_.max_seq_len));
  }
  for (int id : ids) {
    if (id < 0 || id >= config_.vocab_size) {
      throw Error("id_out_of_range", std::string(what) + " contains id " + std::to_string(id));
    }
  }
}

Tensor Seq2SeqModel::embed(std::span<const int> ids) const {
  const std::size_t t = ids.size(), d = config_.d_model;
  Tensor tok = ad::scale(ad::embedding(param("embedding"), ids), std::sqrt(static_cast<double>(d)));
  std::vector<double> pos(positions_->begin(), positions_->begin() + static_cast<std::ptrdiff_t>(t * d));
  return ad::add(tok, Tensor::from({t, d}, std::move(pos)));
}

Tensor Seq2SeqModel::project(const Tensor& x, const std::string& weight, const ForwardOptions& opts) const {
  Tensor y = ad::linear(x, param(weight));
  if (adapter_) {
    if (const LoraPair* pair = adapter_->find(weight)) {
      Tensor in = ad::dropout(x, adapter_->config().dropout, opts.dropout_rng);
      Tensor delta = ad::linear(ad::linear(in, pair->a), pair->b);
      y = ad::add(y, ad::scale(delta, adapter_->scale()));
    }
  }
  return y;
}

Tensor Seq2SeqModel::norm(const Tensor& x, const std::string& prefix) const {
  return ad::layer_norm(x, param(prefix + ".gain"), param(prefix + ".bias"));
}

Tensor Seq2SeqModel::residual_dropout(const Tensor& x, const ForwardOptions& opts) const {
  return ad::dropout(x, config_.dropout_rate, opts.dropout_rng);
}

Tensor Seq2SeqModel::attention(const Tensor& xq, const Tensor& xkv, const std::string& prefix,
                               bool causal, const ForwardOptions& opts) const {
  const std::size_t h = config_.n_heads, dh = config_.d_model / config_.n_heads;
  Tensor q = project(xq, prefix + ".q.weight", opts);
  Tensor k = project(xkv, prefix + ".k.weight", opts);
  Tensor v = project(xkv, prefix + ".v.weight", opts);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  heads.reserve(h);
  for (std::size_t i = 0; i < h; ++i) {
    Tensor qh = ad::slice_cols(q, i * dh, dh);
    Tensor kh = ad::slice_cols(k, i * dh, dh);
    Tensor vh = ad::slice_cols(v, i * dh, dh);
    Tensor scores = ad::scale(ad::linear(qh, kh), inv_sqrt);
    Tensor p = causal ? ad::causal_softmax(scores) : ad::softmax(scores);
    heads.push_back(ad::matmul(p, vh));
  }
  Tensor merged = h == 1 ? heads[0] : ad::concat_cols(heads);
  return project(merged, prefix + ".o.weight", opts);
}

Tensor Seq2SeqModel::feed_forward(const Tensor& x, const std::string& prefix) const {
  Tensor hidden = ad::gelu(ad::add_row(ad::linear(x, param(prefix + ".w1")), param(prefix + ".b1")));
  return ad::add_row(ad::linear(hidden, param(prefix + ".w2")), param(prefix + ".b2"));
}

Tensor Seq2SeqModel::encode(std::span<const int> src, const ForwardOptions& opts) const {
  check_ids(src, "source");
  Tensor x = embed(src);
  for (int i = 0; i < config_.n_enc_layers; ++i) {
    const std::string p = "encoder.layers." + std::to_string(i);
    Tensor h = norm(x, p + ".ln1");
    x = ad::add(x, residual_dropout(attention(h, h, p + ".self_attn", false, opts), opts));
    x = ad::add(x, residual_dropout(feed_forward(norm(x, p + ".ln2"), p + ".ff"), opts));
  }
  return norm(x, "encoder.final_ln");
}

Tensor Seq2SeqModel::decode(const Tensor& memory, std::span<const int> dec_in,
                            const ForwardOptions& opts) const {
  check_ids(dec_in, "decoder input");
  Tensor x = embed(dec_in);
  for (int i = 0; i < config_.n_dec_layers; ++i) {
    const std::string p = "decoder.layers." + std::to_string(i);
    Tensor h = norm(x, p + ".ln1");
    x = ad::add(x, residual_dropout(attention(h, h, p + ".self_attn", true, opts), opts));
    x = ad::add(x, residual_dropout(attention(norm(x, p + ".ln2"), memory, p + ".cross_attn", false, opts), opts));
    x = ad::add(x, residual_dropout(feed_forward(norm(x, p + ".ln3"), p + ".ff"), opts));
  }
  return ad::linear(norm(x, "decoder.final_ln"), param("embedding"));
}

Tensor Seq2SeqModel::forward(std::span<const int> src, std::span<const int> tgt,
                             const ForwardOptions& opts) const {
  if (tgt.empty()) throw Error("invalid_argument", "target sequence is empty");
  std::vector<int> dec_in;
  dec_in.reserve(tgt.size());
  dec_in.push_back(kBosId);
  dec_in.insert(dec_in.end(), tgt.begin(), tgt.end() - 1);
  for (int id : tgt) {
    if (id < 0 || id >= config_.vocab_size) {
      throw Error("id_out_of_range", "target contains id " + std::to_string(id));
    }
  }
  return decode(encode(src, opts), dec_in, opts);
}

std::vector<double> Seq2SeqModel::mean_embedding(std::span<const int> ids) const {
  const std::size_t d = config_.d_model;
  std::vector<double> out(d, 0.0);
  if (ids.empty()) return out;
  const Tensor& table = param("embedding");
  for (int id : ids) {
    if (id < 0 || id >= config_.vocab_size) {
      throw Error("id_out_of_range", "mean_embedding: id " + std::to_string(id));
    }
    for (std::size_t j = 0; j < d; ++j) out[j] += table.at(static_cast<std::size_t>(id) * d + j);
  }
  for (double& v : out) v /= static_cast<double>(ids.size());
  return out;
}

// ---- decoding --------------------------------------------------------------

std::pair<std::vector<int>, std::vector<double>> filtered_distribution(std::span<const double> logits,
                                                                       const SamplingConfig& cfg) {
  cfg.validate();
  std::vector<int> order(logits.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return logits[a] > logits[b]; });
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(cfg.top_k), order.size());
  order.resize(k);

  std::vector<double> probs(k);
  const double mx = logits[order[0]] / cfg.temperature;
  double z = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    probs[i] = std::exp(logits[order[i]] / cfg.temperature - mx);
    z += probs[i];
  }
  for (double& p : probs) p /= z;

  // Smallest prefix whose mass reaches top_p; always keeps the first token.
  std::size_t keep = k;
  if (cfg.top_p < 1.0) {
    double cum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      cum += probs[i];
      if (cum >= cfg.top_p) {
        keep = i + 1;
        break;
      }
    }
  }
  order.resize(keep);
  probs.resize(keep);
  const double mass = std::accumulate(probs.begin(), probs.end(), 0.0);
  for (double& p : probs) p /= mass;
  return {order, probs};
}

int choose_token(std::span<const double> logits, const SamplingConfig& cfg, Rng& rng) {
  if (!cfg.do_sample) {
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  auto [ids, probs] = filtered_distribution(logits, cfg);
  const double u = rng.uniform();
  double cum = 0.0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    cum += probs[i];
    if (u < cum) return ids[i];
  }
  return ids.back();
}

std::vector<int> generate(const Seq2SeqModel& model, std::span<const int> src, const SamplingConfig& cfg) {
  cfg.validate();
  ad::TapeScope no_record(nullptr);
  Rng rng(cfg.seed);
  const Tensor memory = model.encode(src);
  const std::size_t v = model.config().vocab_size;
  const std::size_t limit =
      std::min<std::size_t>(cfg.max_new_tokens, static_cast<std::size_t>(model.config().max_seq_len));
  std::vector<int> dec_in{kBosId};
  std::vector<int> out;
  while (out.size() < limit) {
    const Tensor logits = model.decode(memory, dec_in);
    std::span<const double> last = logits.data().subspan((dec_in.size() - 1) * v, v);
    const int tok = choose_token(last, cfg, rng);
    out.push_back(tok);
    if (tok == kEosId) break;
    dec_in.push_back(tok);
  }
  return out;
}

Tensor sequence_logprob_tensor(const Seq2SeqModel& model, std::span<const int> src,
                               std::span<const int> out, const ForwardOptions& opts) {
  if (out.empty()) throw Error("length_mismatch", "sequence_logprob: empty output sequence");
  Tensor logits = model.forward(src, out, opts);
  if (logits.dim(0) != out.size()) throw Error("length_mismatch", "sequence_logprob: logits/output length differ");
  return ad::gather_cols(ad::log_softmax(logits), out);
}

std::vector<double> sequence_logprob(const Seq2SeqModel& model, std::span<const int> src,
                                     std::span<const int> out) {
  ad::TapeScope no_record(nullptr);
  return sequence_logprob_tensor(model, src, out).values();
}

}  // namespace coarl::nn
