// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero when any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "coarl/config.hpp"
#include "coarl/evaluate.hpp"
#include "coarl/lora.hpp"
#include "coarl/metrics.hpp"
#include "coarl/bm25.hpp"
#include "coarl/pipeline.hpp"
#include "coarl/ppo.hpp"
#include "coarl/reward.hpp"
#include "coarl/trainer.hpp"
#include "coarl/log.hpp"
#include "test_util.hpp"

using namespace coarl;
namespace fs = std::filesystem;
using ad::Tensor;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

void require(Outcome& o, bool ok, const std::string& what) {
  if (!ok) {
    o.pass = false;
    o.detail += (o.detail.empty() ? "" : "; ") + std::string("failed: ") + what;
  }
}

void note(Outcome& o, const std::string& what) { o.detail += (o.detail.empty() ? "" : "; ") + what; }

const double kLn259 = std::log(259.0);

// ---- 1. gradients ---------------------------------------------------------------

// Fourth-order central differences; truncation error is O(h^4), so rounding
// dominates and the estimate is good to ~1e-11 absolute on an O(5) loss.
testutil::GradCheck gradcheck5(std::vector<Tensor> inputs, const std::function<Tensor(std::vector<Tensor>&)>& f,
                               double h, double floor) {
  for (auto& t : inputs) t.zero_grad();
  {
    ad::Tape tape;
    ad::TapeScope scope(&tape);
    Tensor loss = f(inputs);
    tape.backward(loss);
  }
  testutil::GradCheck out;
  ad::TapeScope off(nullptr);
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double x0 = t.values()[i];
      auto at = [&](double dx) {
        t.values()[i] = x0 + dx;
        return f(inputs).item();
      };
      const double numeric = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
      t.values()[i] = x0;
      out.max_rel = std::max(out.max_rel, testutil::rel_error(analytic[i], numeric, floor));
      ++out.checked;
    }
  }
  return out;
}

Outcome gradient_suite() {
  using testutil::probe;
  using testutil::random_tensor;
  using Fn = std::function<Tensor(std::vector<Tensor>&)>;
  Outcome o;
  auto x = random_tensor({3, 4}, 11), y = random_tensor({3, 4}, 12), b4 = random_tensor({4}, 13);
  auto a = random_tensor({3, 4}, 21), m45 = random_tensor({4, 5}, 22), w54 = random_tensor({5, 4}, 23);
  auto xs = random_tensor({3, 4}, 31, -2, 2), g = random_tensor({4}, 32, 0.5, 1.5);
  auto sq = random_tensor({4, 4}, 34, -2, 2);
  auto table = random_tensor({6, 4}, 41), logits = random_tensor({3, 4}, 42, -3, 3);
  Tensor kx = Tensor::from({3, 4}, {-0.9, -0.5, -0.2, 0.1, 0.35, 0.6, 0.9, -0.7, 0.25, -0.35, 0.75, 0.45}, true);
  Tensor ky = Tensor::from({3, 4}, {-0.8, -0.6, 0.1, -0.1, 0.5, 0.4, 0.7, -0.5, 0.05, -0.2, 0.85, 0.3}, true);
  static const std::vector<int> ids{2, 5, 2}, tg{1, 3, -1}, cols{3, 0, 2};

  const std::vector<std::tuple<const char*, std::vector<Tensor>, Fn>> ops = {
      {"add", {x, y}, [](auto& in) { return probe(ad::add(in[0], in[1])); }},
      {"sub", {x, y}, [](auto& in) { return probe(ad::sub(in[0], in[1])); }},
      {"mul", {x, y}, [](auto& in) { return probe(ad::mul(in[0], in[1])); }},
      {"add_row", {x, b4}, [](auto& in) { return probe(ad::add_row(in[0], in[1])); }},
      {"scale", {x}, [](auto& in) { return probe(ad::scale(in[0], -1.7)); }},
      {"exp", {x}, [](auto& in) { return probe(ad::exp(in[0])); }},
      {"sum", {x}, [](auto& in) { return ad::sum(in[0]); }},
      {"mean", {x}, [](auto& in) { return ad::mean(ad::mul(in[0], in[0])); }},
      {"transpose", {x}, [](auto& in) { return probe(ad::transpose(in[0])); }},
      {"gelu", {x}, [](auto& in) { return probe(ad::gelu(in[0])); }},
      {"clamp", {kx}, [](auto& in) { return probe(ad::clamp(in[0], -0.4, 0.3)); }},
      {"minimum", {kx, ky}, [](auto& in) { return probe(ad::minimum(in[0], in[1])); }},
      {"matmul", {a, m45}, [](auto& in) { return probe(ad::matmul(in[0], in[1])); }},
      {"linear", {a, w54}, [](auto& in) { return probe(ad::linear(in[0], in[1])); }},
      {"slice_cols", {a}, [](auto& in) { return probe(ad::slice_cols(in[0], 1, 2)); }},
      {"concat_cols", {a, a.clone()}, [](auto& in) { return probe(ad::concat_cols({in[0], in[1]})); }},
      {"gather_cols", {a}, [](auto& in) { return probe(ad::gather_cols(in[0], cols)); }},
      {"softmax", {xs}, [](auto& in) { return probe(ad::softmax(in[0])); }},
      {"softmax_axis0", {xs}, [](auto& in) { return probe(ad::softmax(in[0], 0)); }},
      {"log_softmax", {xs}, [](auto& in) { return probe(ad::log_softmax(in[0])); }},
      {"causal_softmax", {sq}, [](auto& in) { return probe(ad::causal_softmax(in[0])); }},
      {"layer_norm", {xs, g, b4}, [](auto& in) { return probe(ad::layer_norm(in[0], in[1], in[2])); }},
      {"embedding", {table}, [](auto& in) { return probe(ad::embedding(in[0], ids)); }},
      {"cross_entropy", {logits}, [](auto& in) { return ad::cross_entropy(in[0], tg, -1); }},
      {"dropout_off", {x}, [](auto& in) { return probe(ad::dropout(in[0], 0.3, nullptr)); }},
  };
  double worst = 0.0;
  std::string worst_op;
  for (const auto& [name, inputs, fn] : ops) {
    const double r = testutil::gradcheck(inputs, fn, 1e-6, 1e-8).max_rel;
    if (r > worst) worst = r, worst_op = name;
    require(o, r <= 1e-6, fmt::format("{} rel {:.2e}", name, r));
  }
  note(o, fmt::format("{} ops max rel {:.2e} ({})", ops.size(), worst, worst_op));

  nn::ModelConfig c;
  c.d_model = 4;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ff = 8;
  c.max_seq_len = 16;
  nn::Seq2SeqModel m(c, 20);
  const std::vector<int> src{72, 105, 33, kEosId}, tgt{111, 107, kEosId, kPadId};
  std::vector<Tensor> params;
  for (auto& [name, t] : m.parameters()) params.push_back(t);
  // Gradients whose magnitude is below the floor are compared in absolute terms.
  const double floor = 1e-4;
  const auto full = gradcheck5(params, [&](auto&) { return ad::cross_entropy(m.forward(src, tgt), tgt, kPadId); },
                               1e-3, floor);
  require(o, full.max_rel <= 1e-6, fmt::format("full model rel {:.2e}", full.max_rel));
  note(o, fmt::format("full model loss {} params max rel {:.2e} (abs floor {:.0e})", full.checked, full.max_rel,
                      floor));
  return o;
}

// ---- synthetic desk data --------------------------------------------------------

std::vector<data::ExplanationRecord> synthetic_explanations() {
  const std::vector<std::string> groups{"zebras", "dogs"};
  std::vector<data::ExplanationRecord> out;
  for (const auto& grp : groups) {
    for (data::Dimension d : data::kAllDimensions) {
      out.push_back({grp + " are bad", d, std::string(data::dimension_name(d)) + " of " + grp, {}});
    }
  }
  return out;
}

std::vector<data::CSRecord> synthetic_pairs() {
  const std::vector<std::string> groups{"zebras", "dogs", "owls", "bees"};
  const std::vector<std::string> replies{"facts say no", "be kind", "why say so?", "that is wrong"};
  std::vector<data::CSRecord> out;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    for (std::size_t k = 0; k < 4; ++k) {
      data::CSRecord r;
      r.id = fmt::format("s{:02}", gi * 4 + k);
      r.hate_speech = groups[gi] + " are bad";
      r.intent = data::kAllIntents[k];
      r.counterspeech = replies[k] + " " + groups[gi];
      out.push_back(r);
    }
  }
  return out;
}

nn::ModelConfig desk_model() {
  nn::ModelConfig c;
  c.d_model = 32;
  c.n_heads = 4;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ff = 64;
  c.max_seq_len = 160;
  return c;
}

train::TrainConfig desk_train(double lr, int batch) {
  train::TrainConfig t;
  t.learning_rate = lr;
  t.batch_size = batch;
  t.epochs = 1000;
  t.max_steps = 200;
  t.max_input_tokens = 160;
  return t;
}

// Fixed sample set, reshuffled every epoch.
train::EpochSource fixed_source(std::vector<data::PromptSample> samples, std::uint64_t seed) {
  return [samples = std::move(samples), seed](std::uint64_t epoch) {
    auto out = samples;
    Rng rng(derive_seed(seed, "acceptance-order", epoch));
    rng.shuffle(out);
    return out;
  };
}

struct OverfitResult {
  double initial = 0.0;
  double final = 0.0;
  int steps_to_90 = -1;
};

OverfitResult overfit(train::SupervisedTrainer& t, const std::vector<data::PromptSample>& samples) {
  OverfitResult r;
  r.initial = t.evaluate(samples);
  while (!t.done()) {
    t.step();
    if (t.steps() % 10 == 0 || t.done()) {
      const double l = t.evaluate(samples);
      r.final = l;
      if (r.steps_to_90 < 0 && l <= 0.1 * r.initial) r.steps_to_90 = static_cast<int>(t.steps());
    }
  }
  return r;
}

struct DeskPhases {
  std::optional<nn::Seq2SeqModel> base;     // after phase 1
  std::optional<nn::Seq2SeqModel> adapted;  // base + phase-2 adapter
  OverfitResult phase1, phase2;
  std::uint64_t hash_before = 0, hash_after = 0;
  std::vector<data::PromptSample> phase2_samples;
};

DeskPhases run_desk_phases() {
  DeskPhases d;
  auto p1_samples = data::build_multitask_mixture(synthetic_explanations(), 1);
  d.base.emplace(desk_model(), 101);
  train::SupervisedTrainer t1(*d.base, train::Phase::kInstruction, desk_train(3e-3, 14),
                              fixed_source(p1_samples, 1), 1);
  d.phase1 = overfit(t1, p1_samples);

  for (const auto& r : synthetic_pairs()) d.phase2_samples.push_back(data::counterspeech_sample(r));
  d.adapted.emplace(d.base->clone());
  nn::LoraConfig l;
  l.dropout = 0.0;
  nn::attach(*d.adapted, l, 102);
  d.hash_before = tensor_map_hash(d.adapted->parameters());
  train::SupervisedTrainer t2(*d.adapted, train::Phase::kAdapter, desk_train(1e-2, 16),
                              fixed_source(d.phase2_samples, 2), 2);
  d.phase2 = overfit(t2, d.phase2_samples);
  d.hash_after = tensor_map_hash(d.adapted->parameters());
  return d;
}

// ---- 2. adapters ----------------------------------------------------------------

Outcome lora_identity(const DeskPhases& d) {
  Outcome o;
  nn::Seq2SeqModel base(desk_model(), 7);
  nn::Seq2SeqModel wrapped = base.clone();
  nn::attach(wrapped, nn::LoraConfig{}, 8);
  Rng rng(9);
  int identical = 0;
  std::vector<std::pair<std::vector<int>, std::vector<int>>> inputs;
  for (int i = 0; i < 20; ++i) {
    std::vector<int> src(1 + rng.below(40)), tgt(1 + rng.below(20));
    for (int& v : src) v = static_cast<int>(rng.below(kVocabSize));
    for (int& v : tgt) v = static_cast<int>(rng.below(kVocabSize));
    if (wrapped.forward(src, tgt).values() == base.forward(src, tgt).values()) ++identical;
    inputs.emplace_back(std::move(src), std::move(tgt));
  }
  require(o, identical == 20, "fresh adapter changed logits");
  note(o, fmt::format("{}/20 inputs bit-identical", identical));

  const nn::Seq2SeqModel merged = nn::merge(*d.adapted);
  double worst = 0.0;
  for (const auto& [src, tgt] : inputs) {
    const auto lhs = d.adapted->forward(src, tgt).values();
    const auto rhs = merged.forward(src, tgt).values();
    for (std::size_t i = 0; i < lhs.size(); ++i) worst = std::max(worst, std::abs(lhs[i] - rhs[i]));
  }
  require(o, worst <= 1e-9, "merge mismatch");
  note(o, fmt::format("merge max-abs {:.2e} after 200 trained steps", worst));
  require(o, d.hash_before == d.hash_after, "base hash changed");
  note(o, fmt::format("base hash {:016x} before/after {}", d.hash_after, d.hash_before == d.hash_after ? "equal" : "differ"));
  return o;
}

// ---- 3. reward algebra ----------------------------------------------------------

Outcome reward_algebra() {
  Outcome o;
  require(o, reward::combine(-1, 1, 0).total == 1.0, "(-1,1,0)");
  require(o, reward::combine(1, 0, 1).total == 0.0, "(1,0,1)");
  require(o, reward::combine(0, 0.5, 0.5).total == 0.5, "(0,0.5,0.5)");
  require(o, reward::combine(-1, 0, 1).total == 1.0 / 3.0, "(-1,0,1)");
  Rng rng(2024);
  int violations = 0;
  for (int i = 0; i < 10000; ++i) {
    const double pc = rng.uniform(-1, 1), aq = rng.uniform(0, 1), tox = rng.uniform(0, 1);
    const double base = reward::combine(pc, aq, tox).total;
    const double dpc = rng.uniform(0, 1 - pc), daq = rng.uniform(0, 1 - aq), dtox = rng.uniform(0, 1 - tox);
    if (reward::combine(std::min(1.0, pc + dpc), aq, tox).total > base) ++violations;
    if (reward::combine(pc, std::min(1.0, aq + daq), tox).total < base) ++violations;
    if (reward::combine(pc, aq, std::min(1.0, tox + dtox)).total > base) ++violations;
    if (!(base >= 0.0 && base <= 1.0)) ++violations;
  }
  require(o, violations == 0, fmt::format("{} monotonicity violations", violations));
  note(o, fmt::format("4 corners exact, 10000 random triples, {} violations", violations));
  return o;
}

// ---- 4. PPO null tests ----------------------------------------------------------

Outcome ppo_null() {
  Outcome o;
  nn::Seq2SeqModel policy(desk_model(), 31);
  nn::LoraConfig l;
  l.dropout = 0.0;
  auto adapter = nn::attach(policy, l, 32);
  // A nonzero adapter, so the check is not trivially about B = 0.
  Rng init(33);
  for (auto& [name, t] : adapter->parameters()) {
    for (double& v : t.values()) v = init.uniform(-0.05, 0.05);
  }
  const nn::Seq2SeqModel reference = policy.with_adapter(adapter->clone());
  rl::PPOConfig cfg;
  cfg.batch_size = 8;
  cfg.max_new_tokens = 12;
  std::vector<rl::PromptItem> prompts;
  for (const auto& r : synthetic_pairs()) {
    const auto s = data::counterspeech_sample(r);
    prompts.push_back({s.prompt, r.hate_speech});
    if (prompts.size() == 8) break;
  }
  const reward::RewardFn fn = [](std::string_view, std::string_view, std::string_view y) {
    return reward::combine(0.0, std::min(1.0, y.size() / 10.0), 0.0);
  };
  rl::RolloutBatch batch = rl::generate_rollouts(policy, reference, prompts, cfg, fn, 0.03, 34);
  const double kl = rl::compute_sequence_kl(batch);
  require(o, std::abs(kl) <= 1e-12, fmt::format("kl {:.3e}", kl));

  double worst_ratio = 0.0;
  std::size_t tokens = 0;
  for (const auto& r : batch.rollouts) {
    const auto lp = nn::sequence_logprob(policy, r.prompt_ids, r.response);
    for (std::size_t t = 0; t < lp.size(); ++t) {
      worst_ratio = std::max(worst_ratio, std::abs(std::exp(lp[t] - r.logp_old[t]) - 1.0));
      ++tokens;
    }
  }
  require(o, worst_ratio <= 1e-12, fmt::format("ratio off by {:.3e}", worst_ratio));

  // Surrogate gradient with every advantage zero.
  optim::ParamMap params = adapter->parameters();
  optim::zero_grads(params);
  for (const auto& r : batch.rollouts) {
    if (r.response.empty()) continue;
    ad::Tape tape;
    ad::TapeScope scope(&tape);
    Tensor logp = nn::sequence_logprob_tensor(policy, r.prompt_ids, r.response);
    Tensor ratio = ad::exp(ad::sub(logp, Tensor::from({r.response.size()}, r.logp_old)));
    const Tensor adv = Tensor::from({r.response.size()}, std::vector<double>(r.response.size(), 0.0));
    Tensor obj = ad::sum(ad::minimum(ad::mul(ratio, adv),
                                     ad::mul(ad::clamp(ratio, 1.0 - cfg.cliprange, 1.0 + cfg.cliprange), adv)));
    tape.backward(ad::scale(obj, -1.0));
  }
  double grad_max = 0.0;
  for (auto& [name, t] : params) {
    for (double v : t.grad()) grad_max = std::max(grad_max, std::abs(v));
  }
  require(o, grad_max == 0.0, fmt::format("surrogate grad {:.3e}", grad_max));

  // The same through the update routine: nothing moves.
  for (auto& r : batch.rollouts) std::fill(r.advantages.begin(), r.advantages.end(), 0.0);
  const std::uint64_t before = adapter->hash();
  optim::Adam adam;
  cfg.ppo_epochs = 2;
  cfg.mini_batch_size = 2;
  cfg.learning_rate = 1e-3;
  rl::ppo_update(policy, adam, batch, cfg, 35);
  require(o, adapter->hash() == before, "zero-advantage update moved the adapter");
  note(o, fmt::format("{} tokens: |kl| {:.1e}, max |ratio-1| {:.1e}, max |grad| {:.1e}", tokens, std::abs(kl),
                      worst_ratio, grad_max));
  return o;
}

// ---- 5. overfit -----------------------------------------------------------------

Outcome desk_overfit(const DeskPhases& d) {
  Outcome o;
  const auto& p1 = d.phase1;
  const auto& p2 = d.phase2;
  require(o, std::abs(p1.initial - kLn259) <= 0.1, fmt::format("phase-1 initial {:.4f}", p1.initial));
  require(o, p1.steps_to_90 > 0 && p1.steps_to_90 <= 200, "phase-1 drop < 90%");
  require(o, p2.steps_to_90 > 0 && p2.steps_to_90 <= 200, "phase-2 drop < 90%");
  note(o, fmt::format("phase-1 {} samples {:.4f} -> {:.4f} ({:.1f}% drop, 90% at step {})", 14, p1.initial, p1.final,
                      100 * (1 - p1.final / p1.initial), p1.steps_to_90));
  note(o, fmt::format("phase-2 {} pairs {:.4f} -> {:.4f} ({:.1f}% drop, 90% at step {})", d.phase2_samples.size(),
                      p2.initial, p2.final, 100 * (1 - p2.final / p2.initial), p2.steps_to_90));
  return o;
}

// ---- 6. RL lift -----------------------------------------------------------------

Outcome rl_lift(const DeskPhases& d) {
  Outcome o;
  // Starts from the desk SFT policy: phase-1 base plus the phase-2 adapter.
  nn::Seq2SeqModel policy = d.adapted->with_adapter(d.adapted->adapter()->clone());
  rl::PPOConfig cfg;
  cfg.learning_rate = 2e-4;
  cfg.batch_size = 16;
  cfg.mini_batch_size = 4;
  cfg.ppo_epochs = 4;
  cfg.total_steps = 300;
  cfg.max_new_tokens = 12;
  cfg.init_kl_coeff = 0.03;
  cfg.target = 1.0;
  cfg.horizon = 200.0;
  std::vector<rl::PromptItem> prompts;
  for (const auto& r : synthetic_pairs()) prompts.push_back({data::counterspeech_sample(r).prompt, r.hate_speech});
  const reward::RewardFn rigged = [](std::string_view, std::string_view, std::string_view y) {
    reward::RewardBreakdown b;
    b.total = y.find('z') != std::string_view::npos ? 1.0 : 0.0;
    return b;
  };
  rl::PPOTrainer trainer(policy, cfg, prompts, rigged, 43);
  std::vector<rl::BatchStats> trace;
  const int window = 10;
  double start = 0.0, best = -1.0;
  int reached = -1;
  while (!trainer.done()) {
    trace.push_back(trainer.step());
    if (std::getenv("COARL_ACCEPTANCE_TRACE")) {
      std::cerr << fmt::format("batch {} reward {:.3f} kl {:.3f} beta {:.5f} {}\n", trace.back().batch,
                               trace.back().mean_reward, trace.back().kl, trace.back().beta,
                               trainer.last_batch().rollouts[0].response_text);
    }
    const int n = static_cast<int>(trace.size());
    if (n == window) {
      for (const auto& s : trace) start += s.mean_reward / window;
    }
    if (n >= window) {
      double avg = 0.0;
      for (int i = n - window; i < n; ++i) avg += trace[i].mean_reward / window;
      best = std::max(best, avg);
      if (reached < 0 && avg >= start + 0.2) reached = n;
    }
  }
  require(o, reached > 0, fmt::format("reward lift {:.3f} < 0.2", best - start));
  double last = 0.0;
  for (std::size_t i = trace.size() - window; i < trace.size(); ++i) last += trace[i].mean_reward / window;
  note(o, fmt::format("reward (10-batch mean) first {:.3f}, best {:.3f}, last {:.3f}; +0.2 reached at batch {}", start,
                      best, last, reached));

  // β follows sign(kl - target) at every batch.
  int up = 0, down = 0, wrong = 0;
  for (std::size_t i = 0; i + 1 < trace.size(); ++i) {
    const double dbeta = trace[i + 1].beta - trace[i].beta;
    const double err = trace[i].kl - cfg.target;
    if (err > 0) dbeta > 0 ? ++up : ++wrong;
    if (err < 0) dbeta < 0 ? ++down : ++wrong;
  }
  require(o, wrong == 0, fmt::format("{} beta moves against the KL error", wrong));
  require(o, up > 0 && down > 0, "observed KL never crossed the target");
  note(o, fmt::format("beta {:.4f} -> {:.4f}: {} increases above target, {} decreases below", trace.front().beta,
                      trainer.beta(), up, down));
  return o;
}

// ---- 7. metric oracles ----------------------------------------------------------

Outcome metric_oracles() {
  Outcome o;
  const double r1 = eval::rouge_n("the cat sat", "the cat", 1).f1;
  require(o, std::abs(r1 - 0.8) <= 1e-12, fmt::format("rouge-1 {}", r1));
  const double me = eval::meteor_exact("cat", "cat").score;
  require(o, std::abs(me - 0.5) <= 1e-12, fmt::format("meteor {}", me));
  require(o, eval::category_match("Why would you say that?", data::Intent::kQuestioning) == 1.0, "CA rule 1");
  require(o, eval::category_match("According to studies, that is false.", data::Intent::kQuestioning) == 0.0,
          "CA rule order");
  require(o, eval::category_match("Everyone deserves kindness.", data::Intent::kPositive) == 1.0, "CA fallback");
  require(o, eval::classify_intent("In fact, this is wrong.") == data::Intent::kInformative, "CA INF before DEN");

  // Five-document BM25 table (k1 = 1.2, b = 0.75), values from an independent script.
  const data::Bm25Index idx(std::vector<std::string>{"the cat sat", "the dog sat on the mat", "cats and dogs",
                                                     "the the the", "a bird flew over the cat"});
  const std::map<std::string, std::vector<double>> table{
      {"the cat sat", {2.308436840165996, 1.0978862175325115, 0.0, 0.48155477345189407, 0.9896421254700268}},
      {"dog mat", {0.0, 2.358998139364234, 0.0, 0.0, 0.0}},
      {"cat cat", {1.9826791993014792, 0.0, 0.0, 0.0, 1.4897479066574653}},
  };
  double bm25_err = 0.0;
  for (const auto& [q, expected] : table) {
    const auto got = idx.scores(q);
    require(o, got.size() == expected.size(), "bm25 size");
    for (std::size_t i = 0; i < std::min(got.size(), expected.size()); ++i) {
      bm25_err = std::max(bm25_err, std::abs(got[i] - expected[i]));
    }
  }
  require(o, bm25_err <= 1e-9, fmt::format("bm25 err {:.2e}", bm25_err));
  note(o, fmt::format("R1 {:.4f}, METEOR {:.4f}, CA 4/4 rules, BM25 max err {:.1e}", r1, me, bm25_err));
  return o;
}

// ---- 8. determinism -------------------------------------------------------------

RunConfig determinism_config() {
  RunConfig cfg;
  cfg.seed = 2718;
  cfg.model = desk_model();
  cfg.model.max_seq_len = 128;
  cfg.lora.rank = 4;
  cfg.lora.alpha = 8;
  for (train::TrainConfig* t : {&cfg.phase1, &cfg.phase2}) {
    t->learning_rate = 3e-3;
    t->batch_size = 4;
    t->max_input_tokens = 128;
    t->max_steps = 12;
  }
  cfg.ppo.learning_rate = 1e-3;
  cfg.ppo.batch_size = 4;
  cfg.ppo.mini_batch_size = 2;
  cfg.ppo.ppo_epochs = 2;
  cfg.ppo.total_steps = 3;
  cfg.ppo.checkpoint_every = 1;
  cfg.ppo.max_prompt_tokens = 128;
  cfg.ppo.max_new_tokens = 8;
  cfg.sampling.max_new_tokens = 8;
  cfg.eval.max_input_tokens = 128;
  const std::string data_dir = COARL_DATA_DIR;
  cfg.data.counterspeech = data_dir + "/fixtures/counterspeech.jsonl";
  cfg.data.explanations = data_dir + "/fixtures/explanations.jsonl";
  cfg.reward.lexicon = data_dir + "/lexicon/toxicity.txt";
  return cfg;
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || e.is_symlink()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    files[fs::relative(e.path(), root).string()] = ss.str();
  }
  return files;
}

std::map<std::string, std::string> full_run(const fs::path& root, const RunConfig& cfg) {
  const auto p1 = pipeline::prepare_run_dir(root / "phase1", cfg, true);
  const fs::path model = pipeline::run_phase1(cfg, p1);
  const auto p2 = pipeline::prepare_run_dir(root / "phase2", cfg, true);
  const fs::path adapter = pipeline::run_phase2(cfg, p2, model);
  const auto p3 = pipeline::prepare_run_dir(root / "phase3", cfg, true);
  const fs::path policy = pipeline::run_phase3(cfg, p3, model, adapter);
  const auto ev = pipeline::prepare_run_dir(root / "eval", cfg, true);
  const nn::Seq2SeqModel final_model = pipeline::load_model(policy);
  const fs::path gens = pipeline::run_generate(cfg, ev, final_model);
  pipeline::run_evaluate(cfg, gens, &final_model, ev);
  std::map<std::string, std::string> out;
  for (const char* stage : {"phase1", "phase2", "phase3", "eval"}) {
    for (const char* sub : {"checkpoints", "metrics", "generations"}) {
      for (auto& [k, v] : snapshot(root / stage / sub)) out[fmt::format("{}/{}/{}", stage, sub, k)] = v;
    }
  }
  return out;
}

Outcome determinism() {
  Outcome o;
  const RunConfig cfg = determinism_config();
  const fs::path root = fs::temp_directory_path() / "coarl-acceptance";
  fs::remove_all(root);
  const auto a = full_run(root / "a", cfg);
  const auto b = full_run(root / "b", cfg);
  std::size_t ckpts = 0, csvs = 0;
  for (const auto& [k, v] : a) {
    if (k.find(".ckpt") != std::string::npos) ++ckpts;
    if (k.find(".csv") != std::string::npos) ++csvs;
  }
  require(o, ckpts > 0 && csvs > 0, "no artifacts");
  require(o, a == b, "artifacts differ");
  std::size_t differing = 0;
  for (const auto& [k, v] : a) {
    auto it = b.find(k);
    if (it == b.end() || it->second != v) ++differing;
  }
  note(o, fmt::format("{} files ({} checkpoints, {} CSVs), {} differ", a.size(), ckpts, csvs, differing));
  fs::remove_all(root);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  log::set_level(log::Level::kError);
  // Optional arguments select criteria by number; default runs all eight.
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  auto wanted = [&only](int id) { return only.empty() || only.count(id) != 0; };
  int failed = 0, ran = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& fn) {
    if (!wanted(id)) return;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failed;
    std::cout << fmt::format("{} [{}] {}: {} ({:.1f}s)", o.pass ? "PASS" : "FAIL", id, name, o.detail, secs)
              << std::endl;
  };
  report(1, "gradient suite", gradient_suite);
  report(3, "reward algebra", reward_algebra);
  report(4, "ppo null tests", ppo_null);
  report(7, "metric oracles", metric_oracles);
  DeskPhases desk;
  std::string desk_error = "not trained";
  if (wanted(2) || wanted(5) || wanted(6)) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      desk = run_desk_phases();
      desk_error.clear();
    } catch (const std::exception& e) {
      desk_error = e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << fmt::format("desk phases 1-2 trained in {:.1f}s", secs) << std::endl;
  }
  auto needs_desk = [&](auto fn) {
    return [&desk, &desk_error, fn]() -> Outcome {
      if (!desk_error.empty() || !desk.adapted) throw Error("desk_failed", desk_error);
      return fn(desk);
    };
  };
  report(2, "lora identity", needs_desk(lora_identity));
  report(5, "desk-scale overfit", needs_desk(desk_overfit));
  report(6, "desk-scale RL lift", needs_desk(rl_lift));
  report(8, "determinism", determinism);
  std::cout << fmt::format("{}/{} criteria passed", ran - failed, ran) << std::endl;
  return failed == 0 ? 0 : 1;
}
