#include <cmath>
#include <fstream>
#include <numeric>

#include "coarl/lora.hpp"
#include "coarl/ppo.hpp"
#include "coarl/rng.hpp"
#include "coarl/tokenizer.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace coarl;
using namespace coarl::rl;
using coarl::nn::Seq2SeqModel;

namespace {

nn::ModelConfig tiny() {
  nn::ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ff = 16;
  c.max_seq_len = 64;
  return c;
}

Seq2SeqModel policy_model(std::uint64_t seed = 1) {
  Seq2SeqModel m(tiny(), seed);
  nn::attach(m, nn::LoraConfig{2, 4.0, 0.0}, seed + 1);
  return m;
}

void randomize_adapter(nn::LoraAdapter& adapter, std::uint64_t seed, double scale = 0.5) {
  for (auto& [name, pair] : adapter.targets()) {
    Rng rng(derive_seed(seed, name));
    for (double& v : pair.a.values()) v = rng.uniform(-scale, scale);
    for (double& v : pair.b.values()) v = rng.uniform(-scale, scale);
  }
}

PPOConfig small_cfg() {
  PPOConfig c;
  c.learning_rate = 1e-3;
  c.batch_size = 4;
  c.mini_batch_size = 2;
  c.ppo_epochs = 2;
  c.total_steps = 3;
  c.max_new_tokens = 6;
  c.max_prompt_tokens = 32;
  c.checkpoint_every = 2;
  return c;
}

std::vector<PromptItem> prompts() {
  return {{"say something", "something"}, {"reply now", "now"}, {"answer me", "me"}, {"go on", "on"},
          {"one more", "more"}};
}

reward::RewardFn constant_reward(double v) {
  return [v](std::string_view, std::string_view, std::string_view) {
    reward::RewardBreakdown r;
    r.total = v;
    return r;
  };
}

}  // namespace

TEST_CASE("ppo config defaults, validation and json") {
  const PPOConfig d;
  CHECK(d.learning_rate == 1.4e-6);
  CHECK(d.init_kl_coeff == 0.03);
  CHECK(d.target == 5.0);
  CHECK(d.horizon == 10000.0);
  CHECK(d.cliprange == 0.25);
  CHECK(d.batch_size == 32);
  CHECK(d.mini_batch_size == 2);
  CHECK(d.ppo_epochs == 5);
  CHECK(!d.target_kl);
  CHECK_NOTHROW(d.validate());
  CHECK(ppo_config_from_json(to_json(d)) == d);
  PPOConfig bad = d;
  bad.mini_batch_size = 5;
  CHECK(testutil::error_code([&] { bad.validate(); }) == "invalid_config");
  bad = d;
  bad.cliprange = 1.0;
  CHECK(testutil::error_code([&] { bad.validate(); }) == "invalid_config");
  bad = d;
  bad.init_kl_coeff = 0.0;
  CHECK(testutil::error_code([&] { bad.validate(); }) == "invalid_config");
  CHECK(testutil::error_code([] { ppo_config_from_json({{"clip_range", 0.2}}); }) == "config_schema");
}

TEST_CASE("reward shaping and returns") {
  const std::vector<double> kl{0.1, -0.2, 0.3};
  CHECK(shape_rewards(kl, 0.8, 0.0) == std::vector<double>{0.0, 0.0, 0.8});
  const auto s = shape_rewards(kl, 0.8, 0.5);
  CHECK(s[0] == doctest::Approx(-0.05));
  CHECK(s[1] == doctest::Approx(0.1));
  CHECK(s[2] == doctest::Approx(-0.15 + 0.8));
  const auto g = reward_to_go(s);
  CHECK(g[2] == doctest::Approx(s[2]));
  CHECK(g[1] == doctest::Approx(s[1] + s[2]));
  CHECK(g[0] == doctest::Approx(s[0] + s[1] + s[2]));
}

TEST_CASE("whitening") {
  Rng rng(4);
  std::vector<double> v(257);
  for (double& x : v) x = rng.uniform(-3.0, 7.0);
  const auto w = whiten(v);
  const double mean = std::accumulate(w.begin(), w.end(), 0.0) / w.size();
  double var = 0.0;
  for (double x : w) var += (x - mean) * (x - mean);
  var /= w.size();
  CHECK(std::abs(mean) <= 1e-9);
  CHECK(std::abs(var - 1.0) <= 1e-6);
  const std::vector<double> flat{2.0, 2.0, 2.0};
  CHECK(whiten(flat) == std::vector<double>{0.0, 0.0, 0.0});
  const std::vector<double> two{1.0, 3.0};
  CHECK(whiten(two) == std::vector<double>{-1.0, 1.0});
}

TEST_CASE("advantages are whitened over every token of the batch") {
  RolloutBatch b;
  for (std::vector<double> shaped : {std::vector<double>{0.0, 1.0}, std::vector<double>{0.5}, std::vector<double>{0.2, 0.0, -1.0}}) {
    Rollout r;
    r.shaped = shaped;
    b.rollouts.push_back(r);
  }
  compute_advantages(b);
  std::vector<double> all;
  for (const auto& r : b.rollouts) {
    CHECK(r.returns == reward_to_go(r.shaped));
    all.insert(all.end(), r.advantages.begin(), r.advantages.end());
  }
  std::vector<double> expected;
  for (const auto& r : b.rollouts) expected.insert(expected.end(), r.returns.begin(), r.returns.end());
  expected = whiten(expected);
  CHECK(all == expected);
}

TEST_CASE("clipped objective") {
  CHECK(clipped_objective(2.0, 1.5, 0.25) == doctest::Approx(1.25 * 1.5));
  CHECK(clipped_objective(2.0, -1.5, 0.25) == doctest::Approx(2.0 * -1.5));
  CHECK(clipped_objective(0.5, -1.0, 0.25) == doctest::Approx(-0.75));
  CHECK(clipped_objective(0.5, 1.0, 0.25) == doctest::Approx(0.5));
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const double a = rng.uniform(-3, 3);
    CHECK(clipped_objective(1.0, a, 0.25) == a);
    const double rho = std::exp(rng.uniform(-2, 2));
    CHECK(clipped_objective(rho, a, 0.25) <= rho * a + 1e-15);
  }
}

TEST_CASE("adaptive KL controller") {
  CHECK(adaptive_kl_update(0.03, 5.0, 5.0, 32, 10000) == 0.03);
  CHECK(adaptive_kl_update(0.03, 500.0, 5.0, 32, 10000) == doctest::Approx(0.03 * 1.00064).epsilon(1e-15));
  CHECK(adaptive_kl_update(0.03, 0.0, 5.0, 32, 10000) == doctest::Approx(0.03 * (1 - 0.2 * 32 / 10000.0)).epsilon(1e-15));
  CHECK(adaptive_kl_update(0.03, 6.0, 5.0, 32, 10000) == doctest::Approx(0.03 * (1 + 0.2 * 32 / 10000.0)));
  CHECK(adaptive_kl_update(0.03, 5.5, 5.0, 32, 10000) == doctest::Approx(0.03 * (1 + 0.1 * 32 / 10000.0)));
  CHECK(testutil::error_code([] { adaptive_kl_update(0.03, 1.0, 0.0, 32, 10000); }) == "invalid_config");

  // Observed KL hovering within ±50% of the target keeps beta within a decade.
  double beta = 0.03;
  Rng rng(6);
  double lo = beta, hi = beta;
  for (int i = 0; i < 15000; ++i) {
    beta = adaptive_kl_update(beta, 5.0 * (1.0 + rng.uniform(-0.5, 0.5)), 5.0, 32, 10000);
    lo = std::min(lo, beta);
    hi = std::max(hi, beta);
  }
  CHECK(lo >= 0.003);
  CHECK(hi <= 0.3);
  CHECK(beta > 0.0);
}

TEST_CASE("sampled-token KL is unbiased on a 1-token vocab-3 toy") {
  const std::vector<double> p{0.5, 0.3, 0.2}, q{0.2, 0.5, 0.3};
  std::vector<std::vector<double>> lp, lq;
  double closed = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    lp.push_back({std::log(p[i])});
    lq.push_back({std::log(q[i])});
    closed += p[i] * std::log(p[i] / q[i]);
  }
  CHECK(std::abs(weighted_sequence_kl(lp, lq, p) - closed) <= 1e-15);
  CHECK(weighted_sequence_kl(lp, lp, p) == 0.0);
  CHECK(closed > 0.0);
  // Uniform weights give the plain batch mean.
  CHECK(weighted_sequence_kl(lp, lq) == doctest::Approx((std::log(2.5) + std::log(0.6) + std::log(2.0 / 3)) / 3));
  CHECK(testutil::error_code([&] { weighted_sequence_kl(lp, {{0.0}}); }) == "length_mismatch");
}

TEST_CASE("sampled-token KL enumerated over a model's vocabulary matches the exact KL") {
  Seq2SeqModel policy = policy_model(7);
  Seq2SeqModel reference = policy.with_adapter(policy.adapter()->clone());
  randomize_adapter(*policy.adapter(), 8);
  const std::vector<int> src = data::encode_with_eos("hello", 32).ids;
  std::vector<std::vector<double>> lp, lr;
  std::vector<double> w;
  for (int v = 0; v < 259; ++v) {
    const std::vector<int> out{v};
    lp.push_back(nn::sequence_logprob(policy, src, out));
    lr.push_back(nn::sequence_logprob(reference, src, out));
    w.push_back(std::exp(lp.back()[0]));
  }
  const std::vector<int> any{65};
  const double exact = full_vocab_kl(policy, reference, src, any)[0];
  CHECK(exact > 0.0);
  CHECK(std::abs(weighted_sequence_kl(lp, lr, w) - exact) <= 1e-12);
  CHECK(full_vocab_kl(reference, reference, src, any)[0] == 0.0);
}

TEST_CASE("rollouts at initialization") {
  Seq2SeqModel policy = policy_model(9);
  Seq2SeqModel reference = policy.with_adapter(policy.adapter()->clone());
  PPOConfig cfg = small_cfg();
  const auto batch = generate_rollouts(policy, reference, prompts(), cfg, constant_reward(0.4), 0.03, 10);
  REQUIRE(batch.rollouts.size() == 5);
  CHECK(batch.beta == 0.03);
  for (const auto& r : batch.rollouts) {
    REQUIRE(!r.response.empty());
    CHECK(r.response.size() <= 6);
    CHECK(r.logp_old == r.logp_ref);
    CHECK(r.logp_old.size() == r.response.size());
    for (double k : r.kl) CHECK(k == 0.0);
    // KL-shaped reward equals the raw reward.
    for (std::size_t t = 0; t + 1 < r.shaped.size(); ++t) CHECK(r.shaped[t] == 0.0);
    CHECK(r.shaped.back() == 0.4);
    CHECK(r.response_text == data::detokenize(r.response));
    CHECK(r.advantages.size() == r.response.size());
  }
  CHECK(std::abs(compute_sequence_kl(batch)) <= 1e-12);
  // Same seed, same rollouts.
  const auto again = generate_rollouts(policy, reference, prompts(), cfg, constant_reward(0.4), 0.03, 10);
  for (std::size_t i = 0; i < 5; ++i) CHECK(again.rollouts[i].response == batch.rollouts[i].response);
}

TEST_CASE("verbatim statement gets full pro stance from the reference scorer") {
  reward::RewardConfig rc;
  rc.lexicon = std::string(COARL_DATA_DIR) + "/lexicon/toxicity.txt";
  rc.raw_statement = true;
  const auto fn = reward::make_reward_fn(rc);
  const std::string x = "immigrants are stealing our jobs";
  const auto r = fn("prompt " + x, x, x);
  CHECK(r.pc_raw == 1.0);
  CHECK(r.pc_norm == 0.0);
}

TEST_CASE("scorer failures abort the batch with the prompt index") {
  Seq2SeqModel policy = policy_model(11);
  Seq2SeqModel reference = policy.with_adapter(policy.adapter()->clone());
  int calls = 0;
  reward::RewardFn failing = [&](std::string_view, std::string_view, std::string_view) -> reward::RewardBreakdown {
    if (++calls == 3) throw Error("scorer_unavailable", "down");
    return {};
  };
  try {
    generate_rollouts(policy, reference, prompts(), small_cfg(), failing, 0.03, 1);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == "scorer_unavailable");
    CHECK(std::string(e.what()).find("rollout 2") != std::string::npos);
  }
}

TEST_CASE("update with zero advantages leaves the policy unchanged") {
  Seq2SeqModel policy = policy_model(12);
  Seq2SeqModel reference = policy.with_adapter(policy.adapter()->clone());
  auto batch = generate_rollouts(policy, reference, prompts(), small_cfg(), constant_reward(0.5), 0.0, 13);
  for (auto& r : batch.rollouts) std::fill(r.advantages.begin(), r.advantages.end(), 0.0);
  const auto before = policy.adapter()->hash();
  optim::Adam adam;
  PPOConfig cfg = small_cfg();
  cfg.batch_size = 5;
  cfg.mini_batch_size = 1;
  const auto stats = ppo_update(policy, adam, batch, cfg, 14);
  CHECK(stats.minibatches == 10);
  CHECK(stats.surrogate_loss == 0.0);
  CHECK(policy.adapter()->hash() == before);
}

TEST_CASE("positive advantages raise the response probability, base stays frozen") {
  Seq2SeqModel policy = policy_model(15);
  Seq2SeqModel reference = policy.with_adapter(policy.adapter()->clone());
  const auto base = tensor_map_hash(policy.parameters());
  auto batch = generate_rollouts(policy, reference, {prompts()[0]}, small_cfg(), constant_reward(1.0), 0.0, 16);
  auto& r = batch.rollouts[0];
  std::fill(r.advantages.begin(), r.advantages.end(), 1.0);
  const auto lp0 = nn::sequence_logprob(policy, r.prompt_ids, r.response);
  optim::Adam adam;
  PPOConfig cfg = small_cfg();
  cfg.learning_rate = 1e-2;
  cfg.batch_size = 1;
  cfg.mini_batch_size = 1;
  ppo_update(policy, adam, batch, cfg, 17);
  const auto lp1 = nn::sequence_logprob(policy, r.prompt_ids, r.response);
  CHECK(std::accumulate(lp1.begin(), lp1.end(), 0.0) > std::accumulate(lp0.begin(), lp0.end(), 0.0));
  CHECK(tensor_map_hash(policy.parameters()) == base);
  CHECK(policy.adapter()->hash() != reference.adapter()->hash());
}

TEST_CASE("non-finite ratios skip the mini-batch") {
  Seq2SeqModel policy = policy_model(18);
  Seq2SeqModel reference = policy.with_adapter(policy.adapter()->clone());
  auto batch = generate_rollouts(policy, reference, {prompts()[0], prompts()[1]}, small_cfg(), constant_reward(1.0),
                                 0.0, 19);
  for (auto& r : batch.rollouts) {
    std::fill(r.advantages.begin(), r.advantages.end(), 1.0);
    r.logp_old[0] = -std::numeric_limits<double>::infinity();
  }
  const auto before = policy.adapter()->hash();
  optim::Adam adam;
  PPOConfig cfg = small_cfg();
  cfg.batch_size = 2;
  const auto stats = ppo_update(policy, adam, batch, cfg, 20);
  CHECK(stats.skipped == cfg.ppo_epochs);
  CHECK(stats.minibatches == 0);
  CHECK(policy.adapter()->hash() == before);
}

TEST_CASE("target_kl stops the update early") {
  Seq2SeqModel policy = policy_model(21);
  Seq2SeqModel reference = policy.with_adapter(policy.adapter()->clone());
  auto batch = generate_rollouts(policy, reference, prompts(), small_cfg(), constant_reward(1.0), 0.0, 22);
  for (auto& r : batch.rollouts) {
    for (std::size_t t = 0; t < r.advantages.size(); ++t) r.advantages[t] = t % 2 ? 1.0 : -1.0;
  }
  optim::Adam adam;
  PPOConfig cfg = small_cfg();
  cfg.learning_rate = 0.05;
  cfg.batch_size = 5;
  cfg.mini_batch_size = 1;
  cfg.ppo_epochs = 5;
  cfg.target_kl = 1e-9;
  const auto stats = ppo_update(policy, adam, batch, cfg, 23);
  CHECK(stats.early_stopped);
  CHECK(stats.minibatches == 5);
}

TEST_CASE("trainer preconditions") {
  Seq2SeqModel bare(tiny(), 1);
  CHECK(testutil::error_code([&] { PPOTrainer(bare, small_cfg(), prompts(), constant_reward(0), 1); }) ==
        "missing_adapter");
  Seq2SeqModel p = policy_model(2);
  CHECK(testutil::error_code([&] { PPOTrainer(p, small_cfg(), {}, constant_reward(0), 1); }) == "empty_dataset");
  p.set_frozen("embedding", false);
  CHECK(testutil::error_code([&] { PPOTrainer(p, small_cfg(), prompts(), constant_reward(0), 1); }) ==
        "base_unfrozen");
}

TEST_CASE("constant reward: flat curve, no divergence, frozen base") {
  Seq2SeqModel policy = policy_model(24);
  const auto base = tensor_map_hash(policy.parameters());
  PPOConfig cfg = small_cfg();
  cfg.total_steps = 50;
  cfg.ppo_epochs = 1;
  cfg.max_new_tokens = 4;
  PPOTrainer trainer(policy, cfg, prompts(), constant_reward(0.6), 25);
  const auto h = trainer.run({});
  REQUIRE(h.size() == 50);
  for (const auto& s : h) {
    CHECK(s.mean_reward == doctest::Approx(0.6));
    CHECK(std::isfinite(s.kl));
    CHECK(std::isfinite(s.surrogate_loss));
    CHECK(s.skipped == 0);
  }
  CHECK(h.front().kl == 0.0);
  CHECK(h.front().beta == cfg.init_kl_coeff);
  CHECK(tensor_map_hash(policy.parameters()) == base);
  CHECK(tensor_map_hash(trainer.reference().parameters()) == base);
  CHECK(trainer.beta() > 0.0);
  CHECK(trainer.beta() < cfg.init_kl_coeff);  // observed KL stays far below the target of 5
}

TEST_CASE("trainer run writes metrics and policy checkpoints deterministically") {
  auto run_once = [](const std::filesystem::path& root) {
    Seq2SeqModel policy = policy_model(26);
    PPOTrainer trainer(policy, small_cfg(), prompts(), constant_reward(0.3), 27);
    auto h = trainer.run({root, root / "phase3.csv"});
    return std::make_pair(h, trainer.policy_checkpoint());
  };
  const auto a = testutil::temp_dir("ppo-a");
  const auto b = testutil::temp_dir("ppo-b");
  const auto [ha, ca] = run_once(a);
  const auto [hb, cb] = run_once(b);
  CHECK(encode_checkpoint(ca) == encode_checkpoint(cb));
  for (std::size_t i = 0; i < ha.size(); ++i) CHECK(ha[i].kl == hb[i].kl);

  CHECK(std::filesystem::exists(a / "phase3" / "batch-000002.ckpt"));
  CHECK(!std::filesystem::exists(a / "phase3" / "batch-000001.ckpt"));
  const Checkpoint fin = load_checkpoint_file(a / "phase3" / "final.ckpt");
  CHECK(fin.kind == "ppo-policy");
  CHECK(fin.meta["batch"] == 3);

  // The policy file carries both the base and the adapter.
  Seq2SeqModel restored = Seq2SeqModel::from_checkpoint(fin);
  auto adapter = nn::adapter_from_checkpoint(fin, restored);
  restored.freeze_all();
  restored.set_adapter(adapter);
  Seq2SeqModel original = policy_model(26);
  original.set_adapter(nn::adapter_from_checkpoint(ca, original));
  const std::vector<int> src{104, 105, kEosId}, tgt{106, kEosId};
  CHECK(restored.forward(src, tgt).values() == original.forward(src, tgt).values());

  std::ifstream csv(a / "phase3.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "batch,mean_reward,pc_mean,aq_mean,tox_mean,kl,beta,surrogate_loss");
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 3);
}
