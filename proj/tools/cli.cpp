#include "cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "coarl/bm25.hpp"
#include "coarl/config.hpp"
#include "coarl/dataset.hpp"
#include "coarl/error.hpp"
#include "coarl/instructions.hpp"
#include "coarl/pipeline.hpp"
#include "coarl/reward.hpp"
#include "coarl/tokenizer.hpp"

namespace coarl::cli {
namespace {

namespace fs = std::filesystem;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out_dir) {
  cmd->add_option("--config", c.config, "Run configuration (JSON)");
  cmd->add_option("--seed", c.seed, "Override the run seed");
  auto* out = cmd->add_option("--out-dir", c.out_dir, "Run directory to create");
  if (needs_out_dir) out->required();
  cmd->add_flag("--force", c.force, "Clear a non-empty run directory");
}

RunConfig load_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("missing_file", "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int validate_data(const std::string& path, const std::string& kind, std::ostream& out) {
  std::size_t records = 0;
  std::vector<data::ValidationIssue> issues;
  if (kind == "counterspeech") {
    auto r = data::load_cs_jsonl(path);
    records = r.records.size();
    issues = std::move(r.issues);
  } else {
    auto r = data::load_explanation_jsonl(path);
    records = r.records.size();
    issues = std::move(r.issues);
  }
  for (const auto& issue : issues) out << "line " << issue.line << ": " << issue.message << '\n';
  out << records << " records, " << issues.size() << " errors\n";
  return issues.empty() ? 0 : 1;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Intent-conditioned counterspeech: training, generation and evaluation", "coarl"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  // phase1-train
  Common p1;
  auto* phase1 = app.add_subcommand("phase1-train", "Multi-task instruction tuning of the base model");
  add_common(phase1, p1, true);

  // phase2-train
  Common p2;
  std::string p2_ckpt;
  auto* phase2 = app.add_subcommand("phase2-train", "Adapter fine-tuning on intent-conditioned counterspeech");
  add_common(phase2, p2, true);
  phase2->add_option("--checkpoint", p2_ckpt, "Phase-1 model checkpoint")->required();

  // phase3-ppo
  Common p3;
  std::string p3_ckpt, p3_adapter;
  auto* phase3 = app.add_subcommand("phase3-ppo", "Policy optimization of the adapter against the reward");
  add_common(phase3, p3, true);
  phase3->add_option("--checkpoint", p3_ckpt, "Phase-1 model checkpoint")->required();
  phase3->add_option("--adapter", p3_adapter, "Phase-2 adapter checkpoint")->required();

  // generate
  Common g;
  std::string g_ckpt, g_adapter, g_hs, g_intent;
  auto* generate = app.add_subcommand("generate", "Decode counterspeech with a trained model");
  add_common(generate, g, false);
  generate->add_option("--checkpoint", g_ckpt, "Model or policy checkpoint")->required();
  generate->add_option("--adapter", g_adapter, "Adapter checkpoint");
  generate->add_option("--hs", g_hs, "Decode a single statement and print the result");
  generate->add_option("--intent", g_intent, "Intent for --hs (INF, POS, QUE, DEN)");

  // evaluate
  Common e;
  std::string e_gens, e_ckpt, e_adapter;
  auto* evaluate = app.add_subcommand("evaluate", "Score generations against the reference test set");
  add_common(evaluate, e, false);
  evaluate->add_option("--generations", e_gens, "Generations JSONL {id, intent, generated}")->required();
  evaluate->add_option("--checkpoint", e_ckpt, "Model whose embeddings back CosineSim");
  evaluate->add_option("--adapter", e_adapter, "Adapter for --checkpoint");

  // reward-score
  Common rs;
  std::string rs_input, rs_output, rs_lexicon;
  auto* reward_score = app.add_subcommand("reward-score", "Score JSONL {x, y} pairs with the composite reward");
  reward_score->add_option("--config", rs.config, "Run configuration (JSON)");
  reward_score->add_option("--input", rs_input, "JSONL input with fields x and y")->required();
  reward_score->add_option("--output", rs_output, "Write JSONL here instead of stdout");
  reward_score->add_option("--lexicon", rs_lexicon, "Toxicity lexicon, overrides the config");

  // validate-data
  std::string vd_path, vd_kind = "counterspeech";
  auto* validate = app.add_subcommand("validate-data", "Check a dataset file line by line");
  validate->add_option("path", vd_path, "JSONL file")->required();
  validate->add_option("--kind", vd_kind, "counterspeech or explanations")
      ->check(CLI::IsMember({"counterspeech", "explanations"}));

  // render-prompt
  std::string rp_task, rp_hs, rp_intent, rp_templates, rp_corpus, rp_preamble;
  std::size_t rp_fewshot = 0;
  auto* render = app.add_subcommand("render-prompt", "Print an instruction or few-shot prompt");
  render->add_option("--task", rp_task, "Template I1..I8");
  render->add_option("--hs", rp_hs, "Hate speech statement")->required();
  render->add_option("--intent", rp_intent, "Intent (required for I8 and few-shot prompts)");
  render->add_option("--templates", rp_templates, "Template file overriding the built-ins");
  render->add_option("--fewshot", rp_fewshot, "Number of BM25-selected exemplars for a few-shot prompt");
  render->add_option("--corpus", rp_corpus, "Counterspeech JSONL supplying exemplars (train split)");
  render->add_option("--preamble", rp_preamble, "Preamble text file for few-shot prompts");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& ex) {
    std::string msg = ex.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: usage: " << msg << '\n';
    return 2;
  }

  auto parse_intent_opt = [](const std::string& s) -> std::optional<data::Intent> {
    if (s.empty()) return std::nullopt;
    auto i = data::parse_intent(s);
    if (!i) throw Error("unknown_intent", "unknown intent '" + s + "'");
    return i;
  };

  try {
    if (*phase1) {
      const RunConfig cfg = load_config(p1);
      const auto dir = pipeline::prepare_run_dir(p1.out_dir, cfg, p1.force);
      out << pipeline::run_phase1(cfg, dir).string() << '\n';
    } else if (*phase2) {
      const RunConfig cfg = load_config(p2);
      if (!fs::exists(p2_ckpt)) throw Error("missing_file", "phase-1 checkpoint not found: " + p2_ckpt);
      const auto dir = pipeline::prepare_run_dir(p2.out_dir, cfg, p2.force);
      out << pipeline::run_phase2(cfg, dir, p2_ckpt).string() << '\n';
    } else if (*phase3) {
      const RunConfig cfg = load_config(p3);
      if (!fs::exists(p3_ckpt)) throw Error("missing_file", "base checkpoint not found: " + p3_ckpt);
      if (!fs::exists(p3_adapter)) throw Error("missing_file", "adapter checkpoint not found: " + p3_adapter);
      const auto dir = pipeline::prepare_run_dir(p3.out_dir, cfg, p3.force);
      out << pipeline::run_phase3(cfg, dir, p3_ckpt, p3_adapter).string() << '\n';
    } else if (*generate) {
      const RunConfig cfg = load_config(g);
      const nn::Seq2SeqModel model =
          pipeline::load_model(g_ckpt, g_adapter.empty() ? std::nullopt : std::optional<fs::path>(g_adapter));
      if (!g_hs.empty()) {
        const auto intent = parse_intent_opt(g_intent);
        if (!intent) throw Error("missing_intent", "--hs needs --intent");
        const std::string prompt =
            data::render_instruction(data::TaskId::kI8, g_hs, intent, pipeline::load_templates(cfg));
        const std::size_t max_src = std::min(cfg.eval.max_input_tokens, model.config().max_seq_len);
        const auto src = data::encode_with_eos(prompt, max_src).ids;
        out << data::detokenize(nn::generate(model, src, cfg.sampling)) << '\n';
      } else {
        if (g.out_dir.empty()) throw Error("invalid_argument", "generate needs --out-dir or --hs");
        const auto dir = pipeline::prepare_run_dir(g.out_dir, cfg, g.force);
        out << pipeline::run_generate(cfg, dir, model).string() << '\n';
      }
    } else if (*evaluate) {
      const RunConfig cfg = load_config(e);
      std::optional<nn::Seq2SeqModel> model;
      if (!e_ckpt.empty()) {
        model.emplace(pipeline::load_model(e_ckpt, e_adapter.empty() ? std::nullopt : std::optional<fs::path>(e_adapter)));
      }
      std::optional<pipeline::RunDir> dir;
      if (!e.out_dir.empty()) dir = pipeline::prepare_run_dir(e.out_dir, cfg, e.force);
      const auto report = pipeline::run_evaluate(cfg, e_gens, model ? &*model : nullptr, dir);
      out << eval::render_table(report);
    } else if (*reward_score) {
      RunConfig cfg = load_config(rs);
      if (!rs_lexicon.empty()) cfg.reward.lexicon = rs_lexicon;
      const reward::CompositeReward composite = reward::make_composite(cfg.reward);
      std::ifstream in(rs_input);
      if (!in) throw Error("missing_file", "cannot read " + rs_input);
      std::ofstream file;
      if (!rs_output.empty()) {
        file.open(rs_output, std::ios::trunc);
        if (!file) throw Error("io_error", "cannot write " + rs_output);
      }
      std::ostream& sink = rs_output.empty() ? out : file;
      std::string line;
      std::size_t lineno = 0;
      while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        const nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("x") || !j.contains("y") || !j["x"].is_string() ||
            !j["y"].is_string()) {
          throw Error("malformed_json", fmt::format("{}:{}: expected {{\"x\": string, \"y\": string}}", rs_input, lineno));
        }
        sink << reward::to_json(composite(j["x"].get<std::string>(), j["y"].get<std::string>())).dump() << '\n';
      }
    } else if (*validate) {
      return validate_data(vd_path, vd_kind, out);
    } else if (*render) {
      const data::TemplateSet templates =
          rp_templates.empty() ? data::default_templates() : data::TemplateSet::from_file(rp_templates);
      const auto intent = parse_intent_opt(rp_intent);
      if (rp_fewshot > 0 || !rp_corpus.empty()) {
        if (!intent) throw Error("missing_intent", "few-shot prompts need --intent");
        std::vector<data::CSRecord> exemplars;
        if (rp_fewshot > 0) {
          if (rp_corpus.empty()) throw Error("invalid_argument", "--fewshot needs --corpus");
          auto loaded = data::load_cs_jsonl(rp_corpus);
          if (!loaded.ok()) throw Error("invalid_dataset", rp_corpus + " has validation errors");
          exemplars = data::bm25_select_exemplars(rp_hs, data::filter_split(loaded.records, data::Split::kTrain),
                                                  rp_fewshot);
        }
        const std::string preamble =
            rp_preamble.empty() ? std::string(data::default_preamble()) : read_file(rp_preamble);
        out << data::build_fewshot_prompt(rp_hs, *intent, exemplars, preamble) << '\n';
      } else {
        if (rp_task.empty()) throw Error("invalid_argument", "render-prompt needs --task or --fewshot");
        const auto task = data::parse_task(rp_task);
        if (!task) throw Error("unknown_task", "unknown task '" + rp_task + "' (expected I1..I8)");
        out << data::render_instruction(*task, rp_hs, intent, templates) << '\n';
      }
    }
  } catch (const Error& ex) {
    std::string msg = ex.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << ex.code() << ": " << msg << '\n';
    return 1;
  } catch (const std::exception& ex) {
    std::string msg = ex.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: internal: " << msg << '\n';
    return 1;
  }
  return 0;
}

}  // namespace coarl::cli
