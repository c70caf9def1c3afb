// grunlab: config-driven toy-scale gated representation unlearning lab.
//
// Subcommands map one-to-one onto pipeline stages and write their artifacts
// under --out; `run` chains the whole pipeline in one process.

#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "grunlab/harness.hpp"

namespace {

using namespace grunlab;

struct CliContext {
  std::string config_path;
  std::string out_dir;
  std::optional<uint64_t> seed_override;

  ExperimentConfig load() const {
    ExperimentConfig cfg = ExperimentConfig::from_json_file(config_path);
    if (seed_override) cfg.seed = *seed_override;
    return cfg;
  }
};

struct LoadedState {
  Corpus corpus;
  Tokenizer tok;

  explicit LoadedState(const std::string& out_dir)
      : corpus(read_jsonl(out_dir + "/corpus.jsonl")),
        tok(make_tokenizer(corpus)) {}
};

void cmd_gen_data(const CliContext& ctx) {
  ExperimentConfig cfg = ctx.load();
  std::filesystem::create_directories(ctx.out_dir);
  Corpus corpus = generate_corpus(cfg.seed, cfg.corpus.n_entities,
                                  cfg.corpus.qa_per_entity,
                                  cfg.corpus.n_world);
  split_corpus(corpus, cfg.corpus.target_fraction,
               cfg.corpus.never_seen_fraction, cfg.seed);
  write_jsonl(corpus, ctx.out_dir + "/corpus.jsonl");
  std::cout << "wrote " << corpus.size() << " records to " << ctx.out_dir
            << "/corpus.jsonl\n";
}

void cmd_train_base(const CliContext& ctx) {
  ExperimentConfig cfg = ctx.load();
  LoadedState state(ctx.out_dir);
  ModelConfig model_cfg = cfg.model;
  model_cfg.vocab_size = state.tok.vocab_size();
  model_cfg.validate();
  Model<float> model(model_cfg, cfg.seed);
  std::vector<TokenExample> train_set;
  for (Split s : {Split::kTarget, Split::kRetain, Split::kWorld})
    for (const auto& ex : examples_for(state.corpus, state.tok, s))
      train_set.push_back(ex);
  BaseTrainResult r =
      train_base_model(model, std::move(train_set), cfg.base_train, cfg.seed);
  save_checkpoint(model, ctx.out_dir + "/base.ckpt");
  std::cout << "base training: " << r.epochs_run << " epochs, final nll "
            << (r.epoch_nll.empty() ? 0.0 : r.epoch_nll.back()) << "\n";
}

void cmd_unlearn(const CliContext& ctx) {
  ExperimentConfig cfg = ctx.load();
  LoadedState state(ctx.out_dir);
  LoadedCheckpoint base = load_checkpoint(ctx.out_dir + "/base.ckpt");
  std::vector<TokenExample> targets =
      examples_for(state.corpus, state.tok, Split::kTarget);
  std::vector<TokenExample> retains =
      examples_for(state.corpus, state.tok, Split::kRetain);
  UnlearnConfig ucfg = cfg.unlearn;
  ucfg.seed = cfg.seed;
  TrainLog log;
  GrunStack<float> stack;
  if (ucfg.mode == UnlearnMode::kVanilla) {
    log = train_unlearn<float>(base.model, nullptr, 0, targets, retains,
                               idk_template_ids(state.tok), ucfg);
  } else {
    Rng rng(cfg.seed ^ 0x6772756eull);
    const std::vector<size_t> layers = select_layers(
        base.model.config().n_layers, cfg.intervention.layers);
    stack.push_request(GrunStack<float>::make_request(
        layers, base.model.config().d_model, cfg.intervention.rank,
        cfg.intervention.gate, cfg.intervention.gate_hidden, rng));
    log = train_unlearn<float>(base.model, &stack, 0, targets, retains,
                               idk_template_ids(state.tok), ucfg);
  }
  write_training_log(log, ctx.out_dir + "/training_log.jsonl");
  save_checkpoint(base.model, stack, ctx.out_dir + "/unlearned.ckpt");
  std::cout << "unlearning: " << log.steps.size() << " steps"
            << (log.stopped_early ? " (stopped early)" : "") << "\n";
}

void cmd_eval(const CliContext& ctx, const std::string& stage) {
  ExperimentConfig cfg = ctx.load();
  LoadedState state(ctx.out_dir);
  const bool clean = stage == "clean";
  LoadedCheckpoint ckpt = load_checkpoint(
      ctx.out_dir + (clean ? "/base.ckpt" : "/unlearned.ckpt"));
  MetricReport report = evaluate_model(
      ckpt.model, ckpt.stack.empty() ? nullptr : &ckpt.stack, state.corpus,
      state.tok, cfg.eval);
  report.config_hash = cfg.config_hash();
  report.seed = cfg.seed;
  const std::string path = ctx.out_dir + (clean ? "/metrics_clean.json"
                                                : "/metrics_post_unlearn.json");
  write_text_file(path, metric_report_json(report));
  std::cout << metric_report_json(report) << "\n";
}

void cmd_analyze(const CliContext& ctx, const std::string& kind) {
  ExperimentConfig cfg = ctx.load();
  LoadedState state(ctx.out_dir);
  LoadedCheckpoint ckpt = load_checkpoint(ctx.out_dir + "/unlearned.ckpt");
  EvalParams eval = cfg.eval;
  eval.pca = kind == "pca";
  eval.csd = kind == "csd";
  eval.mix = kind == "mix";
  eval.gates = kind == "gates";
  AnalysisOutputs out =
      run_analyses(ckpt.model, ckpt.stack.empty() ? nullptr : &ckpt.stack,
                   state.corpus, state.tok, eval, cfg.seed);
  if (kind == "pca") {
    std::ostringstream csv;
    csv << "x,y,class,stage\n";
    for (const auto& r : out.pca_rows)
      csv << r.x << "," << r.y << "," << r.cls << "," << r.stage << "\n";
    write_text_file(ctx.out_dir + "/pca.csv", csv.str());
    std::cout << "wrote " << out.pca_rows.size() << " pca rows\n";
  } else if (kind == "csd") {
    std::cout << "csd before unlearning: " << out.csd_before
              << "\ncsd after unlearning:  " << out.csd_after << "\n";
  } else if (kind == "mix") {
    std::cout << "unmixed rouge: " << out.mix->unmixed_rouge
              << "\nmixed rouge:   " << out.mix->mixed_rouge
              << "\ndrop:          " << out.mix->drop << "\n";
  } else if (kind == "gates") {
    std::ostringstream csv;
    csv << "request,layer,target_mean,retain_mean\n";
    for (const auto& r : out.gate_rows)
      csv << r.request << "," << r.layer << "," << r.target_mean << ","
          << r.retain_mean << "\n";
    write_text_file(ctx.out_dir + "/gates.csv", csv.str());
    std::cout << csv.str();
  }
}

void cmd_attack(const CliContext& ctx, const std::string& kind) {
  ExperimentConfig cfg = ctx.load();
  LoadedState state(ctx.out_dir);
  LoadedCheckpoint ckpt = load_checkpoint(ctx.out_dir + "/unlearned.ckpt");
  const GrunStack<float>* stack =
      ckpt.stack.empty() ? nullptr : &ckpt.stack;
  MetricReport m;
  if (kind == "quantize") {
    Model<float> qmodel = quantize_roundtrip(ckpt.model);
    GrunStack<float> qstack;
    if (stack) qstack = quantize_roundtrip(*stack);
    m = evaluate_model(qmodel, stack ? &qstack : nullptr, state.corpus,
                       state.tok, cfg.eval);
  } else {
    Corpus para = state.corpus;
    for (auto& rec : para.records)
      if (rec.split == Split::kTarget)
        rec.question = paraphrase_question(rec.question, cfg.seed).text;
    m = evaluate_model(ckpt.model, stack, para, state.tok, cfg.eval);
  }
  m.config_hash = cfg.config_hash();
  m.seed = cfg.seed;
  write_text_file(ctx.out_dir + "/metrics_attack_" + kind + ".json",
                  metric_report_json(m));
  std::cout << metric_report_json(m) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"grunlab: toy-scale gated representation unlearning lab"};
  app.require_subcommand(1);

  CliContext ctx;
  std::string eval_stage = "post";
  std::string analyze_kind, attack_kind;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", ctx.config_path, "experiment config JSON")
        ->required();
    sub->add_option("--out", ctx.out_dir, "output directory")->required();
    uint64_t seed = 0;
    sub->add_option("--seed", seed, "override the config seed")
        ->each([&ctx](const std::string& s) {
          ctx.seed_override = std::stoull(s);
        });
  };

  add_common(app.add_subcommand("gen-data", "generate the synthetic corpus"));
  add_common(app.add_subcommand("train-base",
                                "fine-tune the base model on the corpus"));
  add_common(app.add_subcommand("unlearn", "run the configured unlearning"));
  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint");
  add_common(eval_cmd);
  eval_cmd->add_option("--stage", eval_stage, "clean | post")
      ->check(CLI::IsMember({"clean", "post"}));
  auto* analyze_cmd =
      app.add_subcommand("analyze", "embedding and gate diagnostics");
  add_common(analyze_cmd);
  analyze_cmd->add_option("kind", analyze_kind, "pca | csd | mix | gates")
      ->required()
      ->check(CLI::IsMember({"pca", "csd", "mix", "gates"}));
  add_common(app.add_subcommand("sequential",
                                "multi-request sequential unlearning"));
  auto* attack_cmd =
      app.add_subcommand("attack", "probe unlearning robustness");
  add_common(attack_cmd);
  attack_cmd->add_option("kind", attack_kind, "quantize | paraphrase")
      ->required()
      ->check(CLI::IsMember({"quantize", "paraphrase"}));
  add_common(app.add_subcommand("report", "write the artifact manifest"));
  add_common(app.add_subcommand("run", "full pipeline in one process"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand("gen-data")) {
      cmd_gen_data(ctx);
    } else if (app.got_subcommand("train-base")) {
      cmd_train_base(ctx);
    } else if (app.got_subcommand("unlearn")) {
      cmd_unlearn(ctx);
    } else if (app.got_subcommand("eval")) {
      cmd_eval(ctx, eval_stage);
    } else if (app.got_subcommand("analyze")) {
      cmd_analyze(ctx, analyze_kind);
    } else if (app.got_subcommand("sequential")) {
      run_sequential(ctx.load(), ctx.out_dir);
      std::cout << "sequential results in " << ctx.out_dir
                << "/sequential.json\n";
    } else if (app.got_subcommand("attack")) {
      cmd_attack(ctx, attack_kind);
    } else if (app.got_subcommand("report")) {
      emit_manifest(ctx.out_dir);
      std::cout << "wrote " << ctx.out_dir << "/manifest.json\n";
    } else if (app.got_subcommand("run")) {
      run_experiment(ctx.load(), ctx.out_dir);
      std::cout << "experiment results in " << ctx.out_dir << "/result.json\n";
    }
  } catch (const grunlab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
