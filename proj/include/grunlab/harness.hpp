#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "grunlab/analysis.hpp"
#include "grunlab/checkpoint.hpp"
#include "grunlab/corpus.hpp"
#include "grunlab/losses.hpp"
#include "grunlab/model.hpp"
#include "grunlab/tokenizer.hpp"

namespace grunlab {

struct CorpusParams {
  size_t n_entities = 20;
  size_t qa_per_entity = 5;
  size_t n_world = 20;
  double target_fraction = 0.10;
  double never_seen_fraction = 0.10;
};

struct BaseTrainParams {
  size_t epochs = 300;
  double learning_rate = 1e-3;
  size_t batch_size = 8;
  double stop_nll = 0.02;  // early exit once the epoch mean NLL drops below
};

struct InterventionParams {
  size_t rank = 4;
  GateKind gate = GateKind::kLinear;
  size_t gate_hidden = 16;
  std::vector<size_t> layers;  // empty: placement policy default
};

struct EvalParams {
  size_t max_new_tokens = 24;
  bool pca = true;
  bool csd = true;
  bool mix = true;
  bool gates = true;
  size_t embed_layer = 0;  // 0: last layer
  size_t mix_samples = 20;
};

struct SequentialParams {
  size_t requests = 3;
  double fraction_each = 0.05;
  double target_rouge_max = 0.15;  // unlearning threshold for the c search
};

struct ExperimentConfig {
  uint64_t seed = 0;
  CorpusParams corpus;
  ModelConfig model;  // vocab_size is derived from the corpus at runtime
  BaseTrainParams base_train;
  UnlearnConfig unlearn;
  InterventionParams intervention;
  EvalParams eval;
  std::vector<std::string> attacks;  // "quantize" and/or "paraphrase"
  SequentialParams sequential;

  static ExperimentConfig from_json_file(const std::string& path);
  static ExperimentConfig from_json_text(const std::string& text);
  std::string to_json_text() const;  // full echo, fixed key order
  std::string config_hash() const;
};

// ---------------------------------------------------------------------------
// data preparation

Tokenizer make_tokenizer(const Corpus& corpus);

TokenExample make_example(const Tokenizer& tok, const QaRecord& rec,
                          size_t index);

// Examples of one split, indexed by their stable order within it.
std::vector<TokenExample> examples_for(const Corpus& corpus,
                                       const Tokenizer& tok, Split split);

std::vector<std::vector<int>> idk_template_ids(const Tokenizer& tok);

// ---------------------------------------------------------------------------
// base training

struct BaseTrainResult {
  std::vector<double> epoch_nll;
  size_t epochs_run = 0;
};

BaseTrainResult train_base_model(const Model<float>& model,
                                 std::vector<TokenExample> train_set,
                                 const BaseTrainParams& params, uint64_t seed);

Model<float> clone_model(const Model<float>& model);

// ---------------------------------------------------------------------------
// evaluation

struct SplitMetrics {
  double rouge = 0.0;
  double prob = 0.0;
  size_t count = 0;
};

struct MetricReport {
  std::map<std::string, SplitMetrics> splits;  // target/retain/world[/...]
  double utility_rouge = 0.0;  // mean of retain and world rouge
  std::string config_hash;
  uint64_t seed = 0;
};

MetricReport evaluate_model(const Model<float>& model,
                            const GrunStack<float>* stack,
                            const Corpus& corpus, const Tokenizer& tok,
                            const EvalParams& eval);

// ROUGE-L recall of greedy generations against reference answers, meaned
// over the given records.
double mean_generation_rouge(const Model<float>& model,
                             const GrunStack<float>* stack,
                             const Tokenizer& tok,
                             const std::vector<const QaRecord*>& records,
                             size_t max_new_tokens);

// ---------------------------------------------------------------------------
// analyses

struct MixProbeResult {
  double unmixed_rouge = 0.0;
  double mixed_rouge = 0.0;
  double drop = 0.0;
  size_t samples = 0;
};

MixProbeResult mix_probe(const Model<float>& model,
                         const GrunStack<float>* stack, const Corpus& corpus,
                         const Tokenizer& tok, const EvalParams& eval,
                         uint64_t seed);

struct PcaCsvRow {
  double x = 0.0, y = 0.0;
  std::string cls;
  std::string stage;  // "before" | "after"
};

struct AnalysisOutputs {
  double csd_before = 0.0;
  double csd_after = 0.0;
  std::optional<MixProbeResult> mix;
  std::vector<GateReportRow> gate_rows;
  std::vector<PcaCsvRow> pca_rows;
};

// Embedding-space diagnostics at the configured layer: CSD and PCA on
// target/retain/never-seen states before (bare model) and after (stack
// applied) unlearning, plus the mixed-prompt probe and gate report.
AnalysisOutputs run_analyses(const Model<float>& model,
                             const GrunStack<float>* stack,
                             const Corpus& corpus, const Tokenizer& tok,
                             const EvalParams& eval, uint64_t seed);

// ---------------------------------------------------------------------------
// attacks

// Per-tensor symmetric int8 round trip: scale = max|w|/127,
// q = clamp(round(w/scale)), w' = q*scale. All-zero tensors pass through.
void quantize_values_inplace(std::vector<float>& values);
Model<float> quantize_roundtrip(const Model<float>& model);
GrunStack<float> quantize_roundtrip(const GrunStack<float>& stack);

// ---------------------------------------------------------------------------
// experiment pipeline

struct StageTiming {
  std::string stage;
  double seconds = 0.0;
};

struct ExperimentResult {
  std::string config_echo;
  MetricReport clean;
  MetricReport post_unlearn;
  std::map<std::string, MetricReport> post_attack;  // keyed by attack name
  AnalysisOutputs analyses;
  TrainLog unlearn_log;
  BaseTrainResult base_train;
  uint64_t base_hash_clean = 0;
  uint64_t base_hash_post = 0;
  std::vector<StageTiming> timings;
};

// Full pipeline: corpus -> base training -> clean metrics -> unlearning ->
// metrics -> analyses -> attacks -> artifact emission. Throws StageError
// after writing a FAILED marker naming the stage.
ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                const std::string& out_dir);

struct SequentialStep {
  size_t request = 0;               // 1-based count of processed requests
  double coeff = 1.0;               // chosen c (GRUN series)
  std::vector<double> target_rouge;  // per prior request, after this step
  double retain_rouge = 0.0;
  double retain_prob = 0.0;
};

struct SequentialResult {
  std::vector<SequentialStep> grun_series;
  std::vector<SequentialStep> vanilla_series;
};

// Sequential unlearning: M isolated GRUN requests composed with a tuned
// coefficient, against an incremental vanilla fine-tuning baseline.
SequentialResult run_sequential(const ExperimentConfig& cfg,
                                const std::string& out_dir);

// ---------------------------------------------------------------------------
// artifact emission

// Writes manifest.json listing every artifact with its content hash.
// Timing files are flagged volatile and excluded from determinism audits.
void emit_manifest(const std::string& out_dir);

std::string metric_report_json(const MetricReport& report);

// JSON-lines training log per the external interface.
void write_training_log(const TrainLog& log, const std::string& path);

}  // namespace grunlab
