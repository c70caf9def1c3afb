#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "grunlab/model.hpp"

namespace grunlab {

// ---------------------------------------------------------------------------
// ROUGE-L recall

// Word tokens for scoring: lowercased, punctuation dropped.
std::vector<std::string> rouge_tokens(const std::string& text);

size_t lcs_length(const std::vector<std::string>& a,
                  const std::vector<std::string>& b);

// LCS(reference, hypothesis) / |reference| on normalized word tokens.
double rouge_l_recall(const std::string& reference,
                      const std::string& hypothesis);

// ---------------------------------------------------------------------------
// embedding diagnostics

struct EmbeddingSet {
  std::string class_label;  // target / retain / never_seen / mixed
  std::string model_tag;    // before / after unlearning
  std::vector<std::vector<double>> vectors;
};

// Class-wise separability: mean intra-class pairwise distance over the
// centroid distance. Coinciding centroids return +infinity.
double csd(const EmbeddingSet& a, const EmbeddingSet& b);

struct Pca2d {
  std::vector<double> component1, component2;  // orthonormal d-vectors
  std::vector<std::array<double, 2>> projections;
  double explained1 = 0.0, explained2 = 0.0;  // fractions of total variance
};

// Top-2 principal components by power iteration with deflation
// (tol 1e-8, max 1000 iterations). Sign fixed so the first coordinate of
// magnitude above 1e-12 is positive.
Pca2d pca_2d(const std::vector<std::vector<double>>& vectors);

// ---------------------------------------------------------------------------
// model-side metrics

enum class EmbedStage { kPreIntervention, kPostIntervention };

// Hidden state of the final prompt token at `layer`, taken before or after
// the hook's replacement. Post-intervention extraction requires a hook at
// that layer.
template <class S>
EmbeddingSet extract_embeddings(const Model<S>& model,
                                const GrunStack<S>* stack,
                                const std::vector<std::vector<int>>& prompts,
                                size_t layer, EmbedStage stage,
                                const std::string& class_label = "",
                                const std::string& model_tag = "") {
  if (layer < 1 || layer > model.config().n_layers)
    throw std::invalid_argument("extract_embeddings: layer " +
                                std::to_string(layer) + " out of range");
  const bool hooked =
      stack != nullptr && !stack->empty() && stack->has_layer(layer);
  if (stage == EmbedStage::kPostIntervention && !hooked)
    throw std::invalid_argument(
        "extract_embeddings: post-intervention stage requires a hook at "
        "layer " +
        std::to_string(layer));
  NoGradGuard ng;
  EmbeddingSet set;
  set.class_label = class_label;
  set.model_tag = model_tag;
  for (const auto& prompt : prompts) {
    if (prompt.empty())
      throw std::invalid_argument("extract_embeddings: empty prompt");
    HookSpec<S> spec;
    const HookSpec<S>* hooks = nullptr;
    if (stack != nullptr && !stack->empty()) {
      spec.stack = stack;
      spec.position = prompt.size() - 1;
      hooks = &spec;
    }
    ForwardResult<S> fwd = model.forward(prompt, hooks);
    std::vector<S> row;
    if (hooked && stage == EmbedStage::kPreIntervention) {
      row = fwd.hook_pre.at(layer).value();
    } else if (hooked && stage == EmbedStage::kPostIntervention) {
      row = fwd.hook_post.at(layer).value();
    } else {
      row = fwd.state_row(layer, prompt.size() - 1).value();
    }
    std::vector<double> v(row.size());
    for (size_t i = 0; i < row.size(); ++i) v[i] = static_cast<double>(row[i]);
    set.vectors.push_back(std::move(v));
  }
  return set;
}

// Geometric-mean per-token probability of the answer, exp(-mean NLL).
template <class S>
double normalized_probability(const Model<S>& model,
                              const HookSpec<S>* hooks,
                              const std::vector<int>& prompt,
                              const std::vector<int>& answer) {
  return std::exp(-static_cast<double>(sequence_nll(model, prompt, answer,
                                                    hooks)));
}

// ---------------------------------------------------------------------------
// gate report

struct GateReportRow {
  size_t request = 0;
  size_t layer = 0;
  double target_mean = 0.0;  // expected near 1 after training with L_G
  double retain_mean = 0.0;  // expected near 0
};

template <class S>
std::vector<GateReportRow> gate_report(
    const GrunStack<S>& stack, const Model<S>& model,
    const std::vector<std::vector<int>>& target_prompts,
    const std::vector<std::vector<int>>& retain_prompts) {
  if (stack.empty())
    throw std::invalid_argument("gate_report: empty stack");
  NoGradGuard ng;
  std::map<std::pair<size_t, size_t>, std::pair<double, size_t>> t_acc, r_acc;
  auto run = [&](const std::vector<std::vector<int>>& prompts, bool is_target) {
    for (const auto& prompt : prompts) {
      HookSpec<S> spec;
      spec.stack = &stack;
      spec.position = prompt.size() - 1;
      ForwardResult<S> fwd = model.forward(prompt, &spec);
      for (const auto& g : fwd.gates) {
        auto key = std::make_pair(g.request, g.layer);
        auto& acc = is_target ? t_acc[key] : r_acc[key];
        acc.first += static_cast<double>(g.value.item());
        acc.second += 1;
      }
    }
  };
  run(target_prompts, true);
  run(retain_prompts, false);
  std::vector<GateReportRow> rows;
  for (const auto& [key, acc] : t_acc) {
    GateReportRow row;
    row.request = key.first;
    row.layer = key.second;
    row.target_mean = acc.first / double(acc.second);
    const auto& r = r_acc[key];
    row.retain_mean = r.second ? r.first / double(r.second) : 0.0;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace grunlab
