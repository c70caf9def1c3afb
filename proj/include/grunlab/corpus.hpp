#pragma once

#include <optional>
#include <string>
#include <vector>

#include "grunlab/common.hpp"

namespace grunlab {

enum class Split { kTarget, kRetain, kNeverSeen, kWorld };

std::string split_name(Split s);
Split split_from_name(const std::string& name);

struct QaRecord {
  std::string id;
  std::string question;
  std::string answer;
  Split split = Split::kRetain;
  int entity_id = -1;  // -1 for world facts
  std::string extra_json;  // unknown JSONL fields, preserved verbatim

  // ŷ for the gate: 1 on target data, 0 elsewhere.
  int gate_label() const { return split == Split::kTarget ? 1 : 0; }
};

struct Corpus {
  std::vector<QaRecord> records;
  uint64_t seed = 0;
  int template_version = 1;

  std::vector<const QaRecord*> by_split(Split s) const;
  std::vector<int> entity_ids() const;  // distinct, ascending, excluding world
  size_t size() const { return records.size(); }
};

// Deterministic synthetic biography Q&A. Entities are fictitious authors;
// every answer contains the entity's author name. World facts come from a
// fixed built-in list.
Corpus generate_corpus(uint64_t seed, size_t n_entities, size_t qa_per_entity,
                       size_t n_world);

// Entity-level split assignment: all of an author's records share one
// split, world records keep split "world". Deterministic under seed.
void split_corpus(Corpus& corpus, double target_fraction,
                  double never_seen_fraction, uint64_t seed);

// Disjoint per-request target entity sets for sequential unlearning, drawn
// from entities currently labeled retain.
std::vector<std::vector<int>> assign_request_targets(const Corpus& corpus,
                                                     size_t n_requests,
                                                     double fraction_each,
                                                     uint64_t seed);

struct MixedPrompt {
  std::string text;
  std::string normal_id;
  std::string target_id;
  bool self_mix = false;
};

// "<normal question> And <target question with its first letter lowered>".
// The scored reference stays the normal record's answer.
MixedPrompt mix_prompts(const QaRecord& normal, const QaRecord& target);

struct Paraphrase {
  std::string text;
  bool recognized = false;  // false: template family unknown, passthrough
};

// Deterministic rule-table paraphrase of a template-family question.
Paraphrase paraphrase_question(const std::string& question, uint64_t seed);

// JSONL persistence. One object per line:
// {"id","question","answer","split","entity_id"} plus preserved extras.
void write_jsonl(const Corpus& corpus, const std::string& path);
Corpus read_jsonl(const std::string& path);

// All corpus text plus refusal templates and paraphrase variants; feeds the
// tokenizer so attack prompts stay in-vocabulary.
std::vector<std::string> tokenizer_texts(const Corpus& corpus);

const std::vector<std::string>& refusal_templates();

}  // namespace grunlab
