#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace grunlab {

// Word-level tokenizer over the synthetic corpus. Words are runs of
// letters/digits/apostrophes, punctuation marks are single tokens, and the
// vocabulary is the sorted set of surface forms seen at build time.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kEot = 2;
  static constexpr int kQuestion = 3;  // prompt opener
  static constexpr int kAnswer = 4;    // prompt/answer separator

  static Tokenizer build(const std::vector<std::string>& texts);

  // Splits text into word/punctuation surface tokens.
  static std::vector<std::string> split_words(const std::string& text);

  size_t vocab_size() const { return id_to_word_.size(); }

  // Plain word ids, unknown words map to kUnk.
  std::vector<int> encode(const std::string& text) const;

  // <q> question-words <a>  — the trailing <a> is the hook position.
  std::vector<int> prompt_ids(const std::string& question) const;

  // answer-words <eot>
  std::vector<int> answer_ids(const std::string& answer) const;

  // Joins word tokens back into text; no space before closing punctuation.
  std::string decode(const std::vector<int>& ids) const;

  const std::string& word(int id) const { return id_to_word_[id]; }
  uint64_t vocab_hash() const;

 private:
  std::vector<std::string> id_to_word_;
  std::unordered_map<std::string, int> word_to_id_;
};

}  // namespace grunlab
