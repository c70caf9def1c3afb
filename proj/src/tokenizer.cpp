#include "grunlab/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "grunlab/common.hpp"

namespace grunlab {

namespace {

bool is_word_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '\'';
}

bool is_closing_punct(const std::string& w) {
  return w == "." || w == "," || w == "?" || w == "!" || w == ";" ||
         w == ":";
}

}  // namespace

std::vector<std::string> Tokenizer::split_words(const std::string& text) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
    } else if (is_word_char(c)) {
      size_t j = i;
      while (j < text.size() && is_word_char(text[j])) ++j;
      out.push_back(text.substr(i, j - i));
      i = j;
    } else {
      out.push_back(std::string(1, c));
      ++i;
    }
  }
  return out;
}

Tokenizer Tokenizer::build(const std::vector<std::string>& texts) {
  std::set<std::string> vocab;
  for (const auto& t : texts)
    for (auto& w : split_words(t)) vocab.insert(w);

  Tokenizer tok;
  tok.id_to_word_ = {"<pad>", "<unk>", "<eot>", "<q>", "<a>"};
  for (const auto& w : vocab) tok.id_to_word_.push_back(w);
  for (size_t i = 0; i < tok.id_to_word_.size(); ++i)
    tok.word_to_id_[tok.id_to_word_[i]] = static_cast<int>(i);
  return tok;
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
  std::vector<int> ids;
  for (auto& w : split_words(text)) {
    auto it = word_to_id_.find(w);
    ids.push_back(it == word_to_id_.end() ? kUnk : it->second);
  }
  return ids;
}

std::vector<int> Tokenizer::prompt_ids(const std::string& question) const {
  std::vector<int> ids{kQuestion};
  for (int id : encode(question)) ids.push_back(id);
  ids.push_back(kAnswer);
  return ids;
}

std::vector<int> Tokenizer::answer_ids(const std::string& answer) const {
  std::vector<int> ids = encode(answer);
  ids.push_back(kEot);
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || static_cast<size_t>(id) >= id_to_word_.size()) continue;
    if (id == kPad || id == kEot || id == kQuestion || id == kAnswer) continue;
    const std::string& w = id_to_word_[id];
    if (!out.empty() && !is_closing_punct(w)) out += ' ';
    out += w;
  }
  return out;
}

uint64_t Tokenizer::vocab_hash() const {
  std::string joined;
  for (const auto& w : id_to_word_) {
    joined += w;
    joined += '\n';
  }
  return fnv1a64(joined);
}

}  // namespace grunlab
