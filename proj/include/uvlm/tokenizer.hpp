#pragma once

#include <cctype>
#include <string>
#include <unordered_map>
#include <vector>

#include "uvlm/common.hpp"

namespace uvlm {

// Word-level vocabulary over the glyph-world grammar. Ids are dense from 0,
// reserved ids first, grammar words next, and <unused-N> filler up to the
// configured size so the embedding table has a fixed width.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kVis = 3;
  static constexpr int kUser = 4;
  static constexpr int kAssistant = 5;
  static constexpr int kUnk = 6;

  explicit Vocabulary(int size = 256) {
    static const char* kReserved[] = {"<pad>", "<bos>", "</s>", "<VIS>", "USER:", "ASSISTANT:",
                                      "<unk>"};
    static const char* kWords[] = {
        "describe", "the",    "image",  "video",    "shows",  "a",      "an",     "and",
        "is",       "are",    "there",  "in",       "what",   "which",  "how",    "many",
        "color",    "shape",  "shapes", "direction", "does",  "it",     "move",   "moves",
        "moving",   "red",    "green",  "blue",     "yellow", "purple", "orange", "square",
        "circle",   "triangle", "left", "right",    "up",     "down",   "yes",    "no",
        "one",      "two",    "three",  "scene",    "contains", "of",   "this",   "that",
        "to"};
    for (const char* w : kReserved) add(w);
    for (const char* w : kWords) add(w);
    require(size >= int(tokens_.size()),
            "vocabulary size " + std::to_string(size) + " smaller than built-in token count " +
                std::to_string(tokens_.size()));
    while (int(tokens_.size()) < size) add("<unused-" + std::to_string(tokens_.size()) + ">");
  }

  int size() const { return int(tokens_.size()); }

  // Lowercases and strips every non-alphanumeric character; the grammar is
  // plain words, so punctuation never carries meaning.
  static std::string normalize_word(const std::string& w) {
    std::string out;
    for (char c : w)
      if (std::isalnum(static_cast<unsigned char>(c)))
        out.push_back(char(std::tolower(static_cast<unsigned char>(c))));
    return out;
  }

  int lookup(const std::string& word) const {
    auto it = id_of_.find(word);
    return it == id_of_.end() ? kUnk : it->second;
  }

  bool knows(const std::string& word) const { return id_of_.count(word) > 0; }

  // Splits on whitespace. Role markers, the visual placeholder, and the EOS
  // literal match before normalization; "</s>" glued to a word is peeled off.
  std::vector<int> tokenize(const std::string& text) const {
    std::vector<int> ids;
    size_t i = 0;
    while (i < text.size()) {
      while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
      if (i >= text.size()) break;
      size_t j = i;
      while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
      std::string word = text.substr(i, j - i);
      i = j;
      static const std::string kEosLit = "</s>";
      while (true) {
        bool glued_eos = word.size() > kEosLit.size() &&
                         word.compare(word.size() - kEosLit.size(), kEosLit.size(), kEosLit) == 0;
        std::string head = glued_eos ? word.substr(0, word.size() - kEosLit.size()) : word;
        push_word(ids, head);
        if (!glued_eos) break;
        word = kEosLit;
      }
    }
    return ids;
  }

  std::string token_string(int id) const {
    if (id < 0 || id >= size())
      throw InvalidArgument("token id " + std::to_string(id) + " out of range [0," +
                            std::to_string(size()) + ")");
    return tokens_[size_t(id)];
  }

  std::string detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (!out.empty()) out.push_back(' ');
      out += token_string(id);
    }
    return out;
  }

 private:
  void add(const std::string& tok) {
    id_of_[tok] = int(tokens_.size());
    tokens_.push_back(tok);
  }

  void push_word(std::vector<int>& ids, const std::string& word) const {
    if (word.empty()) return;
    auto it = id_of_.find(word);
    if (it != id_of_.end()) {
      ids.push_back(it->second);
      return;
    }
    std::string norm = normalize_word(word);
    if (norm.empty()) return;
    auto nit = id_of_.find(norm);
    ids.push_back(nit == id_of_.end() ? kUnk : nit->second);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> id_of_;
};

}  // namespace uvlm
