#pragma once

#include <string>
#include <vector>

#include "uvlm/common.hpp"
#include "uvlm/conversation.hpp"

namespace uvlm::testing {

// Random grammar-word conversations for templating property tests.
inline Conversation random_conversation(Rng& rng) {
  static const std::vector<std::string> kWords = {
      "red",  "green",  "blue",   "square", "circle", "triangle", "left", "right",
      "up",   "down",   "image",  "video",  "color",  "shape",    "move", "moves",
      "what", "which",  "is",     "the",    "a",      "there",    "in",   "yes",
      "no",   "one",    "two",    "three",  "many",   "how"};
  auto words = [&rng](int lo, int hi) {
    int n = lo + int(rng.below(uint32_t(hi - lo + 1)));
    std::string out;
    for (int i = 0; i < n; ++i) {
      if (i) out.push_back(' ');
      out += kWords[rng.below(uint32_t(kWords.size()))];
    }
    return out;
  };
  Conversation conv;
  int n_rounds = 1 + int(rng.below(4));
  for (int r = 0; r < n_rounds; ++r) conv.rounds.push_back({words(2, 6), words(1, 4)});
  return conv;
}

}  // namespace uvlm::testing
