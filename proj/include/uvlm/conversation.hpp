#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uvlm/common.hpp"
#include "uvlm/tokenizer.hpp"

namespace uvlm {

struct Round {
  std::string question;
  std::string answer;
};

struct Conversation {
  std::vector<Round> rounds;

  int n_rounds() const { return int(rounds.size()); }

  void validate() const {
    require(!rounds.empty(), "conversation: at least one round required");
    for (const auto& r : rounds)
      require(!r.question.empty() && !r.answer.empty(),
              "conversation: empty question or answer text");
  }
};

// Tokenized supervision unit: mask is 1 exactly over answer tokens and the
// EOS that closes each answer.
struct TrainingExample {
  std::vector<int> ids;
  std::vector<uint8_t> mask;
  int visual_slot = -1;  // index of the VIS placeholder in ids, -1 when text-only
  std::string modality = "text";
};

// Chat template: every round renders as "USER: {q} ASSISTANT: {a}</s>", with
// the visual placeholder after the first USER marker. Rounds are separated by
// single spaces.
inline std::string render_history(const Conversation& conv, int upto_round, bool with_visual) {
  conv.validate();
  require(upto_round >= 1 && upto_round <= conv.n_rounds(),
          "round index " + std::to_string(upto_round) + " outside [1," +
              std::to_string(conv.n_rounds()) + "]");
  std::string out;
  for (int r = 1; r <= upto_round; ++r) {
    const Round& round = conv.rounds[size_t(r - 1)];
    if (r > 1) out += " ";
    out += "USER: ";
    if (r == 1 && with_visual) out += "<VIS> ";
    out += round.question + " ASSISTANT:";
    if (r < upto_round) out += " " + round.answer + "</s>";
  }
  return out;
}

// Model input for answering round r: the full conversation history plus the
// current question, ending at the open ASSISTANT marker.
inline std::string build_round_input(const Conversation& conv, int r, bool with_visual = true) {
  return render_history(conv, r, with_visual);
}

inline TrainingExample build_training_example(const Conversation& conv, const Vocabulary& vocab,
                                              bool with_visual, const std::string& modality,
                                              int context_window) {
  conv.validate();
  TrainingExample ex;
  ex.modality = modality;
  ex.ids.push_back(Vocabulary::kBos);
  ex.mask.push_back(0);
  for (int r = 1; r <= conv.n_rounds(); ++r) {
    const Round& round = conv.rounds[size_t(r - 1)];
    auto push = [&ex](int id, uint8_t m) {
      ex.ids.push_back(id);
      ex.mask.push_back(m);
    };
    push(Vocabulary::kUser, 0);
    if (r == 1 && with_visual) {
      ex.visual_slot = int(ex.ids.size());
      push(Vocabulary::kVis, 0);
    }
    for (int id : vocab.tokenize(round.question)) push(id, 0);
    push(Vocabulary::kAssistant, 0);
    std::vector<int> answer_ids = vocab.tokenize(round.answer);
    require(!answer_ids.empty(), "conversation: answer tokenizes to nothing: " + round.answer);
    for (int id : answer_ids) push(id, 1);
    push(Vocabulary::kEos, 1);
  }
  require(int(ex.ids.size()) <= context_window,
          "conversation: " + std::to_string(ex.ids.size()) + " tokens exceed context window " +
              std::to_string(context_window));
  return ex;
}

// Inverse of the template: recovers round structure from a token sequence.
// Tolerates the VIS placeholder and a leading BOS.
inline Conversation parse_transcript(const std::vector<int>& ids, const Vocabulary& vocab) {
  Conversation conv;
  size_t i = 0;
  auto words_until = [&](std::initializer_list<int> stops) {
    std::string text;
    while (i < ids.size()) {
      int id = ids[i];
      bool stop = false;
      for (int s : stops) stop = stop || id == s;
      if (stop) break;
      if (id != Vocabulary::kVis && id != Vocabulary::kBos && id != Vocabulary::kPad) {
        if (!text.empty()) text.push_back(' ');
        text += vocab.token_string(id);
      }
      ++i;
    }
    return text;
  };
  while (i < ids.size()) {
    while (i < ids.size() && ids[i] != Vocabulary::kUser) ++i;
    if (i >= ids.size()) break;
    ++i;  // consume USER
    Round round;
    round.question = words_until({Vocabulary::kAssistant});
    if (i >= ids.size()) throw FormatError("transcript: question without an ASSISTANT marker");
    ++i;  // consume ASSISTANT
    round.answer = words_until({Vocabulary::kEos, Vocabulary::kUser});
    if (i < ids.size() && ids[i] == Vocabulary::kEos) ++i;
    require(!round.question.empty() && !round.answer.empty(),
            "transcript: empty round while parsing");
    conv.rounds.push_back(std::move(round));
  }
  require(!conv.rounds.empty(), "transcript: no rounds found");
  return conv;
}

}  // namespace uvlm
