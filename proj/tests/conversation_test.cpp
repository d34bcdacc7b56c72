#include <catch2/catch_amalgamated.hpp>

#include <string>

#include "helpers.hpp"
#include "uvlm/conversation.hpp"
#include "uvlm/tokenizer.hpp"

using namespace uvlm;

TEST_CASE("vocabulary reserves the special ids and pads to the configured size") {
  Vocabulary v;
  CHECK(v.size() == 256);
  CHECK(v.token_string(Vocabulary::kPad) == "<pad>");
  CHECK(v.token_string(Vocabulary::kBos) == "<bos>");
  CHECK(v.token_string(Vocabulary::kEos) == "</s>");
  CHECK(v.token_string(Vocabulary::kVis) == "<VIS>");
  CHECK(v.token_string(Vocabulary::kUser) == "USER:");
  CHECK(v.token_string(Vocabulary::kAssistant) == "ASSISTANT:");
  CHECK(v.token_string(Vocabulary::kUnk) == "<unk>");
  CHECK(v.token_string(255).rfind("<unused-", 0) == 0);
  CHECK_THROWS_AS(Vocabulary(10), InvalidArgument);
}

TEST_CASE("tokenize round-trips in-vocabulary text") {
  Vocabulary v;
  CHECK(v.tokenize("").empty());
  CHECK(v.detokenize({}) == "");
  std::vector<int> ids = v.tokenize("red square");
  REQUIRE(ids.size() == 2);
  CHECK(ids[0] != Vocabulary::kUnk);
  CHECK(ids[1] != Vocabulary::kUnk);
  CHECK(v.detokenize(ids) == "red square");
}

TEST_CASE("tokenize normalizes case and punctuation, absorbs OOV into UNK") {
  Vocabulary v;
  CHECK(v.tokenize("Red!") == v.tokenize("red"));
  CHECK(v.tokenize("what color is the circle?") == v.tokenize("what color is the circle"));
  std::vector<int> oov = v.tokenize("zebra stripes");
  CHECK(oov == std::vector<int>{Vocabulary::kUnk, Vocabulary::kUnk});
}

TEST_CASE("tokenize recognizes template literals including glued EOS") {
  Vocabulary v;
  std::vector<int> ids = v.tokenize("USER: <VIS> what is this ASSISTANT: red</s>");
  REQUIRE(ids.size() >= 4);
  CHECK(ids.front() == Vocabulary::kUser);
  CHECK(ids[1] == Vocabulary::kVis);
  CHECK(ids.back() == Vocabulary::kEos);
  CHECK(ids[ids.size() - 2] == v.lookup("red"));
}

TEST_CASE("detokenize rejects out-of-range ids") {
  Vocabulary v;
  CHECK_THROWS_AS(v.detokenize({0, 256}), InvalidArgument);
  CHECK_THROWS_AS(v.detokenize({-1}), InvalidArgument);
}

TEST_CASE("round one input is exactly the templated first question") {
  Conversation conv{{{"what color is the circle", "red"}}};
  CHECK(build_round_input(conv, 1) == "USER: <VIS> what color is the circle ASSISTANT:");
  CHECK(build_round_input(conv, 1, false) == "USER: what color is the circle ASSISTANT:");
  CHECK_THROWS_AS(build_round_input(conv, 0), InvalidArgument);
  CHECK_THROWS_AS(build_round_input(conv, 2), InvalidArgument);
}

TEST_CASE("later rounds concatenate the full history") {
  Conversation conv{{{"what color is the circle", "red"},
                     {"what shape is red", "circle"},
                     {"is there a square in the image", "no"}}};
  CHECK(build_round_input(conv, 2) ==
        "USER: <VIS> what color is the circle ASSISTANT: red</s> "
        "USER: what shape is red ASSISTANT:");
  CHECK(build_round_input(conv, 3) ==
        "USER: <VIS> what color is the circle ASSISTANT: red</s> "
        "USER: what shape is red ASSISTANT: circle</s> "
        "USER: is there a square in the image ASSISTANT:");
}

TEST_CASE("templating properties hold over a thousand random conversations") {
  Vocabulary vocab;
  Rng rng(314159);
  for (int trial = 0; trial < 1000; ++trial) {
    Conversation conv = testing::random_conversation(rng);

    std::string r1 = build_round_input(conv, 1);
    CHECK(r1 == "USER: <VIS> " + conv.rounds[0].question + " ASSISTANT:");

    for (int r = 1; r < conv.n_rounds(); ++r) {
      std::string cur = build_round_input(conv, r);
      std::string next = build_round_input(conv, r + 1);
      REQUIRE(next.size() > cur.size());
      CHECK(next.compare(0, cur.size(), cur) == 0);
      CHECK(next.compare(cur.size(), std::string::npos,
                         " " + conv.rounds[size_t(r - 1)].answer + "</s> USER: " +
                             conv.rounds[size_t(r)].question + " ASSISTANT:") == 0);
    }

    TrainingExample ex = build_training_example(conv, vocab, true, "image", 256);
    size_t expect_mask = 0;
    for (const auto& round : conv.rounds) expect_mask += vocab.tokenize(round.answer).size() + 1;
    size_t got = 0;
    for (uint8_t m : ex.mask) got += m;
    CHECK(got == expect_mask);
  }
}

TEST_CASE("training example mask covers answers plus EOS only") {
  Vocabulary vocab;
  Conversation conv{{{"what color is the circle", "a red square"}}};
  TrainingExample ex = build_training_example(conv, vocab, true, "image", 256);
  size_t mask_sum = 0;
  for (uint8_t m : ex.mask) mask_sum += m;
  CHECK(mask_sum == 4);  // three answer tokens and one EOS

  Conversation two{{{"what color is the circle", "red square"},
                    {"describe the image", "the image shows a red square"}}};
  TrainingExample ex2 = build_training_example(two, vocab, true, "image", 256);
  size_t mask_sum2 = 0;
  for (uint8_t m : ex2.mask) mask_sum2 += m;
  CHECK(mask_sum2 == (2 + 1) + (6 + 1));

  // mask is zero on BOS, USER, VIS, question tokens, ASSISTANT
  CHECK(ex.ids[0] == Vocabulary::kBos);
  CHECK(ex.mask[0] == 0);
  REQUIRE(ex.visual_slot == 2);
  CHECK(ex.ids[size_t(ex.visual_slot)] == Vocabulary::kVis);
  CHECK(ex.mask[size_t(ex.visual_slot)] == 0);
  for (size_t i = 0; i < ex.ids.size(); ++i)
    if (ex.mask[i]) CHECK(i + 1 > ex.ids.size() - 4);  // only the tail carries loss
}

TEST_CASE("text-only examples carry no visual slot") {
  Vocabulary vocab;
  Conversation conv{{{"what is red", "a color"}}};
  TrainingExample ex = build_training_example(conv, vocab, false, "text", 64);
  CHECK(ex.visual_slot == -1);
  for (int id : ex.ids) CHECK(id != Vocabulary::kVis);
}

TEST_CASE("oversized conversations are rejected at the context window") {
  Vocabulary vocab;
  Conversation conv{{{"what color is the circle", "red"}}};
  CHECK_THROWS_AS(build_training_example(conv, vocab, true, "image", 5), InvalidArgument);
}

TEST_CASE("empty conversations and empty strings are rejected") {
  Vocabulary vocab;
  Conversation empty;
  CHECK_THROWS_AS(build_training_example(empty, vocab, true, "image", 64), InvalidArgument);
  Conversation blank{{{"", "red"}}};
  CHECK_THROWS_AS(build_training_example(blank, vocab, true, "image", 64), InvalidArgument);
}

TEST_CASE("transcripts parse back into the same round structure") {
  Vocabulary vocab;
  Rng rng(2718);
  for (int trial = 0; trial < 200; ++trial) {
    Conversation conv = testing::random_conversation(rng);
    TrainingExample ex = build_training_example(conv, vocab, true, "video", 256);
    Conversation parsed = parse_transcript(ex.ids, vocab);
    REQUIRE(parsed.n_rounds() == conv.n_rounds());
    for (int r = 0; r < conv.n_rounds(); ++r) {
      CHECK(parsed.rounds[size_t(r)].question == conv.rounds[size_t(r)].question);
      CHECK(parsed.rounds[size_t(r)].answer == conv.rounds[size_t(r)].answer);
    }
  }
}
