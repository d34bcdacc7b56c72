#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "uvlm/eval.hpp"

using namespace uvlm;

namespace {

std::filesystem::path temp_dir(const char* name) {
  auto p = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

const CorpusManifest& test_corpus() {
  static CorpusManifest m = [] {
    CorpusConfig cfg;
    cfg.align_images = 12;
    cfg.align_videos = 12;
    cfg.align_val_pairs = 4;
    cfg.sft_train_images = 12;
    cfg.sft_train_videos = 8;
    cfg.sft_test_images = 4;
    cfg.sft_test_videos = 4;
    return gen_corpus(cfg, 91, temp_dir("uvlm_eval_corpus"));
  }();
  return m;
}

std::map<std::string, const CorpusRecord*> records_by_id(const CorpusManifest& corpus) {
  std::map<std::string, const CorpusRecord*> out;
  for (const auto& r : corpus.records) out[r.id] = &r;
  return out;
}

}  // namespace

TEST_CASE("pope scorer reproduces the degenerate golden rows") {
  std::vector<bool> labels;
  std::vector<std::string> always_yes, perfect;
  for (int i = 0; i < 50; ++i) {
    bool y = i < 25;
    labels.push_back(y);
    always_yes.push_back("yes");
    perfect.push_back(y ? "yes" : "no");
  }

  PopeReport ay = pope_score(always_yes, labels);
  CHECK(ay.accuracy == 50.0);
  CHECK(ay.f1 == 66.7);
  CHECK(ay.yes_rate == 100.0);

  PopeReport pf = pope_score(perfect, labels);
  CHECK(pf.accuracy == 100.0);
  CHECK(pf.f1 == 100.0);
  CHECK(pf.yes_rate == 50.0);

  std::vector<bool> l2;
  std::vector<std::string> p2;
  auto push = [&](int count, bool label, const char* pred) {
    for (int i = 0; i < count; ++i) {
      l2.push_back(label);
      p2.push_back(pred);
    }
  };
  push(40, true, "yes");   // TP
  push(10, true, "no");    // FN
  push(10, false, "yes");  // FP
  push(40, false, "no");   // TN
  PopeReport mixed = pope_score(p2, l2);
  CHECK(mixed.tp == 40);
  CHECK(mixed.fp == 10);
  CHECK(mixed.tn == 40);
  CHECK(mixed.fn == 10);
  CHECK(mixed.accuracy == 80.0);
  CHECK(mixed.f1 == 80.0);
  CHECK(mixed.yes_rate == 50.0);
}

TEST_CASE("pope scorer is permutation-invariant") {
  std::vector<std::string> preds;
  std::vector<bool> labels;
  Rng rng(5);
  for (int i = 0; i < 40; ++i) {
    labels.push_back(rng.below(2) == 0);
    uint32_t roll = rng.below(3);
    preds.push_back(roll == 0 ? "yes" : roll == 1 ? "no" : "hmm");
  }
  PopeReport base = pope_score(preds, labels);

  std::rotate(preds.begin(), preds.begin() + 13, preds.end());
  std::rotate(labels.begin(), labels.begin() + 13, labels.end());
  PopeReport rotated = pope_score(preds, labels);
  CHECK(rotated.accuracy == base.accuracy);
  CHECK(rotated.f1 == base.f1);
  CHECK(rotated.yes_rate == base.yes_rate);
  CHECK(rotated.tp == base.tp);
  CHECK(rotated.fp == base.fp);
  CHECK(rotated.tn == base.tn);
  CHECK(rotated.fn == base.fn);
  CHECK(rotated.unparseable == base.unparseable);
}

TEST_CASE("pope scorer applies the unparseable policy") {
  std::vector<bool> labels{true, false, false};
  std::vector<std::string> preds{"perhaps", "no thanks", "Yes."};
  PopeReport rep = pope_score(preds, labels);
  CHECK(rep.unparseable == 1);
  CHECK(rep.tn == 1);
  CHECK(rep.fp == 1);
  CHECK(rep.tp == 0);
  CHECK(rep.fn == 0);
  CHECK(rep.accuracy == 33.3);
  CHECK(rep.f1 == 0.0);
  CHECK(rep.yes_rate == 33.3);

  CHECK_THROWS_AS(pope_score({"yes"}, {true, false}), InvalidArgument);
  CHECK_THROWS_AS(pope_score({}, {}), InvalidArgument);
}

TEST_CASE("pope question sets are balanced, grounded, and deterministic") {
  const CorpusManifest& corpus = test_corpus();
  auto by_id = records_by_id(corpus);

  std::map<std::string, int> freq;
  std::map<std::string, std::map<std::string, int>> cooc;
  for (const auto& r : corpus.records)
    for (const std::string& a : r.inventory) {
      ++freq[a];
      for (const std::string& b : r.inventory)
        if (a != b) ++cooc[a][b];
    }

  for (const std::string strategy : {"random", "popular", "adversarial"}) {
    for (int n : {10, 7}) {
      PopeQuestionSet set = pope_build(corpus, strategy, n, 7);
      REQUIRE(int(set.items.size()) == n);
      int yes = 0;
      for (const PopeItem& item : set.items) {
        REQUIRE(by_id.count(item.record_id) == 1);
        const CorpusRecord& rec = *by_id.at(item.record_id);
        CHECK(rec.split == "test");
        CHECK(item.modality == rec.modality);
        CHECK(item.strategy == strategy);
        bool present = std::find(rec.inventory.begin(), rec.inventory.end(), item.object) !=
                       rec.inventory.end();
        CHECK(present == item.label_yes);
        if (item.label_yes) ++yes;
        std::string q = pope_question(item);
        CHECK(q == "is there a " + item.object + " in the " + modality_name(rec.modality));
      }
      int no = n - yes;
      CHECK(std::abs(yes - no) <= 1);
    }

    PopeQuestionSet a = pope_build(corpus, strategy, 12, 7);
    PopeQuestionSet b = pope_build(corpus, strategy, 12, 7);
    REQUIRE(a.items.size() == b.items.size());
    for (size_t i = 0; i < a.items.size(); ++i) {
      CHECK(a.items[i].record_id == b.items[i].record_id);
      CHECK(a.items[i].object == b.items[i].object);
      CHECK(a.items[i].label_yes == b.items[i].label_yes);
    }
  }

  // ranked strategies draw each record's negatives in ranking order
  for (const std::string strategy : {"popular", "adversarial"}) {
    PopeQuestionSet set = pope_build(corpus, strategy, 16, 3);
    std::map<std::string, std::vector<std::string>> negatives;
    for (const PopeItem& item : set.items)
      if (!item.label_yes) negatives[item.record_id].push_back(item.object);
    for (const auto& [id, objs] : negatives) {
      const CorpusRecord& rec = *by_id.at(id);
      auto rank = [&](const std::string& obj) {
        if (strategy == "popular") return double(freq[obj]);
        double s = 0;
        for (const std::string& p : rec.inventory) s += cooc[obj][p];
        return s;
      };
      for (size_t i = 1; i < objs.size(); ++i) CHECK(rank(objs[i - 1]) >= rank(objs[i]));
    }
  }

  CHECK_THROWS_AS(pope_build(corpus, "oracle", 10, 1), InvalidArgument);
  CHECK_THROWS_AS(pope_build(corpus, "random", 1, 1), InvalidArgument);
  try {
    pope_build(corpus, "random", 1000, 1);
    FAIL("expected InvalidArgument");
  } catch (const InvalidArgument& e) {
    CHECK(std::string(e.what()).find("available material") != std::string::npos);
  }
}

TEST_CASE("round prompts are prefixes of the training example") {
  const CorpusManifest& corpus = test_corpus();
  Vocabulary vocab(256);
  int checked = 0;
  for (const auto& rec : corpus.records) {
    if (rec.stage != "sft") continue;
    TrainingExample full =
        build_training_example(rec.conv, vocab, true, modality_name(rec.modality), 256);
    for (int r = 1; r <= rec.conv.n_rounds(); ++r) {
      size_t cut = 0;
      int count = 0;
      for (size_t i = 0; i < full.ids.size(); ++i)
        if (full.ids[i] == Vocabulary::kAssistant && ++count == r) {
          cut = i;
          break;
        }
      std::vector<int> expected(full.ids.begin(), full.ids.begin() + long(cut) + 1);
      REQUIRE(round_prompt_ids(rec.conv, vocab, true, r) == expected);
      ++checked;
    }
  }
  CHECK(checked > 20);
}

TEST_CASE("qa evaluation scores oracle answerers") {
  const CorpusManifest& corpus = test_corpus();

  int image_rounds = 0, video_rounds = 0;
  for (const auto& rec : corpus.records) {
    if (rec.stage != "sft" || rec.split != "test") continue;
    (rec.modality == Modality::image ? image_rounds : video_rounds) += rec.conv.n_rounds();
  }

  Answerer echo = [](const CorpusRecord& rec, int r) {
    return "The " + rec.conv.rounds[size_t(r - 1)].answer + "!";
  };
  QaOutcome gold = eval_qa_with(corpus, "test", std::nullopt, echo);
  CHECK(gold.accuracy == 100.0);
  CHECK(gold.total == image_rounds + video_rounds);

  Answerer wrong = [](const CorpusRecord&, int) { return std::string("image"); };
  CHECK(eval_qa_with(corpus, "test", std::nullopt, wrong).accuracy == 0.0);

  QaOutcome images_only = eval_qa_with(corpus, "test", Modality::image, echo);
  CHECK(images_only.total == image_rounds);

  CHECK_THROWS_AS(eval_qa_with(corpus, "nosuch", std::nullopt, echo), InvalidArgument);
}

TEST_CASE("model-backed evaluation is deterministic and restores freeze flags") {
  const CorpusManifest& corpus = test_corpus();
  ModelState st = ModelState::init(ModelDims{}, 19);
  st.projection_g.set_trainable(true);
  st.lm_g.set_trainable(true);
  st.image_tower_g.set_trainable(false);

  QaOutcome first = eval_qa(st, corpus, "test", std::nullopt, TokenMode::pooled);
  QaOutcome second = eval_qa(st, corpus, "test", std::nullopt, TokenMode::pooled);
  CHECK(first.accuracy == second.accuracy);
  CHECK(first.total == second.total);
  CHECK(first.accuracy >= 0.0);
  CHECK(first.accuracy <= 100.0);
  CHECK(st.projection_g.trainable());
  CHECK(st.lm_g.trainable());
  CHECK_FALSE(st.image_tower_g.trainable());

  PopeQuestionSet set = pope_build(corpus, "random", 8, 2);
  PopeReport rep = eval_pope(st, corpus, set, TokenMode::pooled);
  CHECK(rep.total == 8);
  CHECK(rep.tp + rep.fp + rep.tn + rep.fn + rep.unparseable == rep.total);
  CHECK(rep.yes_rate >= 0.0);
  CHECK(rep.yes_rate <= 100.0);
  PopeReport again = eval_pope(st, corpus, set, TokenMode::pooled);
  CHECK(again.accuracy == rep.accuracy);
  CHECK(again.yes_rate == rep.yes_rate);
}

TEST_CASE("alignment gap reads the held-out matched pairs") {
  const CorpusManifest& corpus = test_corpus();
  ModelState st = ModelState::init(ModelDims{}, 29);

  double gap = eval_alignment_gap(st, corpus);
  CHECK(gap >= -2.0);
  CHECK(gap <= 2.0);
  CHECK(eval_alignment_gap(st, corpus) == gap);

  CorpusManifest no_pairs;
  no_pairs.root = corpus.root;
  for (const auto& r : corpus.records)
    if (r.split != "val") no_pairs.records.push_back(r);
  CHECK_THROWS_AS(eval_alignment_gap(st, no_pairs), InvalidArgument);
}

TEST_CASE("ablation control arms produce zero deltas") {
  auto dir = temp_dir("uvlm_eval_ablate_control");
  PipelineSettings s;
  s.align_epochs = 1;
  s.mae_epochs = 1;
  s.stage1_epochs = 1;
  s.stage2_epochs = 1;
  s.align_batch = 8;
  s.stage1_batch = 8;
  s.stage2_batch = 8;
  s.pope_n = 6;
  std::vector<ArmSpec> arms{{"a", "united", "joint"}, {"b", "united", "joint"}};

  AblationReport rep =
      run_ablation("joint", s, {1, 2, 3}, test_corpus(), dir, &arms);
  REQUIRE(rep.rows.size() == 9);  // 2 arms x 3 seeds + 2 means + 1 delta

  const AblationRow& delta = rep.rows.back();
  CHECK(delta.seed_label == "delta");
  CHECK(delta.arm == "a-b");
  for (const auto& [metric, value] : delta.metrics) {
    INFO(metric);
    CHECK(value == 0.0);
  }
  for (const auto& [metric, value] : rep.rows.front().metrics)
    CHECK(rep.arm_mean("a", metric) == rep.arm_mean("b", metric));

  std::ifstream csv(dir / "ablation-joint.csv");
  REQUIRE(csv.good());
  std::string header;
  std::getline(csv, header);
  CHECK(header.rfind("arm,seed", 0) == 0);
  std::ifstream md(dir / "ablation-joint.md");
  REQUIRE(md.good());
  std::string md_text((std::istreambuf_iterator<char>(md)), std::istreambuf_iterator<char>());
  CHECK(md_text.find("a-b") != std::string::npos);
}

TEST_CASE("ablation validates arms, seeds, and mixes") {
  PipelineSettings s;
  std::vector<ArmSpec> mixed{{"united", "united", "joint"},
                             {"separated", "separated", "video_only"}};
  CHECK_THROWS_AS(run_ablation("representation", s, {1, 2, 3}, test_corpus(),
                               temp_dir("uvlm_eval_ablate_bad"), &mixed),
                  InvalidArgument);

  std::vector<ArmSpec> fine{{"united", "united", "joint"}, {"separated", "separated", "joint"}};
  CHECK_THROWS_AS(run_ablation("representation", s, {1, 2}, test_corpus(),
                               temp_dir("uvlm_eval_ablate_bad"), &fine),
                  InvalidArgument);
  CHECK_THROWS_AS(default_arms("asymmetric"), InvalidArgument);
  CHECK_THROWS_AS(validate_arms("joint", {{"a", "united", "joint"}}), InvalidArgument);

  CHECK(filter_modality(test_corpus(), "joint").records.size() ==
        test_corpus().records.size());
  CorpusManifest images = filter_modality(test_corpus(), "image_only");
  CHECK_FALSE(images.records.empty());
  for (const auto& r : images.records) CHECK(r.modality == Modality::image);
  CHECK_THROWS_AS(filter_modality(test_corpus(), "text_only"), InvalidArgument);
}
