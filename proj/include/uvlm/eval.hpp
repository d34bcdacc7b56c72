#pragma once

#include <algorithm>
#include <cctype>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "uvlm/pipeline.hpp"

namespace uvlm {

// ---------------------------------------------------------------------------
// Answer normalization: QA scoring and yes/no parsing both compare lowercase
// words with punctuation and articles stripped.
// ---------------------------------------------------------------------------

inline std::string normalize_answer(const std::string& text) {
  std::string out, word;
  auto flush = [&] {
    if (word.empty()) return;
    if (word != "a" && word != "an" && word != "the") {
      if (!out.empty()) out.push_back(' ');
      out += word;
    }
    word.clear();
  };
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c)))
      word.push_back(char(std::tolower(static_cast<unsigned char>(c))));
    else
      flush();
  }
  flush();
  return out;
}

// 1 for a leading "yes", 0 for a leading "no", -1 when neither parses.
inline int parse_yes_no(const std::string& text) {
  std::string norm = normalize_answer(text);
  size_t sp = norm.find(' ');
  std::string first = sp == std::string::npos ? norm : norm.substr(0, sp);
  if (first == "yes") return 1;
  if (first == "no") return 0;
  return -1;
}

namespace detail {

inline double round1(double x) { return std::round(x * 10.0) / 10.0; }

// Evaluation never wants gradient graphs; this pins every group frozen for
// the enclosing scope and restores the caller's freeze schedule after.
struct FreezeGuard {
  std::vector<ParamGroup*> groups;
  std::vector<bool> saved;

  explicit FreezeGuard(ModelState& st) : groups(st.groups()) {
    for (ParamGroup* g : groups) {
      saved.push_back(g->trainable());
      g->set_trainable(false);
    }
  }
  ~FreezeGuard() {
    for (size_t i = 0; i < groups.size(); ++i) groups[i]->set_trainable(saved[i]);
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// QA accuracy: greedy generation per round, conditioned on the gold history,
// scored by normalized exact match.
// ---------------------------------------------------------------------------

struct QaOutcome {
  int total = 0;
  int correct = 0;
  double accuracy = 0;
};

using Answerer = std::function<std::string(const CorpusRecord&, int round)>;

// Token prompt for answering round r: every earlier round with its gold
// answer, then the round-r question, ending at the open ASSISTANT marker.
// Matches the training-example prefix token for token.
inline std::vector<int> round_prompt_ids(const Conversation& conv, const Vocabulary& vocab,
                                         bool with_visual, int r) {
  require(r >= 1 && r <= conv.n_rounds(),
          "round index " + std::to_string(r) + " outside [1," + std::to_string(conv.n_rounds()) +
              "]");
  std::vector<int> ids{Vocabulary::kBos};
  for (int q = 1; q <= r; ++q) {
    const Round& round = conv.rounds[size_t(q - 1)];
    ids.push_back(Vocabulary::kUser);
    if (q == 1 && with_visual) ids.push_back(Vocabulary::kVis);
    for (int id : vocab.tokenize(round.question)) ids.push_back(id);
    ids.push_back(Vocabulary::kAssistant);
    if (q < r) {
      for (int id : vocab.tokenize(round.answer)) ids.push_back(id);
      ids.push_back(Vocabulary::kEos);
    }
  }
  return ids;
}

inline QaOutcome eval_qa_with(const CorpusManifest& corpus, const std::string& split,
                              std::optional<Modality> modality, const Answerer& answer) {
  QaOutcome out;
  for (const CorpusRecord& rec : corpus.records) {
    if (rec.stage != "sft" || rec.split != split) continue;
    if (modality && rec.modality != *modality) continue;
    for (int r = 1; r <= rec.conv.n_rounds(); ++r) {
      if (normalize_answer(answer(rec, r)) ==
          normalize_answer(rec.conv.rounds[size_t(r - 1)].answer))
        ++out.correct;
      ++out.total;
    }
  }
  require(out.total > 0, "eval_qa: no sft records in split \"" + split + "\"");
  out.accuracy = 100.0 * out.correct / out.total;
  return out;
}

// Greedy model-backed answerer; visual features are projected once per record
// and reused across rounds.
inline Answerer model_answerer(const ModelState& st, const CorpusManifest& corpus,
                               TokenMode mode) {
  Vocabulary vocab(st.dims.vocab_size);
  auto cache = std::make_shared<std::map<std::string, Tensor>>();
  return [&st, &corpus, mode, vocab, cache](const CorpusRecord& rec, int r) {
    auto it = cache->find(rec.id);
    if (it == cache->end())
      it = cache
               ->emplace(rec.id, project(st.projection,
                                         visual_feature_tokens(st, load_visual(corpus, rec), mode)))
               .first;
    std::vector<int> prompt = round_prompt_ids(rec.conv, vocab, /*with_visual=*/true, r);
    std::vector<int> generated = generate(st.lm, st.dims, prompt, &it->second);
    std::vector<int> words;
    for (int id : generated)
      if (id > Vocabulary::kUnk) words.push_back(id);
    return vocab.detokenize(words);
  };
}

inline QaOutcome eval_qa(ModelState& st, const CorpusManifest& corpus, const std::string& split,
                         std::optional<Modality> modality, TokenMode mode) {
  detail::FreezeGuard guard(st);
  return eval_qa_with(corpus, split, modality, model_answerer(st, corpus, mode));
}

// ---------------------------------------------------------------------------
// POPE: balanced yes/no object-existence polling with three negative-sampling
// strategies, scored as accuracy, F1 (yes = positive class), and yes-rate.
// ---------------------------------------------------------------------------

struct PopeItem {
  std::string record_id;
  Modality modality = Modality::image;
  std::string object;
  bool label_yes = false;
  std::string strategy;
};

struct PopeQuestionSet {
  std::string strategy;
  std::vector<PopeItem> items;
};

inline std::string pope_question(const PopeItem& item) {
  return "is there a " + item.object + " in the " + modality_name(item.modality);
}

inline PopeQuestionSet pope_build(const CorpusManifest& corpus, const std::string& strategy,
                                  int n, uint64_t seed) {
  require(strategy == "random" || strategy == "popular" || strategy == "adversarial",
          "pope: unknown strategy \"" + strategy + "\"");
  require(n >= 2, "pope: need at least two questions");

  std::vector<const CorpusRecord*> pool;
  for (const auto& r : corpus.records)
    if (r.split == "test" && !r.inventory.empty()) pool.push_back(&r);
  require(!pool.empty(), "pope: no test records with object inventories");

  // corpus-wide object statistics feed the popular and adversarial rankings
  std::map<std::string, int> freq;
  std::map<std::string, std::map<std::string, int>> cooc;
  for (const auto& r : corpus.records)
    for (const std::string& a : r.inventory) {
      ++freq[a];
      for (const std::string& b : r.inventory)
        if (a != b) ++cooc[a][b];
    }

  Rng rng(mix_seed(seed, 0x90be));
  std::vector<size_t> order(pool.size());
  std::iota(order.begin(), order.end(), size_t(0));
  rng.shuffle(order);

  std::vector<std::vector<std::string>> present(pool.size()), absent(pool.size());
  for (size_t i = 0; i < pool.size(); ++i) {
    const CorpusRecord& rec = *pool[order[i]];
    present[i] = rec.inventory;
    rng.shuffle(present[i]);
    std::set<std::string> have(rec.inventory.begin(), rec.inventory.end());
    for (const auto& [obj, f] : freq)
      if (!have.count(obj)) absent[i].push_back(obj);
    if (strategy == "random") {
      rng.shuffle(absent[i]);
    } else if (strategy == "popular") {
      std::stable_sort(absent[i].begin(), absent[i].end(),
                       [&](const std::string& a, const std::string& b) {
                         if (freq[a] != freq[b]) return freq[a] > freq[b];
                         return a < b;
                       });
    } else {
      auto score = [&](const std::string& obj) {
        int s = 0;
        for (const std::string& p : rec.inventory) s += cooc[obj][p];
        return s;
      };
      std::stable_sort(absent[i].begin(), absent[i].end(),
                       [&](const std::string& a, const std::string& b) {
                         int sa = score(a), sb = score(b);
                         if (sa != sb) return sa > sb;
                         if (freq[a] != freq[b]) return freq[a] > freq[b];
                         return a < b;
                       });
    }
  }

  // round-robin over records so questions spread across scenes
  auto draw = [&](std::vector<std::vector<std::string>>& lists, bool label, int target,
                  const char* kind) {
    std::vector<PopeItem> out;
    std::vector<size_t> cursor(lists.size(), 0);
    while (int(out.size()) < target) {
      bool progressed = false;
      for (size_t i = 0; i < lists.size() && int(out.size()) < target; ++i) {
        if (cursor[i] >= lists[i].size()) continue;
        const CorpusRecord& rec = *pool[order[i]];
        out.push_back({rec.id, rec.modality, lists[i][cursor[i]++], label, strategy});
        progressed = true;
      }
      require(progressed,
              std::string("pope: ") + kind + " questions exceed the available material");
    }
    return out;
  };
  PopeQuestionSet set;
  set.strategy = strategy;
  set.items = draw(present, true, n - n / 2, "yes");
  std::vector<PopeItem> negatives = draw(absent, false, n / 2, "no");
  set.items.insert(set.items.end(), negatives.begin(), negatives.end());
  rng.shuffle(set.items);
  return set;
}

struct PopeReport {
  double accuracy = 0, f1 = 0, yes_rate = 0;
  int tp = 0, fp = 0, tn = 0, fn = 0;
  int unparseable = 0;  // scored incorrect, counted as "no" for yes-rate
  int total = 0;
};

inline PopeReport pope_score(const std::vector<std::string>& predictions,
                             const std::vector<bool>& labels) {
  require(predictions.size() == labels.size(),
          "pope_score: " + std::to_string(predictions.size()) + " predictions vs " +
              std::to_string(labels.size()) + " labels");
  require(!labels.empty(), "pope_score: empty prediction list");

  PopeReport rep;
  rep.total = int(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) {
    int pred = parse_yes_no(predictions[i]);
    if (pred < 0) {
      ++rep.unparseable;
      continue;
    }
    if (pred == 1)
      ++(labels[i] ? rep.tp : rep.fp);
    else
      ++(labels[i] ? rep.fn : rep.tn);
  }
  double total = double(rep.total);
  rep.accuracy = detail::round1(100.0 * double(rep.tp + rep.tn) / total);
  int f1_denom = 2 * rep.tp + rep.fp + rep.fn;
  rep.f1 = f1_denom ? detail::round1(100.0 * 2.0 * double(rep.tp) / double(f1_denom)) : 0.0;
  rep.yes_rate = detail::round1(100.0 * double(rep.tp + rep.fp) / total);
  return rep;
}

inline PopeReport eval_pope(ModelState& st, const CorpusManifest& corpus,
                            const PopeQuestionSet& set, TokenMode mode) {
  detail::FreezeGuard guard(st);
  Vocabulary vocab(st.dims.vocab_size);
  std::map<std::string, const CorpusRecord*> by_id;
  for (const auto& r : corpus.records) by_id[r.id] = &r;

  std::map<std::string, Tensor> cache;
  std::vector<std::string> predictions;
  std::vector<bool> labels;
  for (const PopeItem& item : set.items) {
    auto rit = by_id.find(item.record_id);
    require(rit != by_id.end(), "pope: unknown record id " + item.record_id);
    const CorpusRecord& rec = *rit->second;
    auto fit = cache.find(rec.id);
    if (fit == cache.end())
      fit = cache
                .emplace(rec.id,
                         project(st.projection,
                                 visual_feature_tokens(st, load_visual(corpus, rec), mode)))
                .first;
    Conversation conv;
    conv.rounds.push_back({pope_question(item), ""});
    std::vector<int> prompt = round_prompt_ids(conv, vocab, /*with_visual=*/true, 1);
    std::vector<int> generated = generate(st.lm, st.dims, prompt, &fit->second);
    std::vector<int> words;
    for (int id : generated)
      if (id > Vocabulary::kUnk) words.push_back(id);
    predictions.push_back(vocab.detokenize(words));
    labels.push_back(item.label_yes);
  }
  return pope_score(predictions, labels);
}

// ---------------------------------------------------------------------------
// Alignment gap over the held-out matched image/video pairs.
// ---------------------------------------------------------------------------

inline double eval_alignment_gap(ModelState& st, const CorpusManifest& corpus) {
  std::map<int, const CorpusRecord*> images, videos;
  for (const auto& r : corpus.records) {
    if (r.split != "val" || r.pair < 0) continue;
    (r.modality == Modality::image ? images : videos)[r.pair] = &r;
  }
  require(images.size() == videos.size(), "alignment gap: unmatched image/video pair counts");
  require(images.size() >= 2, "alignment gap: need at least two held-out pairs");

  detail::FreezeGuard guard(st);
  std::vector<std::vector<float>> a, b;
  for (const auto& [pair_id, rec] : images) {
    auto vit = videos.find(pair_id);
    require(vit != videos.end(), "alignment gap: no video partner for pair " +
                                     std::to_string(pair_id));
    Tensor ia = detail::pooled_visual_row(st.image_tower, st.dims, load_visual(corpus, *rec),
                                  st.dims.frames_k);
    Tensor vb = detail::pooled_visual_row(st.video_tower, st.dims, load_visual(corpus, *vit->second),
                                  st.dims.frames_k);
    a.push_back(ia.data());
    b.push_back(vb.data());
  }
  return alignment_gap(a, b);
}

// ---------------------------------------------------------------------------
// Eval reports and the ablation runner.
// ---------------------------------------------------------------------------

inline std::string model_fingerprint(const ModelState& st) {
  Sha256 h;
  for (const ParamGroup* g : st.groups()) {
    std::string f = g->fingerprint();
    h.update(f.data(), f.size());
  }
  return h.hex_digest();
}

struct EvalReport {
  std::string run_id;
  uint64_t seed = 0;
  std::string checkpoint_fingerprint;
  std::map<std::string, double> metrics;
};

// Shared knobs for one full train-and-evaluate pipeline; ablation arms vary
// only their ArmSpec on top of these.
struct PipelineSettings {
  ModelDims dims;
  std::string token_mode = "pooled";
  double lr = 1e-3;
  double temperature = 0.07;
  double mask_ratio = 0.5;
  double warmup_ratio = 0.03;
  int align_epochs = 10;
  int mae_epochs = 10;
  int stage1_epochs = 4;
  int stage2_epochs = 6;
  int align_batch = 32;
  int stage1_batch = 32;
  int stage2_batch = 16;
  int pope_n = 24;
  std::string pope_strategy = "random";
};

struct ArmSpec {
  std::string name;
  std::string representation = "united";  // united | separated
  std::string data_mix = "joint";         // joint | image_only | video_only
};

inline void validate_arms(const std::string& axis, const std::vector<ArmSpec>& arms) {
  require(axis == "representation" || axis == "joint",
          "ablation: unknown axis \"" + axis + "\"");
  require(arms.size() >= 2, "ablation: need at least two arms");
  for (const ArmSpec& a : arms) {
    require(!a.name.empty(), "ablation: arm without a name");
    require(a.representation == "united" || a.representation == "separated",
            "ablation: unknown representation \"" + a.representation + "\"");
    require(a.data_mix == "joint" || a.data_mix == "image_only" || a.data_mix == "video_only",
            "ablation: unknown data mix \"" + a.data_mix + "\"");
  }
  const ArmSpec& first = arms.front();
  for (const ArmSpec& a : arms) {
    if (axis == "representation")
      require(a.data_mix == first.data_mix,
              "ablation: arms \"" + first.name + "\" and \"" + a.name +
                  "\" differ in more than the ablated field (data_mix)");
    else
      require(a.representation == first.representation,
              "ablation: arms \"" + first.name + "\" and \"" + a.name +
                  "\" differ in more than the ablated field (representation)");
  }
}

inline std::vector<ArmSpec> default_arms(const std::string& axis) {
  if (axis == "representation")
    return {{"united", "united", "joint"}, {"separated", "separated", "joint"}};
  if (axis == "joint")
    return {{"joint", "united", "joint"},
            {"video_only", "united", "video_only"},
            {"image_only", "united", "image_only"}};
  throw InvalidArgument("ablation: unknown axis \"" + axis + "\"");
}

// Restricts the stage 1/2 training pools; alignment and MAE pretraining keep
// the whole corpus regardless of the mix.
inline CorpusManifest filter_modality(const CorpusManifest& corpus, const std::string& data_mix) {
  if (data_mix == "joint") return corpus;
  require(data_mix == "image_only" || data_mix == "video_only",
          "ablation: unknown data mix \"" + data_mix + "\"");
  Modality keep = data_mix == "image_only" ? Modality::image : Modality::video;
  CorpusManifest out;
  out.root = corpus.root;
  for (const auto& r : corpus.records)
    if (r.modality == keep) out.records.push_back(r);
  return out;
}

namespace detail {

inline RunConfig arm_stage_config(const PipelineSettings& s, const std::string& stage,
                                  uint64_t seed, const std::filesystem::path& scratch) {
  RunConfig cfg;
  apply_stage_defaults(cfg, stage);
  cfg.seed = seed;
  cfg.lr = s.lr;
  cfg.warmup_ratio = s.warmup_ratio;
  cfg.token_mode = s.token_mode;
  cfg.temperature = s.temperature;
  cfg.mask_ratio = s.mask_ratio;
  cfg.dims = s.dims;
  cfg.data_dir = scratch;
  cfg.out_dir = scratch;
  if (stage == "align") {
    cfg.batch_size = s.align_batch;
    cfg.epochs = s.align_epochs;
  } else if (stage == "mae") {
    cfg.batch_size = s.align_batch;
    cfg.epochs = s.mae_epochs;
  } else if (stage == "1") {
    cfg.batch_size = s.stage1_batch;
    cfg.epochs = s.stage1_epochs;
  } else {
    cfg.batch_size = s.stage2_batch;
    cfg.epochs = s.stage2_epochs;
  }
  cfg.validate();
  return cfg;
}

}  // namespace detail

// One arm end to end: united arms run contrastive alignment, separated arms
// pretrain only the image tower with MAE and leave the video tower at init.
inline ModelState train_arm(const PipelineSettings& s, const ArmSpec& arm, uint64_t seed,
                            const CorpusManifest& corpus,
                            const std::filesystem::path& scratch) {
  ModelState st = ModelState::init(s.dims, seed);
  if (arm.representation == "united") {
    RunConfig pre = detail::arm_stage_config(s, "align", seed, scratch);
    run_align(st, pre, corpus);
  } else {
    RunConfig pre = detail::arm_stage_config(s, "mae", seed, scratch);
    run_mae(st, pre, corpus);
  }
  CorpusManifest mix = filter_modality(corpus, arm.data_mix);
  RunConfig c1 = detail::arm_stage_config(s, "1", seed, scratch);
  train_stage1(st, c1, mix);
  RunConfig c2 = detail::arm_stage_config(s, "2", seed, scratch);
  train_stage2(st, c2, mix);
  return st;
}

inline EvalReport evaluate_model(ModelState& st, const CorpusManifest& corpus,
                                 const PipelineSettings& s, const std::string& run_id,
                                 uint64_t seed) {
  EvalReport rep;
  rep.run_id = run_id;
  rep.seed = seed;
  rep.checkpoint_fingerprint = model_fingerprint(st);
  TokenMode mode = token_mode_from(s.token_mode);
  rep.metrics["image_qa"] = eval_qa(st, corpus, "test", Modality::image, mode).accuracy;
  rep.metrics["video_qa"] = eval_qa(st, corpus, "test", Modality::video, mode).accuracy;
  rep.metrics["alignment_gap"] = eval_alignment_gap(st, corpus);
  if (s.pope_n > 0) {
    PopeQuestionSet set = pope_build(corpus, s.pope_strategy, s.pope_n, seed);
    PopeReport pr = eval_pope(st, corpus, set, mode);
    rep.metrics["pope_accuracy"] = pr.accuracy;
    rep.metrics["pope_f1"] = pr.f1;
    rep.metrics["pope_yes_rate"] = pr.yes_rate;
  }
  return rep;
}

struct AblationRow {
  std::string arm;
  std::string seed_label;  // a seed value, "mean", or "delta"
  std::map<std::string, double> metrics;
};

struct AblationReport {
  std::string axis;
  std::vector<ArmSpec> arms;
  std::vector<uint64_t> seeds;
  std::vector<AblationRow> rows;

  double value(const std::string& arm, const std::string& seed_label,
               const std::string& metric) const {
    for (const AblationRow& r : rows)
      if (r.arm == arm && r.seed_label == seed_label) {
        auto it = r.metrics.find(metric);
        require(it != r.metrics.end(), "ablation report: no metric \"" + metric + "\"");
        return it->second;
      }
    throw InvalidArgument("ablation report: no row for " + arm + "/" + seed_label);
  }
  double arm_mean(const std::string& arm, const std::string& metric) const {
    return value(arm, "mean", metric);
  }
};

inline std::string ablation_csv(const AblationReport& rep) {
  require(!rep.rows.empty(), "ablation report: no rows");
  std::vector<std::string> keys;
  for (const auto& [k, _] : rep.rows.front().metrics) keys.push_back(k);
  std::ostringstream os;
  os << "arm,seed";
  for (const auto& k : keys) os << "," << k;
  os << "\n";
  for (const AblationRow& r : rep.rows) {
    os << r.arm << "," << r.seed_label;
    for (const auto& k : keys) os << "," << r.metrics.at(k);
    os << "\n";
  }
  return os.str();
}

inline std::string ablation_markdown(const AblationReport& rep) {
  require(!rep.rows.empty(), "ablation report: no rows");
  std::vector<std::string> keys;
  for (const auto& [k, _] : rep.rows.front().metrics) keys.push_back(k);
  std::ostringstream os;
  os << "# Ablation: " << rep.axis << "\n\n";
  os << "| arm |";
  for (const auto& k : keys) os << " " << k << " |";
  os << "\n|---|";
  for (size_t i = 0; i < keys.size(); ++i) os << "---|";
  os << "\n";
  for (const AblationRow& r : rep.rows) {
    if (r.seed_label != "mean" && r.seed_label != "delta") continue;
    os << "| " << (r.seed_label == "delta" ? "Δ " + r.arm : r.arm + " (mean)") << " |";
    for (const auto& k : keys) os << " " << r.metrics.at(k) << " |";
    os << "\n";
  }
  return os.str();
}

using ProgressFn = std::function<void(const std::string&)>;

inline AblationReport run_ablation(const std::string& axis, const PipelineSettings& base,
                                   const std::vector<uint64_t>& seeds,
                                   const CorpusManifest& corpus,
                                   const std::filesystem::path& out_dir,
                                   const std::vector<ArmSpec>* arms_override = nullptr,
                                   const ProgressFn& progress = {}) {
  std::vector<ArmSpec> arms = arms_override ? *arms_override : default_arms(axis);
  validate_arms(axis, arms);
  require(seeds.size() >= 3, "ablation: at least three seeds required");
  std::filesystem::create_directories(out_dir);

  AblationReport rep;
  rep.axis = axis;
  rep.arms = arms;
  rep.seeds = seeds;
  for (const ArmSpec& arm : arms) {
    std::map<std::string, double> sums;
    for (uint64_t seed : seeds) {
      if (progress)
        progress("ablation " + axis + ": arm " + arm.name + ", seed " + std::to_string(seed));
      ModelState st = train_arm(base, arm, seed, corpus, out_dir);
      EvalReport er = evaluate_model(st, corpus, base, axis + "/" + arm.name, seed);
      rep.rows.push_back({arm.name, std::to_string(seed), er.metrics});
      for (const auto& [k, v] : er.metrics) sums[k] += v;
    }
    AblationRow mean{arm.name, "mean", {}};
    for (const auto& [k, v] : sums) mean.metrics[k] = v / double(seeds.size());
    rep.rows.push_back(std::move(mean));
  }
  const ArmSpec& first = arms.front();
  for (size_t i = 1; i < arms.size(); ++i) {
    AblationRow d{first.name + "-" + arms[i].name, "delta", {}};
    for (const auto& [k, _] : rep.rows.front().metrics)
      d.metrics[k] = rep.arm_mean(first.name, k) - rep.arm_mean(arms[i].name, k);
    rep.rows.push_back(std::move(d));
  }

  std::ofstream csv(out_dir / ("ablation-" + axis + ".csv"));
  csv << ablation_csv(rep);
  std::ofstream md(out_dir / ("ablation-" + axis + ".md"));
  md << ablation_markdown(rep);
  return rep;
}

}  // namespace uvlm
