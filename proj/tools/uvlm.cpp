// uvlm: the command-line surface over the whole pipeline. One subcommand per
// process: gen-data, align, mae-pretrain, train, eval, ablate, gradcheck,
// generate. Artifacts land under one output root (--out, defaulting to
// $UVLM_OUT or ./uvlm-out), and every run writes a resolved-config snapshot
// beside its outputs, so a run is reproducible from the snapshot alone.
// Logs go to stderr; results go to stdout and files.
// Exit codes: 0 success, 1 usage error, 2 runtime fault.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "uvlm/eval.hpp"
#include "uvlm/gradcheck.hpp"
#include "uvlm/pipeline.hpp"

namespace {

using namespace uvlm;
namespace fs = std::filesystem;

void log_line(const std::string& msg) { std::cerr << "[uvlm] " << msg << "\n"; }

fs::path default_root() {
  if (const char* env = std::getenv("UVLM_OUT"))
    if (*env) return env;
  return "uvlm-out";
}

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream is = io::open_in(path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  require(j.is_object(), path + ": config must be a JSON object");
  return j;
}

void write_snapshot(const fs::path& dir, const nlohmann::json& j) {
  fs::create_directories(dir);
  fs::path path = dir / "config.json";
  std::ofstream os = io::open_out(path);
  os << j.dump(2) << "\n";
  if (!os) throw Error("short write: " + path.string());
}

CorpusManifest load_corpus(const fs::path& data_dir) {
  fs::path manifest = data_dir / "manifest.jsonl";
  require(fs::exists(manifest), "corpus manifest not found at " + manifest.string() +
                                    "; run `uvlm gen-data` first, or pass --data");
  return read_manifest(manifest);
}

Checkpoint load_checkpoint_at(const fs::path& path, const std::string& hint) {
  require(fs::exists(path), hint + "; expected " + path.string());
  log_line("loading checkpoint " + path.string());
  return load_checkpoint(path);
}

nlohmann::json dims_json(const ModelDims& dims) {
  RunConfig carrier;
  carrier.dims = dims;
  return run_config_json(carrier)["model"];
}

ModelDims dims_from_json(const nlohmann::json& m, const std::string& origin) {
  nlohmann::json carrier;
  carrier["model"] = m;
  return parse_run_config(carrier, origin).dims;
}

// ---------------------------------------------------------------------------
// Shared option block for the four training-style subcommands. Precedence is
// flags > config file > stage defaults; Option pointers tell us which flags
// were actually given.
// ---------------------------------------------------------------------------

struct StageOpts {
  std::string config_path, out_root, data_dir, init, token_mode;
  uint64_t seed = 0;
  double lr = 0, warmup_ratio = 0, temperature = 0, mask_ratio = 0, weight_decay = 0;
  int batch_size = 0, epochs = 0, log_every = 0, max_steps = 0;
  bool resume = false;

  CLI::Option* o_config = nullptr;
  CLI::Option* o_out = nullptr;
  CLI::Option* o_data = nullptr;
  CLI::Option* o_seed = nullptr;
  CLI::Option* o_lr = nullptr;
  CLI::Option* o_batch = nullptr;
  CLI::Option* o_epochs = nullptr;
  CLI::Option* o_warmup = nullptr;
  CLI::Option* o_temp = nullptr;
  CLI::Option* o_mask = nullptr;
  CLI::Option* o_token = nullptr;
  CLI::Option* o_log = nullptr;
  CLI::Option* o_max = nullptr;
  CLI::Option* o_init = nullptr;
  CLI::Option* o_resume = nullptr;
  CLI::Option* o_decay = nullptr;
};

enum class StageKind { align, mae, train };

void add_stage_options(CLI::App* cmd, StageOpts& o, StageKind kind) {
  o.o_config = cmd->add_option("--config", o.config_path,
                               "JSON config file; explicit flags override its values");
  o.o_out = cmd->add_option("--out", o.out_root, "output root (default $UVLM_OUT or ./uvlm-out)");
  o.o_data = cmd->add_option("--data", o.data_dir, "corpus directory (default <out>/corpus)");
  o.o_seed = cmd->add_option("--seed", o.seed, "run seed");
  o.o_lr = cmd->add_option("--lr", o.lr, "peak learning rate");
  o.o_batch = cmd->add_option("--batch-size", o.batch_size, "examples per optimizer step");
  o.o_epochs = cmd->add_option("--epochs", o.epochs, "passes over the training split");
  o.o_warmup = cmd->add_option("--warmup-ratio", o.warmup_ratio, "linear warmup fraction");
  o.o_log = cmd->add_option("--log-every", o.log_every, "metric logging stride in steps");
  if (kind == StageKind::align)
    o.o_temp = cmd->add_option("--temperature", o.temperature, "InfoNCE temperature");
  if (kind == StageKind::mae)
    o.o_mask = cmd->add_option("--mask-ratio", o.mask_ratio, "fraction of patches masked");
  if (kind == StageKind::train) {
    o.o_token = cmd->add_option("--token-mode", o.token_mode,
                                "visual token mode: pooled or per_frame");
    o.o_decay = cmd->add_option("--weight-decay", o.weight_decay, "AdamW weight decay");
    o.o_max = cmd->add_option("--max-steps", o.max_steps,
                              "cap on optimizer steps this invocation (0 = no cap)");
    o.o_init = cmd->add_option("--init", o.init, "checkpoint to initialize from");
    o.o_resume = cmd->add_flag("--resume", o.resume,
                               "continue from this stage's own checkpoint in <out>");
  }
}

struct ResolvedStage {
  RunConfig cfg;
  fs::path root;
};

ResolvedStage resolve_stage(const std::string& stage, const StageOpts& o,
                            const std::string& run_name) {
  RunConfig cfg;
  apply_stage_defaults(cfg, stage);
  if (o.o_config->count()) {
    nlohmann::json j = read_json_file(o.config_path);
    if (j.contains("stage"))
      require(j["stage"].is_string() && j["stage"].get<std::string>() == stage,
              o.config_path + ": config stage does not match this subcommand (expected \"" +
                  stage + "\")");
    else
      j["stage"] = stage;
    cfg = parse_run_config(j, o.config_path);
  }

  fs::path root;
  if (o.o_out->count())
    root = o.out_root;
  else if (!cfg.out_dir.empty())
    root = cfg.out_dir.parent_path();
  else
    root = default_root();
  if (o.o_out->count() || cfg.out_dir.empty()) cfg.out_dir = root / run_name;

  if (o.o_data->count())
    cfg.data_dir = o.data_dir;
  else if (cfg.data_dir.empty())
    cfg.data_dir = root / "corpus";

  if (o.o_seed->count()) cfg.seed = o.seed;
  if (o.o_lr->count()) cfg.lr = o.lr;
  if (o.o_batch->count()) cfg.batch_size = o.batch_size;
  if (o.o_epochs->count()) cfg.epochs = o.epochs;
  if (o.o_warmup->count()) cfg.warmup_ratio = o.warmup_ratio;
  if (o.o_log->count()) cfg.log_every = o.log_every;
  if (o.o_temp && o.o_temp->count()) cfg.temperature = o.temperature;
  if (o.o_mask && o.o_mask->count()) cfg.mask_ratio = o.mask_ratio;
  if (o.o_token && o.o_token->count()) cfg.token_mode = o.token_mode;
  if (o.o_decay && o.o_decay->count()) cfg.weight_decay = o.weight_decay;
  if (o.o_max && o.o_max->count()) cfg.max_steps = o.max_steps;
  if (o.o_init && o.o_init->count()) cfg.init_checkpoint = o.init;
  if (o.o_resume && o.o_resume->count()) cfg.resume = true;

  cfg.validate();
  return {std::move(cfg), std::move(root)};
}

// Fresh runs truncate the stage's metrics log so identical invocations leave
// identical files; resumed runs append to it.
MetricsLog open_metrics(const RunConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  if (!cfg.resume) fs::remove(cfg.out_dir / "metrics.csv");
  return MetricsLog(cfg.out_dir / "metrics.csv");
}

std::string fmt1(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  return buf;
}

std::string fmt4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenOpts {
  std::string config_path, out_root, data_dir;
  uint64_t seed = 2024;
  CorpusConfig counts;

  CLI::Option* o_config = nullptr;
  CLI::Option* o_out = nullptr;
  CLI::Option* o_data = nullptr;
  CLI::Option* o_seed = nullptr;
  CLI::Option* o_counts[7] = {};
};

void add_gen_options(CLI::App* cmd, GenOpts& o) {
  o.o_config = cmd->add_option("--config", o.config_path,
                               "JSON config file; explicit flags override its values");
  o.o_out = cmd->add_option("--out", o.out_root, "output root (default $UVLM_OUT or ./uvlm-out)");
  o.o_data = cmd->add_option("--data", o.data_dir, "corpus directory (default <out>/corpus)");
  o.o_seed = cmd->add_option("--seed", o.seed, "corpus seed");
  o.o_counts[0] = cmd->add_option("--align-images", o.counts.align_images, "caption images");
  o.o_counts[1] = cmd->add_option("--align-videos", o.counts.align_videos, "caption videos");
  o.o_counts[2] = cmd->add_option("--align-val-pairs", o.counts.align_val_pairs,
                                  "matched image/video pairs for the alignment-gap probe");
  o.o_counts[3] =
      cmd->add_option("--sft-train-images", o.counts.sft_train_images, "instruction images");
  o.o_counts[4] =
      cmd->add_option("--sft-train-videos", o.counts.sft_train_videos, "instruction videos");
  o.o_counts[5] =
      cmd->add_option("--sft-test-images", o.counts.sft_test_images, "held-out images");
  o.o_counts[6] =
      cmd->add_option("--sft-test-videos", o.counts.sft_test_videos, "held-out videos");
}

nlohmann::json gen_config_json(const GenOpts& o, const fs::path& dest) {
  nlohmann::json j;
  j["subcommand"] = "gen-data";
  j["seed"] = o.seed;
  j["data_dir"] = dest.string();
  j["align_images"] = o.counts.align_images;
  j["align_videos"] = o.counts.align_videos;
  j["align_val_pairs"] = o.counts.align_val_pairs;
  j["sft_train_images"] = o.counts.sft_train_images;
  j["sft_train_videos"] = o.counts.sft_train_videos;
  j["sft_test_images"] = o.counts.sft_test_images;
  j["sft_test_videos"] = o.counts.sft_test_videos;
  return j;
}

int cmd_gen_data(GenOpts& o) {
  if (o.o_config->count()) {
    nlohmann::json j = read_json_file(o.config_path);
    static const std::set<std::string> known = {
        "subcommand",       "seed",           "data_dir",        "align_images",
        "align_videos",     "align_val_pairs", "sft_train_images", "sft_train_videos",
        "sft_test_images",  "sft_test_videos"};
    for (const auto& [key, value] : j.items())
      require(known.count(key) > 0, o.config_path + ": unknown config key \"" + key + "\"");
    if (j.contains("subcommand"))
      require(j["subcommand"] == "gen-data",
              o.config_path + ": config is for a different subcommand");
    try {
      if (!o.o_seed->count()) o.seed = j.value("seed", o.seed);
      if (!o.o_data->count() && j.contains("data_dir")) o.data_dir = j["data_dir"];
      CorpusConfig& c = o.counts;
      if (!o.o_counts[0]->count()) c.align_images = j.value("align_images", c.align_images);
      if (!o.o_counts[1]->count()) c.align_videos = j.value("align_videos", c.align_videos);
      if (!o.o_counts[2]->count()) c.align_val_pairs = j.value("align_val_pairs", c.align_val_pairs);
      if (!o.o_counts[3]->count())
        c.sft_train_images = j.value("sft_train_images", c.sft_train_images);
      if (!o.o_counts[4]->count())
        c.sft_train_videos = j.value("sft_train_videos", c.sft_train_videos);
      if (!o.o_counts[5]->count()) c.sft_test_images = j.value("sft_test_images", c.sft_test_images);
      if (!o.o_counts[6]->count()) c.sft_test_videos = j.value("sft_test_videos", c.sft_test_videos);
    } catch (const nlohmann::json::exception& e) {
      throw InvalidArgument(o.config_path + ": " + e.what());
    }
  }

  fs::path root = o.o_out->count() ? fs::path(o.out_root) : default_root();
  fs::path dest = !o.data_dir.empty() ? fs::path(o.data_dir) : root / "corpus";
  o.counts.validate();

  fs::remove_all(dest / "payloads");
  fs::remove(dest / "manifest.jsonl");
  log_line("generating corpus with seed " + std::to_string(o.seed));
  CorpusManifest m = gen_corpus(o.counts, o.seed, dest);
  write_snapshot(dest, gen_config_json(o, dest));
  log_line("wrote " + std::to_string(m.records.size()) + " records to " + dest.string());
  return 0;
}

// ---------------------------------------------------------------------------
// align / mae-pretrain / train
// ---------------------------------------------------------------------------

int cmd_align(const StageOpts& o) {
  ResolvedStage r = resolve_stage("align", o, "align");
  CorpusManifest corpus = load_corpus(r.cfg.data_dir);
  log_line("corpus: " + std::to_string(corpus.records.size()) + " records from " +
           r.cfg.data_dir.string());

  ModelState st = ModelState::init(r.cfg.dims, r.cfg.seed);
  MetricsLog metrics = open_metrics(r.cfg);
  write_snapshot(r.cfg.out_dir, run_config_json(r.cfg));

  AlignStats stats = run_align(st, r.cfg, corpus, &metrics);
  log_line("phase 1 (image-text) loss " + fmt4(stats.phase1_first_loss) + " -> " +
           fmt4(stats.phase1_last_loss));
  log_line("phase 2 (video-text) loss " + fmt4(stats.phase2_first_loss) + " -> " +
           fmt4(stats.phase2_last_loss));

  fs::path model_path = r.cfg.out_dir / "model.uvck";
  save_checkpoint(st, model_path);
  log_line("checkpoint " + model_path.string());
  return 0;
}

int cmd_mae(const StageOpts& o) {
  ResolvedStage r = resolve_stage("mae", o, "mae");
  CorpusManifest corpus = load_corpus(r.cfg.data_dir);
  log_line("corpus: " + std::to_string(corpus.records.size()) + " records from " +
           r.cfg.data_dir.string());

  ModelState st = ModelState::init(r.cfg.dims, r.cfg.seed);
  MetricsLog metrics = open_metrics(r.cfg);
  write_snapshot(r.cfg.out_dir, run_config_json(r.cfg));

  MaeStats stats = run_mae(st, r.cfg, corpus, &metrics);
  require(!stats.loss_trace.empty(), "mae produced no steps");
  log_line("reconstruction loss " + fmt4(stats.loss_trace.front()) + " -> " +
           fmt4(stats.loss_trace.back()) + " over " + std::to_string(stats.loss_trace.size()) +
           " steps");

  fs::path model_path = r.cfg.out_dir / "model.uvck";
  save_checkpoint(st, model_path);
  log_line("checkpoint " + model_path.string());
  return 0;
}

int cmd_train(const std::string& stage, const StageOpts& o) {
  ResolvedStage r = resolve_stage(stage, o, stage == "1" ? "stage1" : "stage2");
  RunConfig& cfg = r.cfg;
  CorpusManifest corpus = load_corpus(cfg.data_dir);
  fs::path model_path = cfg.out_dir / "model.uvck";

  ModelState st;
  std::optional<OptimizerSnapshot> opt;
  if (cfg.resume) {
    Checkpoint ck = load_checkpoint_at(model_path, "no stage " + stage + " checkpoint to resume");
    st = std::move(ck.state);
    opt = std::move(ck.opt);
    log_line("resuming stage " + stage + " at step " + std::to_string(st.step));
  } else {
    if (cfg.init_checkpoint.empty())
      cfg.init_checkpoint = r.root / (stage == "1" ? "align" : "stage1") / "model.uvck";
    std::string hint = stage == "1"
                           ? "train --stage 1 requires an aligned encoder checkpoint "
                             "(run `uvlm align` first, or point --init at one)"
                           : "train --stage 2 requires a stage 1 checkpoint "
                             "(run `uvlm train --stage 1` first, or point --init at one)";
    Checkpoint ck = load_checkpoint_at(cfg.init_checkpoint, hint);
    st = std::move(ck.state);
    st.step = 0;
  }

  cfg.dims = st.dims;
  MetricsLog metrics = open_metrics(cfg);
  write_snapshot(cfg.out_dir, run_config_json(cfg));

  log_line("training stage " + stage + " for " + std::to_string(cfg.epochs) + " epochs, batch " +
           std::to_string(cfg.batch_size) + ", lr " + fmt4(cfg.lr));
  StageResult result = stage == "1"
                           ? train_stage1(st, cfg, corpus, opt ? &*opt : nullptr, &metrics)
                           : train_stage2(st, cfg, corpus, opt ? &*opt : nullptr, &metrics);
  if (!result.loss_trace.empty())
    log_line("loss " + fmt4(result.loss_trace.front()) + " -> " + fmt4(result.loss_trace.back()) +
             " over " + std::to_string(result.loss_trace.size()) + " steps (final step " +
             std::to_string(result.final_step) + ")");
  else
    log_line("no steps to run (already past this run's plan)");

  save_checkpoint(st, model_path, &result.opt);
  log_line("checkpoint " + model_path.string());
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOpts {
  std::string suite, checkpoint, out_root, data_dir, strategy, token_mode = "pooled";
  uint64_t seed = 2024;
  int pope_n = 60;

  CLI::Option* o_out = nullptr;
  CLI::Option* o_data = nullptr;
  CLI::Option* o_ckpt = nullptr;
};

int cmd_eval(const EvalOpts& o) {
  fs::path root = o.o_out->count() ? fs::path(o.out_root) : default_root();
  fs::path out_dir = root / "eval" / o.suite;
  fs::path ckpt = o.o_ckpt->count() ? fs::path(o.checkpoint) : root / "stage2" / "model.uvck";
  fs::path data = o.o_data->count() ? fs::path(o.data_dir) : root / "corpus";

  CorpusManifest corpus = load_corpus(data);
  Checkpoint ck = load_checkpoint_at(
      ckpt, "eval requires a trained checkpoint (run `uvlm train --stage 2` first, "
            "or pass --checkpoint)");
  ModelState st = std::move(ck.state);
  TokenMode mode = token_mode_from(o.token_mode);

  nlohmann::json snapshot;
  snapshot["subcommand"] = "eval";
  snapshot["suite"] = o.suite;
  snapshot["seed"] = o.seed;
  snapshot["checkpoint"] = ckpt.string();
  snapshot["data_dir"] = data.string();
  snapshot["out_dir"] = out_dir.string();
  snapshot["token_mode"] = o.token_mode;
  if (o.suite == "pope") {
    snapshot["pope_n"] = o.pope_n;
    snapshot["strategy"] = o.strategy;
  }
  write_snapshot(out_dir, snapshot);

  std::ostringstream csv;
  if (o.suite == "qa") {
    QaOutcome img = eval_qa(st, corpus, "test", Modality::image, mode);
    QaOutcome vid = eval_qa(st, corpus, "test", Modality::video, mode);
    int correct = img.correct + vid.correct;
    int total = img.total + vid.total;
    double overall = 100.0 * correct / total;
    csv << "metric,value\n";
    csv << "image_qa_accuracy," << fmt1(img.accuracy) << "\n";
    csv << "image_qa_correct," << img.correct << "\n";
    csv << "image_qa_total," << img.total << "\n";
    csv << "video_qa_accuracy," << fmt1(vid.accuracy) << "\n";
    csv << "video_qa_correct," << vid.correct << "\n";
    csv << "video_qa_total," << vid.total << "\n";
    csv << "overall_qa_accuracy," << fmt1(overall) << "\n";
    std::cout << "image qa " << fmt1(img.accuracy) << " (" << img.correct << "/" << img.total
              << ")\n";
    std::cout << "video qa " << fmt1(vid.accuracy) << " (" << vid.correct << "/" << vid.total
              << ")\n";
    std::cout << "overall qa " << fmt1(overall) << " (" << correct << "/" << total << ")\n";
  } else if (o.suite == "pope") {
    std::vector<std::string> strategies =
        o.strategy.empty() ? std::vector<std::string>{"random", "popular", "adversarial"}
                           : std::vector<std::string>{o.strategy};
    csv << "strategy,questions,accuracy,f1,yes_rate,tp,fp,tn,fn,unparseable\n";
    for (const std::string& strat : strategies) {
      PopeQuestionSet set = pope_build(corpus, strat, o.pope_n, o.seed);
      PopeReport rep = eval_pope(st, corpus, set, mode);
      csv << strat << "," << rep.total << "," << fmt1(rep.accuracy) << "," << fmt1(rep.f1) << ","
          << fmt1(rep.yes_rate) << "," << rep.tp << "," << rep.fp << "," << rep.tn << ","
          << rep.fn << "," << rep.unparseable << "\n";
      std::cout << "pope " << strat << ": accuracy " << fmt1(rep.accuracy) << ", f1 "
                << fmt1(rep.f1) << ", yes-rate " << fmt1(rep.yes_rate) << " (n=" << rep.total
                << ")\n";
    }
  } else {
    double gap = eval_alignment_gap(st, corpus);
    csv << "metric,value\n";
    csv << "alignment_gap," << fmt6(gap) << "\n";
    std::cout << "alignment gap " << fmt6(gap) << "\n";
  }

  fs::path results = out_dir / "results.csv";
  std::ofstream os = io::open_out(results);
  os << csv.str();
  if (!os) throw Error("short write: " + results.string());
  log_line("results " + results.string());
  return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

nlohmann::json settings_json(const PipelineSettings& s) {
  nlohmann::json j;
  j["token_mode"] = s.token_mode;
  j["lr"] = s.lr;
  j["temperature"] = s.temperature;
  j["mask_ratio"] = s.mask_ratio;
  j["warmup_ratio"] = s.warmup_ratio;
  j["align_epochs"] = s.align_epochs;
  j["mae_epochs"] = s.mae_epochs;
  j["stage1_epochs"] = s.stage1_epochs;
  j["stage2_epochs"] = s.stage2_epochs;
  j["align_batch"] = s.align_batch;
  j["stage1_batch"] = s.stage1_batch;
  j["stage2_batch"] = s.stage2_batch;
  j["pope_n"] = s.pope_n;
  j["pope_strategy"] = s.pope_strategy;
  j["model"] = dims_json(s.dims);
  return j;
}

PipelineSettings parse_settings(const nlohmann::json& j, const std::string& origin) {
  static const std::set<std::string> known = {
      "token_mode",   "lr",           "temperature",   "mask_ratio",    "warmup_ratio",
      "align_epochs", "mae_epochs",   "stage1_epochs", "stage2_epochs", "align_batch",
      "stage1_batch", "stage2_batch", "pope_n",        "pope_strategy", "model"};
  for (const auto& [key, value] : j.items())
    require(known.count(key) > 0, origin + ": unknown config key \"" + key + "\"");

  PipelineSettings s;
  try {
    s.token_mode = j.value("token_mode", s.token_mode);
    s.lr = j.value("lr", s.lr);
    s.temperature = j.value("temperature", s.temperature);
    s.mask_ratio = j.value("mask_ratio", s.mask_ratio);
    s.warmup_ratio = j.value("warmup_ratio", s.warmup_ratio);
    s.align_epochs = j.value("align_epochs", s.align_epochs);
    s.mae_epochs = j.value("mae_epochs", s.mae_epochs);
    s.stage1_epochs = j.value("stage1_epochs", s.stage1_epochs);
    s.stage2_epochs = j.value("stage2_epochs", s.stage2_epochs);
    s.align_batch = j.value("align_batch", s.align_batch);
    s.stage1_batch = j.value("stage1_batch", s.stage1_batch);
    s.stage2_batch = j.value("stage2_batch", s.stage2_batch);
    s.pope_n = j.value("pope_n", s.pope_n);
    s.pope_strategy = j.value("pope_strategy", s.pope_strategy);
    if (j.contains("model")) s.dims = dims_from_json(j["model"], origin);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(origin + ": " + e.what());
  }
  return s;
}

struct AblateOpts {
  std::string axis, config_path, out_root, data_dir;
  std::vector<uint64_t> seeds;
  uint64_t seed = 2024;
  int pope_n = 0;

  CLI::Option* o_config = nullptr;
  CLI::Option* o_out = nullptr;
  CLI::Option* o_data = nullptr;
  CLI::Option* o_seed = nullptr;
  CLI::Option* o_seeds = nullptr;
  CLI::Option* o_pope = nullptr;
};

int cmd_ablate(const AblateOpts& o) {
  PipelineSettings settings;
  if (o.o_config->count()) settings = parse_settings(read_json_file(o.config_path), o.config_path);
  if (o.o_pope->count()) settings.pope_n = o.pope_n;

  std::vector<uint64_t> seeds = o.seeds;
  if (seeds.empty()) seeds = {o.seed, o.seed + 1, o.seed + 2};

  fs::path root = o.o_out->count() ? fs::path(o.out_root) : default_root();
  fs::path out_dir = root / "ablate" / o.axis;
  fs::path data = o.o_data->count() ? fs::path(o.data_dir) : root / "corpus";
  CorpusManifest corpus = load_corpus(data);

  nlohmann::json snapshot;
  snapshot["subcommand"] = "ablate";
  snapshot["axis"] = o.axis;
  snapshot["seeds"] = seeds;
  snapshot["data_dir"] = data.string();
  snapshot["out_dir"] = out_dir.string();
  snapshot["settings"] = settings_json(settings);
  write_snapshot(out_dir, snapshot);

  AblationReport rep = run_ablation(o.axis, settings, seeds, corpus, out_dir, nullptr, log_line);
  std::cout << ablation_markdown(rep);
  log_line("tables " + (out_dir / ("ablation-" + o.axis + ".csv")).string() + " and .md");
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck / generate
// ---------------------------------------------------------------------------

int cmd_gradcheck(uint64_t seed, const std::string& out_root, bool out_given) {
  fs::path root = out_given ? fs::path(out_root) : default_root();
  fs::path out_dir = root / "gradcheck";
  constexpr double kTol = 1e-4;

  log_line("running finite-difference battery with seed " + std::to_string(seed));
  gradcheck::Battery battery = gradcheck::run_battery(seed);
  std::string report = gradcheck::format_report(battery, kTol);
  std::cout << report;

  nlohmann::json snapshot;
  snapshot["subcommand"] = "gradcheck";
  snapshot["seed"] = seed;
  snapshot["tolerance"] = kTol;
  snapshot["out_dir"] = out_dir.string();
  write_snapshot(out_dir, snapshot);
  fs::path report_path = out_dir / "report.txt";
  std::ofstream os = io::open_out(report_path);
  os << report;
  if (!os) throw Error("short write: " + report_path.string());
  log_line("report " + report_path.string());

  if (!battery.all_below(kTol)) throw Error("gradient check failed; see report");
  return 0;
}

struct GenerateOpts {
  std::string input, prompt, checkpoint, out_root, token_mode = "pooled";
  uint64_t seed = 2024;
  int max_new = 32;

  CLI::Option* o_out = nullptr;
  CLI::Option* o_ckpt = nullptr;
};

int cmd_generate(const GenerateOpts& o) {
  fs::path root = o.o_out->count() ? fs::path(o.out_root) : default_root();
  fs::path out_dir = root / "generate";
  fs::path ckpt = o.o_ckpt->count() ? fs::path(o.checkpoint) : root / "stage2" / "model.uvck";

  require(fs::exists(o.input), "visual input not found: " + o.input);
  Checkpoint ck = load_checkpoint_at(
      ckpt, "generate requires a trained checkpoint (run `uvlm train --stage 2` first, "
            "or pass --checkpoint)");
  ModelState st = std::move(ck.state);
  detail::FreezeGuard guard(st);

  VisualInput visual = VisualInput::load(o.input);
  TokenMode mode = token_mode_from(o.token_mode);
  Vocabulary vocab(st.dims.vocab_size);

  std::vector<int> prompt_ids{Vocabulary::kBos, Vocabulary::kUser, Vocabulary::kVis};
  for (int id : vocab.tokenize(o.prompt)) prompt_ids.push_back(id);
  prompt_ids.push_back(Vocabulary::kAssistant);

  Tensor z_v = project(st.projection, visual_feature_tokens(st, visual, mode));
  std::vector<int> generated = generate(st.lm, st.dims, prompt_ids, &z_v, o.max_new);
  std::vector<int> words;
  for (int id : generated)
    if (id > Vocabulary::kUnk) words.push_back(id);
  std::string answer = vocab.detokenize(words);

  nlohmann::json snapshot;
  snapshot["subcommand"] = "generate";
  snapshot["seed"] = o.seed;
  snapshot["checkpoint"] = ckpt.string();
  snapshot["input"] = o.input;
  snapshot["prompt"] = o.prompt;
  snapshot["max_new"] = o.max_new;
  snapshot["token_mode"] = o.token_mode;
  snapshot["out_dir"] = out_dir.string();
  write_snapshot(out_dir, snapshot);
  fs::path answer_path = out_dir / "answer.txt";
  std::ofstream os = io::open_out(answer_path);
  os << answer << "\n";
  if (!os) throw Error("short write: " + answer_path.string());

  std::cout << answer << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"video-and-image language model pipeline"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "uvlm 0.1.0");
  app.footer(
      "Typical run:\n"
      "  uvlm gen-data && uvlm align && uvlm train --stage 1 && uvlm train --stage 2\n"
      "  uvlm eval --suite qa\n"
      "All artifacts land under $UVLM_OUT (default ./uvlm-out).");

  GenOpts gen_opts;
  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic glyph corpus");
  add_gen_options(gen, gen_opts);

  StageOpts align_opts;
  CLI::App* align = app.add_subcommand("align", "contrastive image/video/text tower pretraining");
  add_stage_options(align, align_opts, StageKind::align);

  StageOpts mae_opts;
  CLI::App* mae = app.add_subcommand("mae-pretrain",
                                     "masked-reconstruction image tower pretraining");
  add_stage_options(mae, mae_opts, StageKind::mae);

  StageOpts train_opts;
  std::string train_stage;
  CLI::App* train = app.add_subcommand("train", "projection/LM instruction training");
  train->add_option("--stage", train_stage, "1 = projection only, 2 = projection and LM")
      ->required()
      ->check(CLI::IsMember({"1", "2"}));
  add_stage_options(train, train_opts, StageKind::train);

  EvalOpts eval_opts;
  CLI::App* eval = app.add_subcommand("eval", "score a trained checkpoint");
  eval->add_option("--suite", eval_opts.suite, "qa, pope, or gap")
      ->required()
      ->check(CLI::IsMember({"qa", "pope", "gap"}));
  eval_opts.o_out = eval->add_option("--out", eval_opts.out_root,
                                     "output root (default $UVLM_OUT or ./uvlm-out)");
  eval_opts.o_data = eval->add_option("--data", eval_opts.data_dir,
                                      "corpus directory (default <out>/corpus)");
  eval_opts.o_ckpt = eval->add_option("--checkpoint", eval_opts.checkpoint,
                                      "checkpoint to score (default <out>/stage2/model.uvck)");
  eval->add_option("--seed", eval_opts.seed, "question sampling seed");
  eval->add_option("--pope-n", eval_opts.pope_n, "questions per polling strategy");
  eval->add_option("--strategy", eval_opts.strategy,
                   "restrict polling to one strategy: random, popular, or adversarial");
  eval->add_option("--token-mode", eval_opts.token_mode,
                   "visual token mode: pooled or per_frame");

  AblateOpts ablate_opts;
  CLI::App* ablate = app.add_subcommand("ablate", "train and compare ablation arms");
  ablate->add_option("--axis", ablate_opts.axis, "representation or joint")
      ->required()
      ->check(CLI::IsMember({"representation", "joint"}));
  ablate_opts.o_config = ablate->add_option("--config", ablate_opts.config_path,
                                            "JSON pipeline settings for every arm");
  ablate_opts.o_out = ablate->add_option("--out", ablate_opts.out_root,
                                         "output root (default $UVLM_OUT or ./uvlm-out)");
  ablate_opts.o_data = ablate->add_option("--data", ablate_opts.data_dir,
                                          "corpus directory (default <out>/corpus)");
  ablate_opts.o_seed = ablate->add_option("--seed", ablate_opts.seed,
                                          "base seed; arms run seed, seed+1, seed+2");
  ablate_opts.o_seeds =
      ablate->add_option("--seeds", ablate_opts.seeds, "explicit seed list (at least three)")
          ->delimiter(',');
  ablate_opts.o_pope = ablate->add_option("--pope-n", ablate_opts.pope_n,
                                          "polling questions per arm (0 skips polling)");

  uint64_t gradcheck_seed = 2024;
  std::string gradcheck_out;
  CLI::App* gradcheck_cmd =
      app.add_subcommand("gradcheck", "finite-difference check of every autodiff primitive");
  gradcheck_cmd->add_option("--seed", gradcheck_seed, "battery seed");
  CLI::Option* gradcheck_o_out = gradcheck_cmd->add_option(
      "--out", gradcheck_out, "output root (default $UVLM_OUT or ./uvlm-out)");

  GenerateOpts generate_opts;
  CLI::App* generate_cmd = app.add_subcommand("generate", "answer one prompt about one input");
  generate_cmd->add_option("--input", generate_opts.input, "visual input payload (.uvlm)")
      ->required();
  generate_cmd->add_option("--prompt", generate_opts.prompt, "question to ask")->required();
  generate_opts.o_ckpt =
      generate_cmd->add_option("--checkpoint", generate_opts.checkpoint,
                               "checkpoint to use (default <out>/stage2/model.uvck)");
  generate_opts.o_out = generate_cmd->add_option("--out", generate_opts.out_root,
                                                 "output root (default $UVLM_OUT or ./uvlm-out)");
  generate_cmd->add_option("--seed", generate_opts.seed, "run seed");
  generate_cmd->add_option("--max-new", generate_opts.max_new, "generation length cap");
  generate_cmd->add_option("--token-mode", generate_opts.token_mode,
                           "visual token mode: pooled or per_frame");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_opts);
    if (align->parsed()) return cmd_align(align_opts);
    if (mae->parsed()) return cmd_mae(mae_opts);
    if (train->parsed()) return cmd_train(train_stage, train_opts);
    if (eval->parsed()) return cmd_eval(eval_opts);
    if (ablate->parsed()) return cmd_ablate(ablate_opts);
    if (gradcheck_cmd->parsed())
      return cmd_gradcheck(gradcheck_seed, gradcheck_out, gradcheck_o_out->count() > 0);
    if (generate_cmd->parsed()) return cmd_generate(generate_opts);
    return 1;
  } catch (const InvalidArgument& e) {
    std::cerr << "uvlm: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "uvlm: " << e.what() << "\n";
    return 2;
  }
}
