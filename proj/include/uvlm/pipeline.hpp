#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "uvlm/corpus.hpp"
#include "uvlm/encoders.hpp"
#include "uvlm/io.hpp"
#include "uvlm/lm.hpp"
#include "uvlm/optim.hpp"
#include "uvlm/sampler.hpp"
#include "uvlm/tokenizer.hpp"

namespace uvlm {

// ---------------------------------------------------------------------------
// Model state: the five parameter groups plus RNG state and a step counter.
// The typed parameter structs alias the group tensors, so loading data into a
// group is immediately visible to the forward functions.
// ---------------------------------------------------------------------------

struct ModelState {
  ModelDims dims;
  ParamGroup image_tower_g{"image_tower", {}};
  ParamGroup video_tower_g{"video_tower", {}};
  ParamGroup text_tower_g{"text_tower", {}};
  ParamGroup projection_g{"projection", {}};
  ParamGroup lm_g{"lm", {}};
  TowerParams image_tower;
  TowerParams video_tower;
  TextTowerParams text_tower;
  ProjectionParams projection;
  LmParams lm;
  Rng rng{1};
  uint64_t step = 0;

  ModelState() = default;
  ModelState(const ModelState&) = delete;
  ModelState& operator=(const ModelState&) = delete;
  ModelState(ModelState&&) = default;
  ModelState& operator=(ModelState&&) = default;

  static ModelState init(const ModelDims& dims, uint64_t seed) {
    dims.validate();
    ModelState st;
    st.dims = dims;
    st.rng = Rng(seed);
    ParamBuilder ib(st.image_tower_g, st.rng);
    st.image_tower = TowerParams::make(ib, dims);
    ParamBuilder vb(st.video_tower_g, st.rng);
    st.video_tower = TowerParams::make(vb, dims);
    ParamBuilder tb(st.text_tower_g, st.rng);
    st.text_tower = TextTowerParams::make(tb, dims);
    ParamBuilder pb(st.projection_g, st.rng);
    st.projection = ProjectionParams::make(pb, dims);
    ParamBuilder lb(st.lm_g, st.rng);
    st.lm = LmParams::make(lb, dims);
    return st;
  }

  std::vector<ParamGroup*> groups() {
    return {&image_tower_g, &video_tower_g, &text_tower_g, &projection_g, &lm_g};
  }
  std::vector<const ParamGroup*> groups() const {
    return {&image_tower_g, &video_tower_g, &text_tower_g, &projection_g, &lm_g};
  }
};

// Encodes one visual input through whichever frozen-or-not tower owns its
// modality, at the configured select layer.
inline Tensor visual_feature_tokens(const ModelState& st, const VisualInput& v, TokenMode mode) {
  if (v.tag == Modality::image)
    return encode_image(st.image_tower, st.dims, v, st.dims.select_layer).tokens;
  return encode_video(st.video_tower, st.dims, v, st.dims.frames_k, st.dims.select_layer, mode)
      .tokens;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "UVCK", version, model dims, then per group the name, a
// trainable flag, and every tensor (shape + payload), then RNG state and the
// step counter, then an optional optimizer-moment section so an interrupted
// run resumes bit-exactly.
// ---------------------------------------------------------------------------

constexpr uint16_t kCheckpointVersion = 1;

struct OptimizerSnapshot {
  std::vector<float> moments;
  uint64_t steps = 0;
};

struct Checkpoint {
  ModelState state;
  std::optional<OptimizerSnapshot> opt;
};

namespace detail {

inline std::vector<uint32_t> dims_fields(const ModelDims& d) {
  return {uint32_t(d.image_size), uint32_t(d.channels),  uint32_t(d.patch),
          uint32_t(d.d_v),        uint32_t(d.enc_blocks), uint32_t(d.enc_heads),
          uint32_t(d.d),          uint32_t(d.lm_blocks),  uint32_t(d.lm_heads),
          uint32_t(d.context),    uint32_t(d.vocab_size), uint32_t(d.text_context),
          uint32_t(d.frames_k),   uint32_t(int32_t(d.select_layer))};
}

inline ModelDims dims_from_fields(const std::vector<uint32_t>& f) {
  ModelDims d;
  d.image_size = int(f[0]);
  d.channels = int(f[1]);
  d.patch = int(f[2]);
  d.d_v = int(f[3]);
  d.enc_blocks = int(f[4]);
  d.enc_heads = int(f[5]);
  d.d = int(f[6]);
  d.lm_blocks = int(f[7]);
  d.lm_heads = int(f[8]);
  d.context = int(f[9]);
  d.vocab_size = int(f[10]);
  d.text_context = int(f[11]);
  d.frames_k = int(f[12]);
  d.select_layer = int(int32_t(f[13]));
  return d;
}

}  // namespace detail

inline void save_checkpoint(const ModelState& st, const std::filesystem::path& path,
                            const OptimizerSnapshot* opt = nullptr) {
  std::ofstream os = io::open_out(path);
  os.write("UVCK", 4);
  io::write_u16(os, kCheckpointVersion);
  std::vector<uint32_t> fields = detail::dims_fields(st.dims);
  io::write_u16(os, uint16_t(fields.size()));
  for (uint32_t f : fields) io::write_u32(os, f);

  auto groups = st.groups();
  io::write_u32(os, uint32_t(groups.size()));
  for (const ParamGroup* g : groups) {
    io::write_string(os, g->name);
    io::write_u8(os, g->trainable() ? 1 : 0);
    io::write_u32(os, uint32_t(g->items.size()));
    for (const auto& [_, t] : g->items) {
      io::write_u8(os, uint8_t(t.shape().size()));
      for (int d : t.shape()) io::write_u32(os, uint32_t(d));
      for (float v : t.data()) io::write_f32(os, v);
    }
  }
  io::write_u64(os, st.rng.state());
  io::write_u64(os, st.rng.inc());
  io::write_u64(os, st.step);

  io::write_u8(os, opt ? 1 : 0);
  if (opt) {
    io::write_u64(os, uint64_t(opt->moments.size()));
    for (float v : opt->moments) io::write_f32(os, v);
    io::write_u64(os, opt->steps);
  }
  if (!os) throw Error("short write: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is = io::open_in(path);
  io::Reader r(is, path.string());
  r.expect_magic("UVCK");
  uint16_t version = r.u16();
  if (version != kCheckpointVersion)
    r.fail("unsupported checkpoint version " + std::to_string(version));
  uint16_t n_fields = r.u16();
  if (n_fields != detail::dims_fields(ModelDims{}).size())
    r.fail("unexpected model-dims field count " + std::to_string(n_fields));
  std::vector<uint32_t> fields(n_fields);
  for (auto& f : fields) f = r.u32();

  Checkpoint ck;
  ck.state = ModelState::init(detail::dims_from_fields(fields), 0);
  auto groups = ck.state.groups();
  uint32_t n_groups = r.u32();
  if (n_groups != groups.size())
    r.fail("expected " + std::to_string(groups.size()) + " parameter groups, found " +
           std::to_string(n_groups));
  for (ParamGroup* g : groups) {
    std::string name = r.str();
    if (name != g->name) r.fail("unknown group name \"" + name + "\" (expected " + g->name + ")");
    bool trainable = r.u8() != 0;
    uint32_t n_tensors = r.u32();
    if (n_tensors != g->items.size())
      r.fail("group " + g->name + ": expected " + std::to_string(g->items.size()) +
             " tensors, found " + std::to_string(n_tensors));
    for (auto& [item_name, t] : g->items) {
      uint8_t rank = r.u8();
      Shape shape(rank);
      for (auto& d : shape) d = int(r.u32());
      if (shape != t.shape())
        r.fail("group " + g->name + "/" + item_name + ": shape " + shape_str(shape) +
               " does not match expected " + shape_str(t.shape()));
      r.f32_block(t.data().data(), t.data().size());
    }
    g->set_trainable(trainable);
  }
  uint64_t rng_state = r.u64();
  uint64_t rng_inc = r.u64();
  ck.state.rng.restore(rng_state, rng_inc);
  ck.state.step = r.u64();

  if (r.u8()) {
    OptimizerSnapshot snap;
    snap.moments.resize(r.u64());
    r.f32_block(snap.moments.data(), snap.moments.size());
    snap.steps = r.u64();
    ck.opt = std::move(snap);
  }
  if (!r.at_eof()) r.fail("trailing bytes after checkpoint data");
  return ck;
}

// ---------------------------------------------------------------------------
// Run configuration: JSON file with per-stage defaults; the CLI layers flag
// overrides on top and every run writes back the resolved snapshot.
// ---------------------------------------------------------------------------

struct RunConfig {
  std::string stage;  // align | mae | 1 | 2
  ModelDims dims;
  uint64_t seed = 2024;
  double lr = 1e-3;  // published settings: 1e-3 (stage 1), 2e-5 (stage 2)
  int batch_size = 32;
  int epochs = 1;
  double warmup_ratio = 0.03;
  std::string token_mode = "pooled";
  double temperature = 0.07;   // align InfoNCE
  double mask_ratio = 0.5;     // mae
  double weight_decay = 0.0;   // stages 1 and 2
  int log_every = 10;
  int max_steps = 0;  // optimizer steps this invocation may run; 0 = no cap
  std::filesystem::path data_dir;
  std::filesystem::path out_dir;
  std::filesystem::path init_checkpoint;
  bool resume = false;

  void validate() const {
    require(stage == "align" || stage == "mae" || stage == "1" || stage == "2",
            "config: stage must be align, mae, 1, or 2");
    require(lr > 0 && batch_size >= 1 && epochs >= 1, "config: positive lr/batch/epochs required");
    require(warmup_ratio >= 0 && warmup_ratio < 1, "config: warmup_ratio in [0,1)");
    require(weight_decay >= 0, "config: weight_decay must be non-negative");
    require(max_steps >= 0, "config: max_steps must be non-negative");
    require(log_every >= 1, "config: log_every must be at least 1");
    require(!data_dir.empty(), "config: data_dir required");
    require(!out_dir.empty(), "config: out_dir required");
    token_mode_from(token_mode);
    dims.validate();
  }
};

// Stage-appropriate desk-scale defaults, tuned so the full pipeline finishes
// in minutes on one core.
inline void apply_stage_defaults(RunConfig& cfg, const std::string& stage) {
  cfg.stage = stage;
  if (stage == "align") {
    cfg.lr = 1e-3;
    cfg.batch_size = 32;
    cfg.epochs = 10;
  } else if (stage == "mae") {
    cfg.lr = 1e-3;
    cfg.batch_size = 32;
    cfg.epochs = 10;
  } else if (stage == "1") {
    cfg.lr = 1e-3;
    cfg.batch_size = 32;
    cfg.epochs = 4;
  } else if (stage == "2") {
    cfg.lr = 1e-3;
    cfg.batch_size = 16;
    cfg.epochs = 6;
  }
}

inline nlohmann::json run_config_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["stage"] = cfg.stage;
  j["seed"] = cfg.seed;
  j["lr"] = cfg.lr;
  j["batch_size"] = cfg.batch_size;
  j["epochs"] = cfg.epochs;
  j["warmup_ratio"] = cfg.warmup_ratio;
  j["token_mode"] = cfg.token_mode;
  j["temperature"] = cfg.temperature;
  j["mask_ratio"] = cfg.mask_ratio;
  j["weight_decay"] = cfg.weight_decay;
  j["log_every"] = cfg.log_every;
  j["max_steps"] = cfg.max_steps;
  j["data_dir"] = cfg.data_dir.string();
  j["out_dir"] = cfg.out_dir.string();
  j["init_checkpoint"] = cfg.init_checkpoint.string();
  j["resume"] = cfg.resume;
  nlohmann::json m;
  m["image_size"] = cfg.dims.image_size;
  m["channels"] = cfg.dims.channels;
  m["patch"] = cfg.dims.patch;
  m["d_v"] = cfg.dims.d_v;
  m["enc_blocks"] = cfg.dims.enc_blocks;
  m["enc_heads"] = cfg.dims.enc_heads;
  m["d"] = cfg.dims.d;
  m["lm_blocks"] = cfg.dims.lm_blocks;
  m["lm_heads"] = cfg.dims.lm_heads;
  m["context"] = cfg.dims.context;
  m["vocab_size"] = cfg.dims.vocab_size;
  m["text_context"] = cfg.dims.text_context;
  m["frames_k"] = cfg.dims.frames_k;
  m["select_layer"] = cfg.dims.select_layer;
  j["model"] = m;
  return j;
}

inline RunConfig parse_run_config(const nlohmann::json& j, const std::string& origin) {
  static const std::set<std::string> known = {
      "stage",     "seed",        "lr",          "batch_size",      "epochs",
      "warmup_ratio", "token_mode", "temperature", "mask_ratio",     "log_every",
      "max_steps", "data_dir",    "out_dir",     "init_checkpoint", "resume",
      "weight_decay", "model"};
  static const std::set<std::string> known_model = {
      "image_size", "channels",  "patch",    "d_v",        "enc_blocks",
      "enc_heads",  "d",         "lm_blocks", "lm_heads",  "context",
      "vocab_size", "text_context", "frames_k", "select_layer"};
  for (const auto& [key, _] : j.items())
    require(known.count(key) > 0, origin + ": unknown config key \"" + key + "\"");

  RunConfig cfg;
  if (j.contains("stage")) apply_stage_defaults(cfg, j["stage"].get<std::string>());
  try {
    cfg.seed = j.value("seed", cfg.seed);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.warmup_ratio = j.value("warmup_ratio", cfg.warmup_ratio);
    cfg.token_mode = j.value("token_mode", cfg.token_mode);
    cfg.temperature = j.value("temperature", cfg.temperature);
    cfg.mask_ratio = j.value("mask_ratio", cfg.mask_ratio);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    cfg.log_every = j.value("log_every", cfg.log_every);
    cfg.max_steps = j.value("max_steps", cfg.max_steps);
    cfg.data_dir = j.value("data_dir", cfg.data_dir.string());
    cfg.out_dir = j.value("out_dir", cfg.out_dir.string());
    cfg.init_checkpoint = j.value("init_checkpoint", cfg.init_checkpoint.string());
    cfg.resume = j.value("resume", cfg.resume);
    if (j.contains("model")) {
      const nlohmann::json& m = j["model"];
      for (const auto& [key, _] : m.items())
        require(known_model.count(key) > 0, origin + ": unknown model key \"" + key + "\"");
      cfg.dims.image_size = m.value("image_size", cfg.dims.image_size);
      cfg.dims.channels = m.value("channels", cfg.dims.channels);
      cfg.dims.patch = m.value("patch", cfg.dims.patch);
      cfg.dims.d_v = m.value("d_v", cfg.dims.d_v);
      cfg.dims.enc_blocks = m.value("enc_blocks", cfg.dims.enc_blocks);
      cfg.dims.enc_heads = m.value("enc_heads", cfg.dims.enc_heads);
      cfg.dims.d = m.value("d", cfg.dims.d);
      cfg.dims.lm_blocks = m.value("lm_blocks", cfg.dims.lm_blocks);
      cfg.dims.lm_heads = m.value("lm_heads", cfg.dims.lm_heads);
      cfg.dims.context = m.value("context", cfg.dims.context);
      cfg.dims.vocab_size = m.value("vocab_size", cfg.dims.vocab_size);
      cfg.dims.text_context = m.value("text_context", cfg.dims.text_context);
      cfg.dims.frames_k = m.value("frames_k", cfg.dims.frames_k);
      cfg.dims.select_layer = m.value("select_layer", cfg.dims.select_layer);
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(origin + ": " + e.what());
  }
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is = io::open_in(path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return parse_run_config(j, path.string());
}

// ---------------------------------------------------------------------------
// Metrics stream: CSV rows of step,stage,split,metric,value.
// ---------------------------------------------------------------------------

class MetricsLog {
 public:
  MetricsLog() = default;

  explicit MetricsLog(const std::filesystem::path& path) {
    bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    os_.open(path, std::ios::app);
    if (!os_) throw Error("cannot open metrics log: " + path.string());
    if (fresh) os_ << "step,stage,split,metric,value\n";
  }

  void log(uint64_t step, const std::string& stage, const std::string& split,
           const std::string& metric, double value) {
    if (!os_.is_open()) return;
    os_ << step << "," << stage << "," << split << "," << metric << "," << value << "\n";
    os_.flush();
  }

 private:
  std::ofstream os_;
};

// ---------------------------------------------------------------------------
// Stages 1 and 2: answer-masked autoregressive training over mixed batches.
// Towers are frozen in both, so visual features are precomputed once per
// record; stage 1 trains only the projection, stage 2 also the LM.
// ---------------------------------------------------------------------------

struct StageResult {
  std::vector<double> loss_trace;  // one entry per optimizer step
  uint64_t final_step = 0;
  OptimizerSnapshot opt;  // moments at exit, so the caller can checkpoint a resumable run
};

namespace detail {

struct PreparedRecord {
  TrainingExample example;
  Tensor features;  // frozen-tower output, d_v wide
};

inline std::vector<PreparedRecord> prepare_records(const ModelState& st,
                                                   const CorpusManifest& corpus,
                                                   const std::string& stage_tag,
                                                   Modality modality, TokenMode mode,
                                                   const Vocabulary& vocab) {
  std::vector<PreparedRecord> out;
  for (const CorpusRecord& rec : corpus.records) {
    if (rec.stage != stage_tag || rec.split != "train" || rec.modality != modality) continue;
    PreparedRecord p;
    p.example = build_training_example(rec.conv, vocab, /*with_visual=*/true,
                                       modality_name(rec.modality), st.dims.context);
    p.features = visual_feature_tokens(st, load_visual(corpus, rec), mode);
    require(!p.features.requires_grad(),
            "training stages expect frozen towers before feature caching");
    out.push_back(std::move(p));
  }
  return out;
}

inline StageResult masked_lm_training(ModelState& st, const RunConfig& cfg,
                                      const CorpusManifest& corpus, bool train_lm,
                                      const OptimizerSnapshot* opt_resume, MetricsLog* metrics) {
  const std::string stage_tag = train_lm ? "sft" : "align";
  const std::string stage_name = train_lm ? "2" : "1";

  // a fresh run starts counting from zero; with an optimizer snapshot the
  // loaded step counter marks how many batches to fast-forward past
  if (opt_resume == nullptr) st.step = 0;

  // freeze schedule: towers never train here; the lm only in stage 2
  st.image_tower_g.set_trainable(false);
  st.video_tower_g.set_trainable(false);
  st.text_tower_g.set_trainable(false);
  st.projection_g.set_trainable(true);
  st.lm_g.set_trainable(train_lm);

  Vocabulary vocab(st.dims.vocab_size);
  TokenMode mode = token_mode_from(cfg.token_mode);
  std::vector<PreparedRecord> images =
      prepare_records(st, corpus, stage_tag, Modality::image, mode, vocab);
  std::vector<PreparedRecord> videos =
      prepare_records(st, corpus, stage_tag, Modality::video, mode, vocab);
  require(!images.empty() || !videos.empty(),
          "stage " + stage_name + ": no training records with stage tag \"" + stage_tag + "\"");

  std::vector<Tensor> params = st.projection_g.tensors();
  if (train_lm) {
    std::vector<Tensor> lm_params = st.lm_g.tensors();
    params.insert(params.end(), lm_params.begin(), lm_params.end());
  }
  AdamW::Config opt_cfg;
  opt_cfg.weight_decay = cfg.weight_decay;
  AdamW opt(params, opt_cfg);
  if (opt_resume != nullptr)
    opt.restore_moments(opt_resume->moments, int64_t(opt_resume->steps));

  int per_epoch = (int(images.size() + videos.size()) + cfg.batch_size - 1) / cfg.batch_size;
  Schedule sched{cfg.lr, cfg.epochs * per_epoch, cfg.warmup_ratio};

  StageResult result;
  auto finish = [&]() {
    result.final_step = st.step;
    result.opt.moments = opt.moments_blob();
    result.opt.steps = uint64_t(opt.step_count());
  };
  uint64_t executed = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // the batch plan is a pure function of (seed, epoch) so an interrupted
    // run can rebuild it and fast-forward to the saved step
    Rng epoch_rng(mix_seed(cfg.seed, uint64_t(epoch)));
    std::vector<Batch> batches =
        mixed_batches(int(images.size()), int(videos.size()), cfg.batch_size, epoch_rng);
    for (size_t bi = 0; bi < batches.size(); ++bi) {
      uint64_t global = uint64_t(epoch) * uint64_t(per_epoch) + bi;
      if (global < st.step) continue;

      std::vector<Tensor> losses;
      try {
        for (const BatchItem& item : batches[bi]) {
          PreparedRecord& rec =
              item.modality == Modality::image ? images[size_t(item.index)]
                                               : videos[size_t(item.index)];
          Tensor z_v = project(st.projection, rec.features);
          AssembledSequence seq =
              assemble(st.lm, st.dims, rec.example.ids, rec.example.mask, &z_v);
          losses.push_back(lm_loss(st.lm, st.dims, seq));
        }
        std::vector<float> w(losses.size(), 1.0f / float(losses.size()));
        Tensor loss = weighted_sum(losses, w);
        double value = loss.item();
        opt.zero_grad();
        backward(loss);
        opt.step(sched.lr_at(int(st.step)));
        result.loss_trace.push_back(value);
        if (metrics && (st.step % uint64_t(cfg.log_every) == 0))
          metrics->log(st.step, stage_name, "train", "loss", value);
      } catch (const NumericFault& e) {
        std::filesystem::path dump = cfg.out_dir / ("stage" + stage_name + "-nan-abort.uvck");
        OptimizerSnapshot snap;
        snap.moments = opt.moments_blob();
        snap.steps = uint64_t(opt.step_count());
        save_checkpoint(st, dump, &snap);
        throw Error("stage " + stage_name + ": non-finite loss at step " +
                    std::to_string(st.step) + " (epoch " + std::to_string(epoch) + ", batch " +
                    std::to_string(bi) + ", op " + e.op_name + "); state dumped to " +
                    dump.string());
      }
      ++st.step;
      ++executed;
      if (cfg.max_steps > 0 && executed >= uint64_t(cfg.max_steps)) {
        finish();
        return result;
      }
    }
  }
  finish();
  return result;
}

}  // namespace detail

inline StageResult train_stage1(ModelState& st, const RunConfig& cfg,
                                const CorpusManifest& corpus,
                                const OptimizerSnapshot* opt_resume = nullptr,
                                MetricsLog* metrics = nullptr) {
  return detail::masked_lm_training(st, cfg, corpus, /*train_lm=*/false, opt_resume, metrics);
}

inline StageResult train_stage2(ModelState& st, const RunConfig& cfg,
                                const CorpusManifest& corpus,
                                const OptimizerSnapshot* opt_resume = nullptr,
                                MetricsLog* metrics = nullptr) {
  return detail::masked_lm_training(st, cfg, corpus, /*train_lm=*/true, opt_resume, metrics);
}

// Mean answer-token NLL over one corpus slice, evaluated with every group
// frozen so no graph is built; trainable flags are restored before returning.
inline double heldout_nll(ModelState& st, const CorpusManifest& corpus,
                          const std::string& stage_tag, const std::string& split, TokenMode mode) {
  auto groups = st.groups();
  std::vector<bool> saved;
  for (ParamGroup* g : groups) {
    saved.push_back(g->trainable());
    g->set_trainable(false);
  }

  Vocabulary vocab(st.dims.vocab_size);
  double total = 0;
  int n = 0;
  for (const CorpusRecord& rec : corpus.records) {
    if (rec.stage != stage_tag || rec.split != split) continue;
    TrainingExample ex = build_training_example(rec.conv, vocab, /*with_visual=*/true,
                                                modality_name(rec.modality), st.dims.context);
    Tensor z_v = project(st.projection, visual_feature_tokens(st, load_visual(corpus, rec), mode));
    AssembledSequence seq = assemble(st.lm, st.dims, ex.ids, ex.mask, &z_v);
    total += lm_loss(st.lm, st.dims, seq).item();
    ++n;
  }

  for (size_t i = 0; i < groups.size(); ++i) groups[i]->set_trainable(saved[i]);
  require(n > 0, "heldout_nll: no records in " + stage_tag + "/" + split);
  return total / n;
}

// ---------------------------------------------------------------------------
// Alignment and MAE stages, adapted to the corpus manifest. These train the
// towers themselves and are the prerequisites of stage 1.
// ---------------------------------------------------------------------------

inline std::vector<CaptionPair> caption_pairs(const CorpusManifest& corpus, Modality modality,
                                              const Vocabulary& vocab) {
  std::vector<CaptionPair> out;
  for (const CorpusRecord& rec : corpus.records) {
    if (rec.stage != "align" || rec.split != "train" || rec.modality != modality) continue;
    out.push_back({load_visual(corpus, rec), vocab.tokenize(rec.conv.rounds[0].answer)});
  }
  return out;
}

inline AlignStats run_align(ModelState& st, const RunConfig& cfg, const CorpusManifest& corpus,
                            MetricsLog* metrics = nullptr) {
  st.image_tower_g.set_trainable(true);
  st.video_tower_g.set_trainable(true);
  st.text_tower_g.set_trainable(true);
  st.projection_g.set_trainable(false);
  st.lm_g.set_trainable(false);

  Vocabulary vocab(st.dims.vocab_size);
  std::vector<CaptionPair> image_pairs = caption_pairs(corpus, Modality::image, vocab);
  std::vector<CaptionPair> video_pairs = caption_pairs(corpus, Modality::video, vocab);

  AlignConfig acfg;
  acfg.batch_size = cfg.batch_size;
  acfg.epochs = cfg.epochs;
  acfg.lr = cfg.lr;
  acfg.warmup_ratio = cfg.warmup_ratio;
  acfg.temperature = cfg.temperature;
  acfg.frames_k = st.dims.frames_k;

  StepLogger logger;
  if (metrics)
    logger = [&](int step, double loss) {
      if (step % cfg.log_every == 0)
        metrics->log(uint64_t(step), "align", "train", "loss", loss);
    };
  Rng train_rng(mix_seed(cfg.seed, 0xa119));
  AlignStats stats = align_pretrain(st.image_tower_g, st.image_tower, st.video_tower_g,
                                    st.video_tower, st.text_tower_g, st.text_tower, st.dims,
                                    image_pairs, video_pairs, acfg, train_rng, logger);
  st.step = 0;
  return stats;
}

inline MaeStats run_mae(ModelState& st, const RunConfig& cfg, const CorpusManifest& corpus,
                        MetricsLog* metrics = nullptr) {
  st.image_tower_g.set_trainable(true);
  st.video_tower_g.set_trainable(false);
  st.text_tower_g.set_trainable(false);
  st.projection_g.set_trainable(false);
  st.lm_g.set_trainable(false);

  std::vector<VisualInput> images;
  for (const CorpusRecord& rec : corpus.records)
    if (rec.stage == "align" && rec.split == "train" && rec.modality == Modality::image)
      images.push_back(load_visual(corpus, rec));

  MaeConfig mcfg;
  mcfg.mask_ratio = cfg.mask_ratio;
  mcfg.batch_size = cfg.batch_size;
  mcfg.epochs = cfg.epochs;
  mcfg.lr = cfg.lr;
  mcfg.warmup_ratio = cfg.warmup_ratio;

  StepLogger logger;
  if (metrics)
    logger = [&](int step, double loss) {
      if (step % cfg.log_every == 0) metrics->log(uint64_t(step), "mae", "train", "loss", loss);
    };
  Rng train_rng(mix_seed(cfg.seed, 0x3ae));
  MaeStats stats =
      mae_pretrain(st.image_tower_g, st.image_tower, st.dims, images, mcfg, train_rng, logger);
  st.step = 0;
  return stats;
}

}  // namespace uvlm
