#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "uvlm/pipeline.hpp"

using namespace uvlm;

namespace {

std::filesystem::path temp_dir(const char* name) {
  auto p = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), std::streamsize(bytes.size()));
}

// One small corpus shared by the training cases; generating it once keeps the
// suite fast without coupling the cases to each other's model state.
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
    return gen_corpus(cfg, 77, temp_dir("uvlm_pipeline_corpus"));
  }();
  return m;
}

std::vector<std::string> fingerprints(const ModelState& st) {
  std::vector<std::string> out;
  for (const ParamGroup* g : st.groups()) out.push_back(g->fingerprint());
  return out;
}

RunConfig stage_config(const std::string& stage, const std::filesystem::path& out_dir) {
  RunConfig cfg;
  apply_stage_defaults(cfg, stage);
  cfg.batch_size = 8;
  cfg.epochs = 2;
  cfg.seed = 99;
  cfg.data_dir = test_corpus().root;
  cfg.out_dir = out_dir;
  cfg.validate();
  return cfg;
}

}  // namespace

TEST_CASE("model state init is seed-deterministic") {
  ModelDims dims;
  ModelState a = ModelState::init(dims, 7);
  ModelState b = ModelState::init(dims, 7);
  ModelState c = ModelState::init(dims, 8);

  std::vector<std::string> names;
  for (const ParamGroup* g : a.groups()) names.push_back(g->name);
  CHECK(names == std::vector<std::string>{"image_tower", "video_tower", "text_tower", "projection",
                                          "lm"});

  CHECK(fingerprints(a) == fingerprints(b));
  CHECK(fingerprints(a) != fingerprints(c));
  CHECK(a.step == 0);
}

TEST_CASE("checkpoint round-trips parameters, flags, rng, and step") {
  auto dir = temp_dir("uvlm_pipeline_ckpt");
  ModelState st = ModelState::init(ModelDims{}, 11);
  st.projection_g.set_trainable(true);
  st.lm_g.set_trainable(true);
  st.image_tower_g.set_trainable(false);
  st.video_tower_g.set_trainable(false);
  st.text_tower_g.set_trainable(false);
  st.step = 42;
  st.rng.uniform();  // advance past the init position
  auto path = dir / "model.uvck";
  save_checkpoint(st, path);

  Checkpoint ck = load_checkpoint(path);
  CHECK(fingerprints(ck.state) == fingerprints(st));
  CHECK(ck.state.step == 42);
  CHECK(ck.state.rng.state() == st.rng.state());
  CHECK(ck.state.rng.inc() == st.rng.inc());
  CHECK(ck.state.projection_g.trainable());
  CHECK(ck.state.lm_g.trainable());
  CHECK_FALSE(ck.state.image_tower_g.trainable());
  CHECK_FALSE(ck.state.video_tower_g.trainable());
  CHECK_FALSE(ck.state.text_tower_g.trainable());
  CHECK_FALSE(ck.opt.has_value());

  auto path2 = dir / "model2.uvck";
  save_checkpoint(ck.state, path2);
  CHECK(slurp(path) == slurp(path2));

  OptimizerSnapshot snap;
  snap.moments = {0.5f, -1.25f, 3.0f};
  snap.steps = 17;
  auto path3 = dir / "model3.uvck";
  save_checkpoint(st, path3, &snap);
  Checkpoint ck3 = load_checkpoint(path3);
  REQUIRE(ck3.opt.has_value());
  CHECK(ck3.opt->moments == snap.moments);
  CHECK(ck3.opt->steps == 17);
  auto path4 = dir / "model4.uvck";
  save_checkpoint(ck3.state, path4, &*ck3.opt);
  CHECK(slurp(path3) == slurp(path4));
}

TEST_CASE("checkpoint loading rejects corruption") {
  auto dir = temp_dir("uvlm_pipeline_ckpt_bad");
  ModelState st = ModelState::init(ModelDims{}, 3);
  auto path = dir / "model.uvck";
  save_checkpoint(st, path);
  std::string bytes = slurp(path);

  auto mutated = dir / "mutated.uvck";

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  spit(mutated, bad_magic);
  try {
    load_checkpoint(mutated);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    std::string msg = e.what();
    CHECK(msg.find(mutated.string()) != std::string::npos);
    CHECK(msg.find("offset 0") != std::string::npos);
  }

  std::string bad_version = bytes;
  bad_version[4] = char(0xEE);
  spit(mutated, bad_version);
  try {
    load_checkpoint(mutated);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }

  // header is 4 magic + 2 version + 2 field count + 14*4 dims + 4 group
  // count + 4 name length, so byte 72 is the first character of the first
  // group name
  std::string bad_group = bytes;
  REQUIRE(bad_group[72] == 'i');
  bad_group[72] = 'x';
  spit(mutated, bad_group);
  try {
    load_checkpoint(mutated);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    std::string msg = e.what();
    CHECK(msg.find("unknown group name") != std::string::npos);
    CHECK(msg.find("xmage_tower") != std::string::npos);
  }

  spit(mutated, bytes.substr(0, bytes.size() - 10));
  CHECK_THROWS_AS(load_checkpoint(mutated), FormatError);

  spit(mutated, bytes + "z");
  try {
    load_checkpoint(mutated);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("trailing bytes") != std::string::npos);
  }
}

TEST_CASE("stage 1 trains only the projection and starts near uniform") {
  auto dir = temp_dir("uvlm_pipeline_stage1");
  RunConfig cfg = stage_config("1", dir);
  ModelState st = ModelState::init(cfg.dims, 5);
  std::vector<std::string> before = fingerprints(st);

  MetricsLog metrics(dir / "metrics.csv");
  StageResult res = train_stage1(st, cfg, test_corpus(), nullptr, &metrics);

  REQUIRE_FALSE(res.loss_trace.empty());
  CHECK_THAT(res.loss_trace.front(),
             Catch::Matchers::WithinAbs(std::log(double(cfg.dims.vocab_size)), 0.5));
  CHECK(res.loss_trace.back() < res.loss_trace.front());
  CHECK(res.final_step == uint64_t(res.loss_trace.size()));

  std::vector<std::string> after = fingerprints(st);
  CHECK(after[0] == before[0]);  // image tower
  CHECK(after[1] == before[1]);  // video tower
  CHECK(after[2] == before[2]);  // text tower
  CHECK(after[3] != before[3]);  // projection
  CHECK(after[4] == before[4]);  // lm

  std::string csv = slurp(dir / "metrics.csv");
  CHECK(csv.rfind("step,stage,split,metric,value\n", 0) == 0);
  CHECK(csv.find("0,1,train,loss,") != std::string::npos);
}

TEST_CASE("stage runs are reproducible from a loaded checkpoint") {
  auto dir = temp_dir("uvlm_pipeline_repro");
  RunConfig cfg = stage_config("1", dir);
  cfg.epochs = 1;
  ModelState init = ModelState::init(cfg.dims, 21);
  auto path = dir / "init.uvck";
  save_checkpoint(init, path);

  Checkpoint a = load_checkpoint(path);
  Checkpoint b = load_checkpoint(path);
  StageResult ra = train_stage1(a.state, cfg, test_corpus());
  StageResult rb = train_stage1(b.state, cfg, test_corpus());

  REQUIRE(ra.loss_trace.size() == rb.loss_trace.size());
  for (size_t i = 0; i < ra.loss_trace.size(); ++i) REQUIRE(ra.loss_trace[i] == rb.loss_trace[i]);
  CHECK(fingerprints(a.state) == fingerprints(b.state));
}

TEST_CASE("stage 2 trains projection and lm while towers stay frozen") {
  auto dir = temp_dir("uvlm_pipeline_stage2");
  RunConfig cfg = stage_config("2", dir);
  ModelState st = ModelState::init(cfg.dims, 13);
  std::vector<std::string> before = fingerprints(st);

  double nll_before = heldout_nll(st, test_corpus(), "sft", "test", token_mode_from(cfg.token_mode));
  StageResult res = train_stage2(st, cfg, test_corpus());
  double nll_after = heldout_nll(st, test_corpus(), "sft", "test", token_mode_from(cfg.token_mode));

  REQUIRE_FALSE(res.loss_trace.empty());
  CHECK(nll_after < nll_before);

  std::vector<std::string> after = fingerprints(st);
  CHECK(after[0] == before[0]);
  CHECK(after[1] == before[1]);
  CHECK(after[2] == before[2]);
  CHECK(after[3] != before[3]);
  CHECK(after[4] != before[4]);

  CHECK(st.projection_g.trainable());
  CHECK(st.lm_g.trainable());
  CHECK_FALSE(st.image_tower_g.trainable());
  CHECK_FALSE(st.video_tower_g.trainable());
  CHECK_FALSE(st.text_tower_g.trainable());
  int64_t trainable = 0;
  for (const ParamGroup* g : st.groups())
    if (g->trainable()) trainable += g->param_count();
  CHECK(trainable == st.projection_g.param_count() + st.lm_g.param_count());
}

TEST_CASE("interrupted training resumes bit-exactly") {
  auto dir = temp_dir("uvlm_pipeline_resume");
  RunConfig cfg = stage_config("2", dir);
  ModelState init = ModelState::init(cfg.dims, 31);
  auto init_path = dir / "init.uvck";
  save_checkpoint(init, init_path);

  Checkpoint full = load_checkpoint(init_path);
  StageResult whole = train_stage2(full.state, cfg, test_corpus());
  REQUIRE(whole.loss_trace.size() >= 6);

  // the interrupted run stops mid-epoch, checkpoints, and picks back up
  Checkpoint part = load_checkpoint(init_path);
  RunConfig cut = cfg;
  cut.max_steps = 4;
  StageResult first = train_stage2(part.state, cut, test_corpus());
  REQUIRE(first.loss_trace.size() == 4);
  auto mid_path = dir / "mid.uvck";
  save_checkpoint(part.state, mid_path, &first.opt);

  Checkpoint resumed = load_checkpoint(mid_path);
  REQUIRE(resumed.opt.has_value());
  CHECK(resumed.state.step == 4);
  StageResult second = train_stage2(resumed.state, cfg, test_corpus(), &*resumed.opt);

  std::vector<double> stitched = first.loss_trace;
  stitched.insert(stitched.end(), second.loss_trace.begin(), second.loss_trace.end());
  REQUIRE(stitched.size() == whole.loss_trace.size());
  for (size_t i = 0; i < stitched.size(); ++i) REQUIRE(stitched[i] == whole.loss_trace[i]);
  CHECK(fingerprints(resumed.state) == fingerprints(full.state));
  CHECK(resumed.state.step == full.state.step);
}

TEST_CASE("non-finite loss aborts with a state dump") {
  auto dir = temp_dir("uvlm_pipeline_nan");
  RunConfig cfg = stage_config("1", dir);
  ModelState st = ModelState::init(cfg.dims, 17);
  st.projection.l1.w.data()[0] = std::numeric_limits<float>::quiet_NaN();

  try {
    train_stage1(st, cfg, test_corpus());
    FAIL("expected Error");
  } catch (const Error& e) {
    std::string msg = e.what();
    CHECK(msg.find("non-finite loss at step 0") != std::string::npos);
    CHECK(msg.find("batch 0") != std::string::npos);
    CHECK(msg.find("op ") != std::string::npos);
    CHECK(msg.find("stage1-nan-abort.uvck") != std::string::npos);
  }

  auto dump = dir / "stage1-nan-abort.uvck";
  REQUIRE(std::filesystem::exists(dump));
  Checkpoint ck = load_checkpoint(dump);
  REQUIRE(ck.opt.has_value());
  CHECK(ck.opt->steps == 0);
  CHECK(std::isnan(ck.state.projection.l1.w.data()[0]));
}

TEST_CASE("run config applies stage defaults and rejects unknown keys") {
  RunConfig cfg;
  apply_stage_defaults(cfg, "1");
  CHECK(cfg.stage == "1");
  CHECK(cfg.batch_size == 32);
  apply_stage_defaults(cfg, "2");
  CHECK(cfg.batch_size == 16);
  apply_stage_defaults(cfg, "align");
  CHECK(cfg.epochs == 10);
  apply_stage_defaults(cfg, "mae");
  CHECK(cfg.lr == 1e-3);

  nlohmann::json j;
  j["stage"] = "1";
  j["learning_rate"] = 0.1;
  CHECK_THROWS_AS(parse_run_config(j, "test"), InvalidArgument);

  nlohmann::json bad_model;
  bad_model["stage"] = "1";
  bad_model["model"]["depth"] = 5;
  CHECK_THROWS_AS(parse_run_config(bad_model, "test"), InvalidArgument);

  nlohmann::json bad_type;
  bad_type["stage"] = "1";
  bad_type["batch_size"] = "eight";
  CHECK_THROWS_AS(parse_run_config(bad_type, "test"), InvalidArgument);

  try {
    nlohmann::json unknown;
    unknown["bogus"] = 1;
    parse_run_config(unknown, "cfg.json");
    FAIL("expected InvalidArgument");
  } catch (const InvalidArgument& e) {
    std::string msg = e.what();
    CHECK(msg.find("cfg.json") != std::string::npos);
    CHECK(msg.find("bogus") != std::string::npos);
  }
}

TEST_CASE("run config snapshot round-trips every field") {
  RunConfig cfg;
  apply_stage_defaults(cfg, "2");
  cfg.seed = 404;
  cfg.lr = 5e-4;
  cfg.batch_size = 12;
  cfg.epochs = 3;
  cfg.warmup_ratio = 0.1;
  cfg.token_mode = "per_frame";
  cfg.temperature = 0.05;
  cfg.mask_ratio = 0.25;
  cfg.log_every = 2;
  cfg.max_steps = 9;
  cfg.data_dir = "/tmp/data";
  cfg.out_dir = "/tmp/out";
  cfg.init_checkpoint = "/tmp/init.uvck";
  cfg.resume = true;
  cfg.dims.d = 48;
  cfg.dims.frames_k = 4;

  RunConfig back = parse_run_config(run_config_json(cfg), "snapshot");
  CHECK(back.stage == "2");
  CHECK(back.seed == 404);
  CHECK(back.lr == 5e-4);
  CHECK(back.batch_size == 12);
  CHECK(back.epochs == 3);
  CHECK(back.warmup_ratio == 0.1);
  CHECK(back.token_mode == "per_frame");
  CHECK(back.temperature == 0.05);
  CHECK(back.mask_ratio == 0.25);
  CHECK(back.log_every == 2);
  CHECK(back.max_steps == 9);
  CHECK(back.data_dir == "/tmp/data");
  CHECK(back.out_dir == "/tmp/out");
  CHECK(back.init_checkpoint == "/tmp/init.uvck");
  CHECK(back.resume);
  CHECK(back.dims.d == 48);
  CHECK(back.dims.frames_k == 4);

  auto dir = temp_dir("uvlm_pipeline_cfg");
  auto path = dir / "run.json";
  {
    std::ofstream out(path);
    out << run_config_json(cfg).dump(2);
  }
  RunConfig loaded = load_run_config(path);
  CHECK(loaded.seed == 404);
  CHECK(loaded.dims.d == 48);

  spit(path, "{not json");
  CHECK_THROWS_AS(load_run_config(path), FormatError);
}

TEST_CASE("metrics log writes its header exactly once") {
  auto dir = temp_dir("uvlm_pipeline_metrics");
  auto path = dir / "metrics.csv";
  {
    MetricsLog log(path);
    log.log(0, "1", "train", "loss", 5.5);
  }
  {
    MetricsLog log(path);
    log.log(1, "1", "train", "loss", 4.5);
  }
  std::string csv = slurp(path);
  CHECK(csv == "step,stage,split,metric,value\n0,1,train,loss,5.5\n1,1,train,loss,4.5\n");
}

TEST_CASE("heldout nll restores freeze flags and rejects empty slices") {
  ModelState st = ModelState::init(ModelDims{}, 23);
  st.projection_g.set_trainable(true);
  st.lm_g.set_trainable(true);
  st.image_tower_g.set_trainable(false);

  double nll = heldout_nll(st, test_corpus(), "sft", "test", TokenMode::pooled);
  CHECK_THAT(nll, Catch::Matchers::WithinAbs(std::log(256.0), 0.5));
  CHECK(st.projection_g.trainable());
  CHECK(st.lm_g.trainable());
  CHECK_FALSE(st.image_tower_g.trainable());

  CHECK_THROWS_AS(heldout_nll(st, test_corpus(), "sft", "nosuch", TokenMode::pooled), Error);
}

TEST_CASE("alignment and mae stages wire into the manifest") {
  auto dir = temp_dir("uvlm_pipeline_align");
  RunConfig cfg = stage_config("align", dir);
  cfg.epochs = 1;
  ModelState st = ModelState::init(cfg.dims, 41);
  std::vector<std::string> before = fingerprints(st);

  AlignStats stats = run_align(st, cfg, test_corpus());
  CHECK(stats.phase1_first_loss > 0);
  CHECK(stats.phase2_first_loss > 0);
  CHECK(st.step == 0);

  std::vector<std::string> after = fingerprints(st);
  CHECK(after[0] != before[0]);  // image tower
  CHECK(after[1] != before[1]);  // video tower
  CHECK(after[2] != before[2]);  // text tower
  CHECK(after[3] == before[3]);  // projection
  CHECK(after[4] == before[4]);  // lm

  RunConfig mcfg = stage_config("mae", dir);
  mcfg.epochs = 1;
  ModelState ms = ModelState::init(mcfg.dims, 43);
  std::vector<std::string> mae_before = fingerprints(ms);
  MaeStats mstats = run_mae(ms, mcfg, test_corpus());
  CHECK_FALSE(mstats.loss_trace.empty());
  std::vector<std::string> mae_after = fingerprints(ms);
  CHECK(mae_after[0] != mae_before[0]);
  CHECK(mae_after[1] == mae_before[1]);
  CHECK(mae_after[4] == mae_before[4]);
}
