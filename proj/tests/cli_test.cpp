#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "uvlm/pipeline.hpp"

using namespace uvlm;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
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

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

// Runs the tool through the shell with UVLM_OUT pointed at the given root and
// both streams captured.
CliResult run_cli(const std::string& args, const std::filesystem::path& root) {
  static int counter = 0;
  auto capture = std::filesystem::temp_directory_path() / "uvlm_cli_capture";
  std::filesystem::create_directories(capture);
  auto so = capture / ("out" + std::to_string(counter));
  auto se = capture / ("err" + std::to_string(counter));
  ++counter;
  std::string cmd = "UVLM_OUT='" + root.string() + "' '" + UVLM_CLI_PATH + "' " + args + " >'" +
                    so.string() + "' 2>'" + se.string() + "'";
  int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(so);
  r.err = slurp(se);
  return r;
}

const std::string kTinyCounts =
    "--align-images 8 --align-videos 8 --align-val-pairs 3 "
    "--sft-train-images 8 --sft-train-videos 6 --sft-test-images 3 --sft-test-videos 3";

// Generates the shared tiny corpus once and hands out the root that holds it.
const std::filesystem::path& tiny_root() {
  static std::filesystem::path root = [] {
    auto r = temp_dir("uvlm_cli_root");
    CliResult res = run_cli("gen-data --seed 5 " + kTinyCounts, r);
    REQUIRE(res.code == 0);
    return r;
  }();
  return root;
}

}  // namespace

TEST_CASE("usage errors exit 1 and name the problem") {
  auto root = temp_dir("uvlm_cli_usage");

  CliResult help = run_cli("--help", root);
  CHECK(help.code == 0);
  CHECK(help.out.find("Subcommands") != std::string::npos);

  CHECK(run_cli("", root).code == 1);
  CHECK(run_cli("frobnicate", root).code == 1);

  CliResult unknown_flag = run_cli("gradcheck --bogus", root);
  CHECK(unknown_flag.code == 1);
  CHECK(unknown_flag.err.find("--bogus") != std::string::npos);

  CHECK(run_cli("eval --suite nope", root).code == 1);
  CHECK(run_cli("train", root).code == 1);
  CHECK(run_cli("ablate --axis sideways", root).code == 1);
  CHECK(run_cli("generate --prompt 'hi'", root).code == 1);
}

TEST_CASE("gradcheck passes, prints the table, and writes its artifacts") {
  auto root = temp_dir("uvlm_cli_gradcheck");
  CliResult res = run_cli("gradcheck --seed 7", root);
  REQUIRE(res.code == 0);
  CHECK(res.out.find("max rel err") != std::string::npos);
  CHECK(res.out.find("(pass)") != std::string::npos);
  CHECK(res.out.find("FAIL") == std::string::npos);

  CHECK(slurp(root / "gradcheck" / "report.txt") == res.out);
  nlohmann::json snapshot = nlohmann::json::parse(slurp(root / "gradcheck" / "config.json"));
  CHECK(snapshot["subcommand"] == "gradcheck");
  CHECK(snapshot["seed"] == 7);
}

TEST_CASE("gen-data is deterministic across identical invocations") {
  auto a = temp_dir("uvlm_cli_gen_a");
  auto b = temp_dir("uvlm_cli_gen_b");
  REQUIRE(run_cli("gen-data --seed 9 " + kTinyCounts, a).code == 0);
  REQUIRE(run_cli("gen-data --seed 9 " + kTinyCounts, b).code == 0);

  CHECK(slurp(a / "corpus" / "manifest.jsonl") == slurp(b / "corpus" / "manifest.jsonl"));
  CHECK(slurp(a / "corpus" / "payloads" / "align-img-0000.uvlm") ==
        slurp(b / "corpus" / "payloads" / "align-img-0000.uvlm"));

  auto c = temp_dir("uvlm_cli_gen_c");
  REQUIRE(run_cli("gen-data --seed 10 " + kTinyCounts, c).code == 0);
  CHECK(slurp(a / "corpus" / "manifest.jsonl") != slurp(c / "corpus" / "manifest.jsonl"));
}

TEST_CASE("train without its prerequisite checkpoint exits 1 naming it") {
  auto root = temp_dir("uvlm_cli_prereq");
  REQUIRE(run_cli("gen-data --seed 5 " + kTinyCounts, root).code == 0);

  CliResult s1 = run_cli("train --stage 1", root);
  CHECK(s1.code == 1);
  CHECK(s1.err.find("aligned encoder checkpoint") != std::string::npos);
  CHECK(s1.err.find("uvlm align") != std::string::npos);
  CHECK(s1.err.find((root / "align" / "model.uvck").string()) != std::string::npos);

  CliResult s2 = run_cli("train --stage 2", root);
  CHECK(s2.code == 1);
  CHECK(s2.err.find("stage 1 checkpoint") != std::string::npos);

  CliResult ev = run_cli("eval --suite qa", root);
  CHECK(ev.code == 1);
  CHECK(ev.err.find("trained checkpoint") != std::string::npos);

  auto empty = temp_dir("uvlm_cli_nodata");
  CliResult al = run_cli("align", empty);
  CHECK(al.code == 1);
  CHECK(al.err.find("manifest") != std::string::npos);
  CHECK(al.err.find("uvlm gen-data") != std::string::npos);
}

TEST_CASE("align runs are bit-identical and snapshots obey flag precedence") {
  auto manifest_src = tiny_root() / "corpus";
  auto a = temp_dir("uvlm_cli_align_a");
  auto b = temp_dir("uvlm_cli_align_b");
  std::string args = "align --seed 3 --epochs 2 --batch-size 8 --data '" +
                     manifest_src.string() + "'";
  REQUIRE(run_cli(args, a).code == 0);
  REQUIRE(run_cli(args, b).code == 0);
  CHECK(slurp(a / "align" / "model.uvck") == slurp(b / "align" / "model.uvck"));
  CHECK(slurp(a / "align" / "metrics.csv") == slurp(b / "align" / "metrics.csv"));

  // rerunning into the same root truncates the metrics log instead of appending
  std::string before = slurp(a / "align" / "metrics.csv");
  REQUIRE(run_cli(args, a).code == 0);
  CHECK(slurp(a / "align" / "metrics.csv") == before);

  auto cfg_dir = temp_dir("uvlm_cli_cfg");
  spit(cfg_dir / "cfg.json", R"({"epochs": 2, "lr": 0.5, "batch_size": 8})");
  CliResult with_cfg = run_cli("align --config '" + (cfg_dir / "cfg.json").string() +
                                   "' --epochs 1 --data '" + manifest_src.string() + "'",
                               a);
  REQUIRE(with_cfg.code == 0);
  nlohmann::json snapshot = nlohmann::json::parse(slurp(a / "align" / "config.json"));
  CHECK(snapshot["epochs"] == 1);
  CHECK(snapshot["lr"] == 0.5);
  CHECK(snapshot["stage"] == "align");

  spit(cfg_dir / "bad.json", R"({"epochs": 2, "bogus": 1})");
  CliResult bad = run_cli("align --config '" + (cfg_dir / "bad.json").string() + "'", a);
  CHECK(bad.code == 1);
  CHECK(bad.err.find("bogus") != std::string::npos);

  spit(cfg_dir / "mismatch.json", R"({"stage": "2"})");
  CliResult mismatch = run_cli("align --config '" + (cfg_dir / "mismatch.json").string() + "'", a);
  CHECK(mismatch.code == 1);
  CHECK(mismatch.err.find("stage") != std::string::npos);
}

TEST_CASE("full pipeline through the tool, then eval and generate") {
  const auto& root = tiny_root();
  REQUIRE(run_cli("align --seed 3 --epochs 2 --batch-size 8", root).code == 0);
  REQUIRE(run_cli("train --stage 1 --seed 3 --epochs 1 --batch-size 8", root).code == 0);
  REQUIRE(run_cli("train --stage 2 --seed 3 --epochs 1 --batch-size 8", root).code == 0);

  CliResult qa = run_cli("eval --suite qa", root);
  REQUIRE(qa.code == 0);
  CHECK(qa.out.find("overall qa") != std::string::npos);
  std::string qa_csv = slurp(root / "eval" / "qa" / "results.csv");
  CHECK(qa_csv.find("metric,value") == 0);
  CHECK(qa_csv.find("image_qa_accuracy,") != std::string::npos);

  CliResult pope = run_cli("eval --suite pope --pope-n 6", root);
  REQUIRE(pope.code == 0);
  std::string pope_csv = slurp(root / "eval" / "pope" / "results.csv");
  CHECK(pope_csv.find("strategy,questions,") == 0);
  CHECK(pope_csv.find("adversarial,") != std::string::npos);

  CliResult gap = run_cli("eval --suite gap", root);
  REQUIRE(gap.code == 0);
  CHECK(gap.out.find("alignment gap") != std::string::npos);
  CHECK(slurp(root / "eval" / "gap" / "results.csv").find("alignment_gap,") !=
        std::string::npos);

  // eval is idempotent: identical invocations leave identical result files
  std::string pope_before = slurp(root / "eval" / "pope" / "results.csv");
  REQUIRE(run_cli("eval --suite pope --pope-n 6", root).code == 0);
  CHECK(slurp(root / "eval" / "pope" / "results.csv") == pope_before);

  auto payload = root / "corpus" / "payloads" / "sft-test-img-0000.uvlm";
  CliResult gen = run_cli(
      "generate --input '" + payload.string() + "' --prompt 'is there a red circle in the image'",
      root);
  REQUIRE(gen.code == 0);
  REQUIRE(!gen.out.empty());
  CHECK(gen.out.back() == '\n');
  CHECK(gen.out.find('\n') == gen.out.size() - 1);
  CHECK(slurp(root / "generate" / "answer.txt") == gen.out);
}

TEST_CASE("interrupted training resumed through the tool matches one uninterrupted run") {
  auto manifest_src = tiny_root() / "corpus";
  auto whole = temp_dir("uvlm_cli_whole");
  auto parts = temp_dir("uvlm_cli_parts");
  std::string common = " --seed 3 --epochs 2 --batch-size 8 --data '" + manifest_src.string() +
                       "' --init '" + (tiny_root() / "align" / "model.uvck").string() + "'";

  REQUIRE(run_cli("train --stage 1" + common, whole).code == 0);
  REQUIRE(run_cli("train --stage 1 --max-steps 1" + common, parts).code == 0);
  REQUIRE(run_cli("train --stage 1 --resume" + common, parts).code == 0);

  CHECK(slurp(whole / "stage1" / "model.uvck") == slurp(parts / "stage1" / "model.uvck"));
}

TEST_CASE("ablate writes both report tables") {
  auto manifest_src = tiny_root() / "corpus";
  auto root = temp_dir("uvlm_cli_ablate");
  auto cfg_dir = temp_dir("uvlm_cli_ablate_cfg");
  spit(cfg_dir / "fast.json",
       R"({"align_epochs": 1, "mae_epochs": 1, "stage1_epochs": 1, "stage2_epochs": 1,
           "align_batch": 8, "stage1_batch": 8, "stage2_batch": 8, "pope_n": 0})");

  CliResult res = run_cli("ablate --axis representation --seeds 1,2,3 --config '" +
                              (cfg_dir / "fast.json").string() + "' --data '" +
                              manifest_src.string() + "'",
                          root);
  REQUIRE(res.code == 0);
  std::string csv = slurp(root / "ablate" / "representation" / "ablation-representation.csv");
  CHECK(csv.find("arm,seed") == 0);
  CHECK(csv.find("united") != std::string::npos);
  CHECK(csv.find("separated") != std::string::npos);
  CHECK(csv.find("delta") != std::string::npos);
  std::string md = slurp(root / "ablate" / "representation" / "ablation-representation.md");
  CHECK(md.find("| arm |") != std::string::npos);
  CHECK(res.out.find("united") != std::string::npos);

  CHECK(run_cli("ablate --axis representation --seeds 1,2", root).code == 1);
}
