#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sparseloc/config.hpp"

using namespace sparseloc;
namespace fs = std::filesystem;

namespace {

std::string cli_path() {
  if (const char* env = std::getenv("SPARSELOC_CLI")) return env;
  return "tools/sparseloc";
}

struct RunResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr
};

RunResult run_cli(const std::string& args, const fs::path& workdir) {
  const fs::path log = workdir / "cli_output.log";
  const std::string cmd = "cd " + workdir.string() + " && " + cli_path() + " " + args + " > " +
                          log.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  RunResult result;
  result.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream in(log);
  std::stringstream buffer;
  buffer << in.rdbuf();
  result.output = buffer.str();
  return result;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

struct Workspace {
  fs::path dir;
  explicit Workspace(const std::string& name) {
    dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }
};

const char* kSmokeConfig = R"(# smoke-scale model
input_size = 64
channels = 8,12,16,16
depths = 1,1,3,2
max_exponents = 2,1
head_dim = 8
unified_channels = 16
seed = 7
image_size = 64
synth_train = 16
synth_val = 2
synth_test = 2
data_dir = data
epochs = 2
batch_size = 4
)";

void write_config(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

}  // namespace

TEST_CASE("usage errors exit with code 1") {
  const Workspace ws("sparseloc_cli_usage");
  CHECK(run_cli("", ws.dir).exit_code != 0);
  CHECK(run_cli("synth", ws.dir).exit_code == 1);  // missing --config
  CHECK(run_cli("frobnicate --config x", ws.dir).exit_code != 0);
}

TEST_CASE("profile reports missing config keys together") {
  const Workspace ws("sparseloc_cli_misskeys");
  write_config(ws.dir / "empty.conf", "# nothing here\n");
  const RunResult r = run_cli("profile --config empty.conf --out prof", ws.dir);
  CHECK(r.exit_code == 1);
  CHECK(r.output.find("input_size") != std::string::npos);
  CHECK(r.output.find("channels") != std::string::npos);
  CHECK(r.output.find("depths") != std::string::npos);
  CHECK(r.output.find("max_exponents") != std::string::npos);
}

TEST_CASE("synth is deterministic and respects --force") {
  const Workspace ws("sparseloc_cli_synth");
  write_config(ws.dir / "smoke.conf", kSmokeConfig);
  const std::string base = "synth --config smoke.conf";
  REQUIRE(run_cli(base + " --out data_a", ws.dir).exit_code == 0);
  REQUIRE(run_cli(base + " --out data_b", ws.dir).exit_code == 0);

  // Byte-identical across runs, including manifests.
  for (const char* rel : {"train/manifest.csv", "train/img_000003.ppm", "test/mask_000001.pgm"}) {
    CHECK(read_file(ws.dir / "data_a" / rel) == read_file(ws.dir / "data_b" / rel));
  }

  // A different seed changes the bytes.
  REQUIRE(run_cli(base + " --seed 8 --out data_c", ws.dir).exit_code == 0);
  CHECK(read_file(ws.dir / "data_a/train/img_000000.ppm") !=
        read_file(ws.dir / "data_c/train/img_000000.ppm"));

  // Refuse to overwrite without --force.
  CHECK(run_cli(base + " --out data_a", ws.dir).exit_code == 1);
  CHECK(run_cli(base + " --out data_a --force", ws.dir).exit_code == 0);

  // Run manifest present with config hash.
  const std::string manifest = read_file(ws.dir / "data_a/run_manifest.txt");
  CHECK(manifest.find("command synth") != std::string::npos);
  CHECK(manifest.find("config_hash") != std::string::npos);
}

TEST_CASE("synth with zero samples writes empty manifests and succeeds") {
  const Workspace ws("sparseloc_cli_synth0");
  std::string cfg = kSmokeConfig;
  cfg += "\nsynth_train = 0\nsynth_val = 0\nsynth_test = 0\n";
  write_config(ws.dir / "smoke.conf", cfg);
  const RunResult r = run_cli("synth --config smoke.conf --out data", ws.dir);
  CHECK(r.exit_code == 0);
  CHECK(read_file(ws.dir / "data/train/manifest.csv") == "seed,image_path,mask_path,variant\n");
}

TEST_CASE("train writes a loss curve, checkpoints, and is deterministic") {
  const Workspace ws("sparseloc_cli_train");
  write_config(ws.dir / "smoke.conf", kSmokeConfig);
  REQUIRE(run_cli("synth --config smoke.conf --out data", ws.dir).exit_code == 0);
  REQUIRE(run_cli("train --config smoke.conf --out run_a", ws.dir).exit_code == 0);
  REQUIRE(run_cli("train --config smoke.conf --out run_b", ws.dir).exit_code == 0);

  const std::string loss_a = read_file(ws.dir / "run_a/loss.csv");
  CHECK(loss_a == read_file(ws.dir / "run_b/loss.csv"));
  CHECK(loss_a.rfind("step,lr,loss\n", 0) == 0);

  // 2 epochs x 4 steps; final loss below the first (sanity oracle).
  std::istringstream in(loss_a);
  std::string line;
  std::getline(in, line);
  std::vector<double> losses;
  while (std::getline(in, line)) {
    const std::size_t last_comma = line.rfind(',');
    losses.push_back(std::stod(line.substr(last_comma + 1)));
  }
  REQUIRE(losses.size() == 8);
  CHECK(losses.back() < losses.front());

  CHECK(fs::exists(ws.dir / "run_a/checkpoint-final/manifest.txt"));
  CHECK(run_cli("train --config smoke.conf --out run_a", ws.dir).exit_code == 1);  // non-empty
}

TEST_CASE("train resume reproduces the uninterrupted trajectory") {
  const Workspace ws("sparseloc_cli_resume");
  std::string cfg = kSmokeConfig;
  cfg += "\ncheckpoint_every = 4\n";
  write_config(ws.dir / "smoke.conf", cfg);
  REQUIRE(run_cli("synth --config smoke.conf --out data", ws.dir).exit_code == 0);
  REQUIRE(run_cli("train --config smoke.conf --out full", ws.dir).exit_code == 0);
  REQUIRE(fs::exists(ws.dir / "full/checkpoint-4"));
  REQUIRE(
      run_cli("train --config smoke.conf --out resumed --resume full/checkpoint-4", ws.dir)
          .exit_code == 0);

  // The resumed loss rows (steps 4..7) must match the full run's bytes.
  std::istringstream full_csv(read_file(ws.dir / "full/loss.csv"));
  std::istringstream resume_csv(read_file(ws.dir / "resumed/loss.csv"));
  std::string line;
  std::vector<std::string> full_rows, resumed_rows;
  std::getline(full_csv, line);
  while (std::getline(full_csv, line)) full_rows.push_back(line);
  std::getline(resume_csv, line);
  while (std::getline(resume_csv, line)) resumed_rows.push_back(line);
  REQUIRE(full_rows.size() == 8);
  REQUIRE(resumed_rows.size() == 4);
  for (int i = 0; i < 4; ++i) CHECK(resumed_rows[i] == full_rows[4 + i]);
}

TEST_CASE("eval enforces the config hash and writes reports") {
  const Workspace ws("sparseloc_cli_eval");
  write_config(ws.dir / "smoke.conf", kSmokeConfig);
  REQUIRE(run_cli("synth --config smoke.conf --out data", ws.dir).exit_code == 0);
  REQUIRE(run_cli("train --config smoke.conf --out run", ws.dir).exit_code == 0);

  const RunResult ok =
      run_cli("eval --config smoke.conf --checkpoint run/checkpoint-final --out ev", ws.dir);
  CHECK(ok.exit_code == 0);
  const std::string eval_csv = read_file(ws.dir / "ev/eval.csv");
  CHECK(eval_csv.find("sample,f1,auc,iou") != std::string::npos);
  CHECK(eval_csv.find("SUMMARY,mean_f1,") != std::string::npos);

  // Seed override changes the config hash; eval must refuse.
  const RunResult mismatch = run_cli(
      "eval --config smoke.conf --seed 99 --checkpoint run/checkpoint-final --out ev2", ws.dir);
  CHECK(mismatch.exit_code == 1);
  CHECK(mismatch.output.find("--allow-mismatch") != std::string::npos);
  CHECK(run_cli("eval --config smoke.conf --seed 99 --allow-mismatch --checkpoint "
                "run/checkpoint-final --out ev2",
                ws.dir)
            .exit_code == 0);
}

TEST_CASE("eval emits the robustness matrix when enabled") {
  const Workspace ws("sparseloc_cli_robust");
  std::string cfg = kSmokeConfig;
  cfg += "\nrobustness = true\njpeg_qualities = 90,50\nblur_kernels = 3\nnoise_sigmas = 0.05\n";
  write_config(ws.dir / "smoke.conf", cfg);
  REQUIRE(run_cli("synth --config smoke.conf --out data", ws.dir).exit_code == 0);
  REQUIRE(run_cli("train --config smoke.conf --out run", ws.dir).exit_code == 0);
  REQUIRE(run_cli("eval --config smoke.conf --checkpoint run/checkpoint-final --out ev", ws.dir)
              .exit_code == 0);
  const std::string rob = read_file(ws.dir / "ev/robustness.csv");
  CHECK(rob.find("perturbation,severity,mean_f1") != std::string::npos);
  CHECK(rob.find("jpeg,90,") != std::string::npos);
  CHECK(rob.find("jpeg,50,") != std::string::npos);
  CHECK(rob.find("blur,3,") != std::string::npos);
  CHECK(rob.find("noise,0.05,") != std::string::npos);
}

TEST_CASE("profile writes cost and A/B reports") {
  const Workspace ws("sparseloc_cli_profile");
  write_config(ws.dir / "smoke.conf", kSmokeConfig);
  const RunResult r = run_cli("profile --config smoke.conf --out prof --ab-global", ws.dir);
  CHECK(r.exit_code == 0);
  const std::string cost = read_file(ws.dir / "prof/cost.csv");
  CHECK(cost.find("layer,params,flops") != std::string::npos);
  CHECK(cost.find("TOTAL,") != std::string::npos);
  const std::string ab = read_file(ws.dir / "prof/ab.csv");
  CHECK(ab.find("ratio,,") != std::string::npos);
  CHECK(r.output.find("ratio") != std::string::npos);
}

TEST_CASE("uniform-sparsity ablation flag flows into the plan and manifest") {
  const Workspace ws("sparseloc_cli_uniform");
  std::string cfg = kSmokeConfig;
  cfg += "\nuniform_rate = 2\n";
  write_config(ws.dir / "smoke.conf", cfg);
  REQUIRE(run_cli("synth --config smoke.conf --out data", ws.dir).exit_code == 0);
  REQUIRE(run_cli("train --config smoke.conf --out run", ws.dir).exit_code == 0);
  const std::string manifest = read_file(ws.dir / "run/run_manifest.txt");
  CHECK(manifest.find("uniform_rate 2") != std::string::npos);
  CHECK(manifest.find("stage3_taps 1") != std::string::npos);  // single tap per stage
  CHECK(manifest.find("stage4_taps 1") != std::string::npos);
}

TEST_CASE("config parser handles comments, overrides, and hashing") {
  const ConfigFile file = ConfigFile::parse_text("a = 1 # trailing\n# full comment\n b=2\n");
  CHECK(file.get_int("a") == 1);
  CHECK(file.get_int("b") == 2);
  CHECK_THROWS_AS(file.get("missing"), ConfigError);
  CHECK_THROWS_AS(ConfigFile::parse_text("not a pair\n"), ConfigError);

  ConfigFile mutated = file;
  CHECK(mutated.hash() == file.hash());
  mutated.set("a", "3");
  CHECK(mutated.hash() != file.hash());
}
