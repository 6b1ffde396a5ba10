// Runs the command-line tool as a subprocess.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>
#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

const char* const kSmallConfig =
    "# tiny run\n"
    "train.iterations = 20\n"
    "data.train_scenes = 8\n"
    "data.test_scenes = 4\n"
    "gradcheck.seeds = 1\n";

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("autoassign_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path write_config(const fs::path& dir, const std::string& text, const std::string& name = "run.cfg") {
  std::ofstream(dir / name, std::ios::binary) << text;
  return dir / name;
}

struct Result {
  int code;
  std::string output;
};

Result run(const std::string& args, const fs::path& dir) {
  const fs::path log = dir / "stdout.txt";
  const std::string cmd = std::string("\"") + AUTOASSIGN_CLI + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

int count_lines(const std::string& text) {
  int n = 0;
  for (char c : text) n += c == '\n';
  return n;
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  const fs::path dir = scratch("usage");
  const fs::path cfg = write_config(dir, kSmallConfig);
  CHECK(run("", dir).code == 2);
  CHECK(run("frobnicate --config " + cfg.string(), dir).code == 2);
  CHECK(run("train", dir).code == 2);
  CHECK(run("train --config " + (dir / "missing.cfg").string(), dir).code == 2);
  CHECK(run("train --config " + cfg.string() + " --seed abc", dir).code == 2);

  const Result unknown = run("compare --config " + cfg.string() + " --out " + (dir / "o").string() +
                                 " --strategy nearest",
                             dir);
  CHECK(unknown.code == 2);
  CHECK(unknown.output.find("uniform-inbox") != std::string::npos);

  const fs::path bad = write_config(dir, "run.seed = 1\nrun.seed = 2\n", "bad.cfg");
  const Result dup = run("gen-data --config " + bad.string() + " --out " + (dir / "o").string(), dir);
  CHECK(dup.code == 2);
  CHECK(dup.output.find("line 2") != std::string::npos);
  CHECK(dup.output.find("run.seed") != std::string::npos);
}

TEST_CASE("gradcheck passes by default and names a faulted op") {
  const fs::path dir = scratch("gradcheck");
  const fs::path cfg = write_config(dir, kSmallConfig);
  const fs::path out = dir / "ok";
  const Result ok = run("gradcheck --config " + cfg.string() + " --out " + out.string(), dir);
  CHECK(ok.code == 0);
  const std::string report = slurp(out / "gradcheck_report.txt");
  CHECK(report.find("suite unit") != std::string::npos);
  CHECK(report.find("suite loss") != std::string::npos);
  CHECK(report.find("suite end-to-end") != std::string::npos);
  CHECK(report.find("PASS") != std::string::npos);

  const fs::path faulty = write_config(dir, std::string(kSmallConfig) + "gradcheck.fault_op = exp\n", "fault.cfg");
  const Result bad = run("gradcheck --config " + faulty.string() + " --out " + (dir / "bad").string(), dir);
  CHECK(bad.code == 1);
  CHECK(bad.output.find("FAIL unit exp") != std::string::npos);
}

TEST_CASE("gen-data writes both splits and the configs") {
  const fs::path dir = scratch("gendata");
  const fs::path cfg = write_config(dir, kSmallConfig);
  const fs::path out = dir / "data";
  REQUIRE(run("gen-data --config " + cfg.string() + " --out " + out.string() + " --seed 9", dir).code == 0);
  CHECK(fs::exists(out / "train" / "annotations.txt"));
  CHECK(fs::exists(out / "test" / "annotations.txt"));
  CHECK(slurp(out / "config.cfg") == kSmallConfig);
  const std::string resolved = slurp(out / "resolved.cfg");
  CHECK(resolved.find("run.seed = 9\n") != std::string::npos);
  CHECK(resolved.find("data.train_scenes = 8\n") != std::string::npos);
}

TEST_CASE("train is deterministic and its checkpoint reproduces the evaluation") {
  const fs::path dir = scratch("train");
  const fs::path cfg = write_config(dir, kSmallConfig);
  const fs::path a = dir / "a";
  const fs::path b = dir / "b";
  const Result ra = run("train --config " + cfg.string() + " --out " + a.string(), dir);
  REQUIRE(ra.code == 0);
  REQUIRE(run("train --config " + cfg.string() + " --out " + b.string(), dir).code == 0);

  const std::string log = slurp(a / "train_log.jsonl");
  CHECK(log == slurp(b / "train_log.jsonl"));
  CHECK(slurp(a / "checkpoint.bin") == slurp(b / "checkpoint.bin"));
  CHECK(count_lines(log) == 20);
  std::istringstream lines(log);
  std::string first;
  std::getline(lines, first);
  const nlohmann::json rec = nlohmann::json::parse(first);
  CHECK(rec["iteration"] == 0);
  CHECK(rec["mu"].size() == 3);
  CHECK(rec["sigma"][0].size() == 2);
  CHECK(fs::exists(a / "probe_weights"));
  CHECK_FALSE(fs::is_empty(a / "probe_weights"));

  const fs::path e = dir / "eval";
  const Result ev = run("eval --config " + cfg.string() + " --out " + e.string() + " --checkpoint " + a.string(), dir);
  REQUIRE(ev.code == 0);
  const std::string csv = slurp(e / "eval.csv");
  CHECK(ev.output == csv);
  CHECK(count_lines(csv) == 5);
  const std::size_t mean = csv.find("mean,");
  REQUIRE(mean != std::string::npos);
  const std::string ap = csv.substr(csv.rfind(',') + 1, 6);
  CHECK(ra.output.find("test AP50 " + ap) != std::string::npos);

  CHECK(run("eval --config " + cfg.string() + " --out " + (dir / "none").string(), dir).code != 0);
}

TEST_CASE("an aborted run keeps its partial log and exits with 1") {
  const fs::path dir = scratch("abort");
  const fs::path cfg = write_config(dir, std::string(kSmallConfig) + "train.learning_rate = 1e12\n");
  const Result r = run("train --config " + cfg.string() + " --out " + (dir / "o").string(), dir);
  CHECK(r.code == 1);
  CHECK(r.output.find("aborted") != std::string::npos);
  const int lines = count_lines(slurp(dir / "o" / "train_log.jsonl"));
  CHECK(lines > 0);
  CHECK(lines < 20);
}

TEST_CASE("compare trains one run per strategy") {
  const fs::path dir = scratch("compare");
  const fs::path cfg = write_config(dir, kSmallConfig);
  const fs::path out = dir / "o";
  const Result r = run("compare --config " + cfg.string() + " --out " + out.string() +
                           " --strategy autoassign --strategy center-sampling",
                       dir);
  REQUIRE(r.code == 0);
  const std::string csv = slurp(out / "compare.csv");
  CHECK(r.output == csv);
  CHECK(csv.rfind("strategy,ap50,ap50_cat0,ap50_cat1,ap50_cat2\n", 0) == 0);
  CHECK(csv.find("\nautoassign,") != std::string::npos);
  CHECK(csv.find("\ncenter-sampling,") != std::string::npos);
  CHECK(fs::exists(out / "center-sampling" / "train_log.jsonl"));
  CHECK(slurp(out / "center-sampling" / "resolved.cfg").find("assign.strategy = center-sampling\n") !=
        std::string::npos);
}

TEST_CASE("dump-weights exports one scene and rejects unknown ids") {
  const fs::path dir = scratch("dump");
  const fs::path cfg = write_config(dir, kSmallConfig);
  const fs::path out = dir / "o";
  REQUIRE(run("train --config " + cfg.string() + " --out " + out.string(), dir).code == 0);
  REQUIRE(run("dump-weights --config " + cfg.string() + " --out " + out.string() + " --scene 2", dir).code == 0);
  const fs::path scene = out / "weights" / "scene_2";
  REQUIRE(fs::exists(scene));
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(scene)) names.push_back(entry.path().filename().string());
  CHECK(std::count_if(names.begin(), names.end(), [](const std::string& n) { return n.rfind("negative", 0) == 0; }) == 2);
  CHECK(std::count_if(names.begin(), names.end(), [](const std::string& n) { return n.rfind("positive", 0) == 0; }) >= 2);

  const Result missing = run("dump-weights --config " + cfg.string() + " --out " + out.string() + " --scene 4", dir);
  CHECK(missing.code == 2);
  CHECK(missing.output.find("not found") != std::string::npos);
}

TEST_CASE("sweep trains once per value of the chosen key") {
  const fs::path dir = scratch("sweep");
  const fs::path cfg = write_config(dir, kSmallConfig);
  const fs::path out = dir / "o";
  const Result r = run("sweep --config " + cfg.string() + " --out " + out.string() +
                           " --param assign.lambda --values 2,5",
                       dir);
  REQUIRE(r.code == 0);
  const std::string csv = slurp(out / "sweep.csv");
  CHECK(r.output == csv);
  CHECK(count_lines(csv) == 3);
  CHECK(slurp(out / "assign.lambda=2" / "resolved.cfg").find("assign.lambda = 2\n") != std::string::npos);
  CHECK(run("sweep --config " + cfg.string() + " --out " + out.string() + " --param assign.nope --values 1", dir)
            .code == 2);
  CHECK(run("sweep --config " + cfg.string() + " --out " + out.string() + " --param assign.tau --values -1", dir)
            .code == 2);
}
