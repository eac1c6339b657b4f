#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int status = -1;
  std::string output;  // stdout + stderr interleaved
};

const std::string& cli_path() {
  static const std::string path = [] {
    const char* p = std::getenv("SPN_CLI_PATH");
    REQUIRE_MESSAGE(p != nullptr, "SPN_CLI_PATH must point at the spn binary");
    return std::string(p);
  }();
  return path;
}

RunResult run(const std::string& args) {
  const std::string cmd = "'" + cli_path() + "' " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  RunResult r;
  std::array<char, 4096> buf;
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) r.output.append(buf.data(), n);
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("spn_cli_test_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string sub(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

int count_lines(const std::string& text) {
  int n = 0;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) ++n;
  return n;
}

}  // namespace

TEST_CASE("help text lists the subcommands; bare invocation is a usage error") {
  RunResult help = run("--help");
  CHECK(help.status == 0);
  for (const char* sub : {"train", "eval", "segment", "complexity", "gradcheck", "bench-knn", "synth"})
    CHECK(help.output.find(sub) != std::string::npos);

  CHECK(run("").status == 1);
  CHECK(run("train --no-such-flag").status == 1);
  CHECK(run("frobnicate").status == 1);

  for (const char* sub : {"train", "eval", "complexity", "gradcheck", "synth"})
    CHECK(run(std::string(sub) + " --help").status == 0);
}

TEST_CASE("train/eval on the synthetic set: artifacts, determinism, reuse") {
  TempDir tmp;
  const std::string base = "--synth --per-class 4 --points 256 --epochs 2 --batch 4";
  const std::string common = base + " --seed 7";

  RunResult t1 = run("train " + common + " --out " + tmp.sub("run1"));
  CHECK_MESSAGE(t1.status == 0, t1.output);

  const fs::path run1 = tmp.path / "run1";
  REQUIRE(fs::exists(run1 / "model.spnm"));
  REQUIRE(fs::exists(run1 / "train_log.jsonl"));
  REQUIRE(fs::exists(run1 / "metrics.json"));

  CHECK(count_lines(slurp(run1 / "train_log.jsonl")) == 2);  // one line per epoch
  const json metrics = json::parse(slurp(run1 / "metrics.json"));
  CHECK(metrics.contains("overall_accuracy"));
  CHECK(t1.output.find("overall_accuracy") != std::string::npos);

  RunResult t2 = run("train " + common + " --out " + tmp.sub("run2"));
  CHECK(t2.status == 0);
  CHECK(slurp(run1 / "model.spnm") == slurp(tmp.path / "run2" / "model.spnm"));

  // epoch logs match apart from wall-clock timing
  auto log_lines = [&](const fs::path& p) {
    std::vector<json> rows;
    std::istringstream in(slurp(p));
    for (std::string line; std::getline(in, line);)
      if (!line.empty()) {
        json row = json::parse(line);
        row.erase("wall_ms");
        rows.push_back(std::move(row));
      }
    return rows;
  };
  CHECK(log_lines(run1 / "train_log.jsonl") == log_lines(tmp.path / "run2" / "train_log.jsonl"));

  RunResult t3 = run("train " + base + " --seed 8 --out " + tmp.sub("run3"));
  CHECK_MESSAGE(t3.status == 0, t3.output);
  CHECK(slurp(run1 / "model.spnm") != slurp(tmp.path / "run3" / "model.spnm"));

  // evaluating the checkpoint on the same held-out split reproduces metrics
  RunResult ev = run("eval --synth --per-class 4 --points 256 --seed 7 --model " +
                     (run1 / "model.spnm").string());
  CHECK_MESSAGE(ev.status == 0, ev.output);
  const auto brace = ev.output.find('{');
  REQUIRE(brace != std::string::npos);
  const json ev_json = json::parse(ev.output.substr(brace));
  CHECK(ev_json["overall_accuracy"].get<double>() ==
        metrics["overall_accuracy"].get<double>());

  // a classifier checkpoint is rejected by the segmentation command
  CHECK(run("segment --synth --per-class 2 --points 256 --seed 7 --model " +
            (run1 / "model.spnm").string())
            .status == 1);
}

TEST_CASE("exit codes: io failures are 2, verification failures are 3") {
  TempDir tmp;
  CHECK(run("eval --synth --model " + tmp.sub("missing.spnm")).status == 2);
  CHECK(run("train --data " + tmp.sub("no_dataset") + " --out " + tmp.sub("o")).status == 2);
  CHECK(run("train --out " + tmp.sub("o2")).status == 1);  // neither --synth nor --data
  CHECK(run("gradcheck --inject-fault").status == 3);
  CHECK(run("train --synth --per-class 2 --points 256 --epochs 1 --groups 7 --out " +
            tmp.sub("o3"))
            .status == 1);  // group count does not divide the widths
}

TEST_CASE("complexity report and group sweep artifacts") {
  TempDir tmp;
  RunResult rep = run("complexity --points 1024 --out " + tmp.sub("c"));
  CHECK(rep.status == 0);
  CHECK(rep.output.find("params") != std::string::npos);
  const json report = json::parse(slurp(tmp.path / "c" / "report.json"));
  CHECK(report["params"].get<long long>() > 0);
  CHECK(report["flops"].get<long long>() > 0);
  CHECK(slurp(tmp.path / "c" / "report.txt") == rep.output);

  RunResult sweep =
      run("complexity --in-channels 4 --sweep-groups 1,2,4,8 --out " + tmp.sub("s"));
  CHECK(sweep.status == 0);
  const json rows = json::parse(slurp(tmp.path / "s" / "sweep.json"));
  REQUIRE(rows.size() == 4);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    CHECK(rows[i]["params"].get<long long>() < rows[i - 1]["params"].get<long long>());
    CHECK(rows[i]["grouped_flops"].get<long long>() * 2 ==
          rows[i - 1]["grouped_flops"].get<long long>());
  }

  CHECK(run("complexity --sweep-groups 1,banana").status == 1);
  CHECK(run("complexity --sweep-groups 1,64").status == 1);  // 64 divides nothing
}

TEST_CASE("gradcheck passes clean and prints one verdict per case") {
  RunResult r = run("gradcheck --seed 5");
  CHECK_MESSAGE(r.status == 0, r.output);
  CHECK(r.output.find("FAIL") == std::string::npos);
  CHECK(count_lines(r.output) > 20);  // every op plus composite cases, then summary
  CHECK(r.output.find("gradcheck:") != std::string::npos);
  CHECK(r.output.find("0 failed") != std::string::npos);

  RunResult bad = run("gradcheck --inject-fault");
  CHECK(bad.status == 3);
  CHECK(bad.output.find("FAIL") != std::string::npos);
}

TEST_CASE("synth writes loadable cloud files in both formats") {
  TempDir tmp;
  RunResult bin = run("synth --per-class 2 --points 32 --out " + tmp.sub("bin"));
  CHECK(bin.status == 0);
  int spnc = 0;
  for (const auto& e : fs::directory_iterator(tmp.path / "bin"))
    spnc += e.path().extension() == ".spnc";
  CHECK(spnc == 8);  // 4 classes x 2

  RunResult txt =
      run("synth --per-class 1 --points 32 --format text --segmentation --out " + tmp.sub("txt"));
  CHECK(txt.status == 0);
  int found = 0;
  for (const auto& e : fs::directory_iterator(tmp.path / "txt")) {
    found += e.path().extension() == ".txt";
    const std::string body = slurp(e.path());
    CHECK(body.find("label-mode per-point") != std::string::npos);
  }
  CHECK(found == 4);

  CHECK(run("synth --per-class 1 --points 32").status == 1);  // --out required
}

TEST_CASE("training accepts clouds from disk and evaluates a separate set") {
  TempDir tmp;
  REQUIRE(run("synth --per-class 3 --points 256 --seed 3 --out " + tmp.sub("data")).status == 0);
  REQUIRE(run("synth --per-class 1 --points 256 --seed 4 --out " + tmp.sub("holdout")).status == 0);

  RunResult t = run("train --data " + tmp.sub("data") + " --eval-data " + tmp.sub("holdout") +
                    " --epochs 1 --batch 4 --seed 2 --out " + tmp.sub("run"));
  CHECK_MESSAGE(t.status == 0, t.output);
  REQUIRE(fs::exists(tmp.path / "run" / "model.spnm"));

  RunResult ev = run("eval --data " + tmp.sub("holdout") + " --model " +
                     (tmp.path / "run" / "model.spnm").string());
  CHECK_MESSAGE(ev.status == 0, ev.output);
  CHECK(ev.output.find("overall_accuracy") != std::string::npos);
}

TEST_CASE("segmentation pipeline end to end with prediction dumps") {
  TempDir tmp;
  // --segmentation belongs to train; the segment command implies it
  const std::string data = "--synth --per-class 3 --points 256 --seed 11";
  RunResult t =
      run("train " + data + " --segmentation --epochs 1 --batch 4 --out " + tmp.sub("seg"));
  CHECK_MESSAGE(t.status == 0, t.output);

  RunResult s = run("segment " + data + " --model " + (tmp.path / "seg" / "model.spnm").string() +
                    " --out " + tmp.sub("pred"));
  CHECK_MESSAGE(s.status == 0, s.output);
  CHECK(s.output.find("miou") != std::string::npos);
  int dumps = 0;
  for (const auto& e : fs::directory_iterator(tmp.path / "pred"))
    dumps += e.path().filename().string().rfind("pred_", 0) == 0;
  CHECK(dumps > 0);

  // the classifier eval command refuses the segmentation checkpoint
  CHECK(run("eval " + data + " --model " + (tmp.path / "seg" / "model.spnm").string()).status == 1);
}
