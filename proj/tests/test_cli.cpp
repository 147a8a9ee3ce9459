#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "vop/cli.hpp"

using namespace vop;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli_main(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "vop_test_cli" / name;
  fs::remove_all(d);
  return d;
}

std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string l; std::getline(in, l);) ++n;
  return n;
}

}  // namespace

TEST_CASE("usage errors") {
  CHECK(run({}).code == kExitUsage);
  CHECK(run({"bogus"}).code == kExitUsage);
  CHECK(run({"gen-data", "--episodes", "x"}).code == kExitUsage);
  CHECK(run({"--config", "/nonexistent/cfg.json", "gen-data"}).code == kExitUsage);
  const Run help = run({"train-policy", "--help"});
  CHECK(help.code == kExitOk);
  for (const char* flag : {"--horizon", "--gamma", "--epochs", "--n-seeds", "--omega-x", "--omega-theta"}) {
    CHECK(help.out.find(flag) != std::string::npos);
  }
  CHECK(help.out.find("[65]") != std::string::npos);
  const Run top = run({"--help"});
  CHECK(top.out.find("--out TEXT [run]") != std::string::npos);
}

TEST_CASE("gen-data writes the requested records") {
  const fs::path out = fresh_dir("gen");
  const Run r = run({"gen-data", "--episodes", "2", "--steps", "3", "--seed", "5", "--out", out.string()});
  REQUIRE(r.code == kExitOk);
  CHECK(count_lines(out / "data" / "batch.jsonl") == 1 + 6);
  CHECK(fs::exists(out / "manifest.json"));
}

TEST_CASE("missing upstream artifacts exit with 2 and name the path") {
  const fs::path out = fresh_dir("missing");
  Run r = run({"evaluate", "--out", out.string()});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("missing artifact") != std::string::npos);
  r = run({"train-models", "--out", out.string()});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find((out / "data" / "batch.jsonl").string()) != std::string::npos);
  r = run({"serve", "--out", out.string(), "--port", "0"});
  CHECK(r.code == kExitUsage);
}

TEST_CASE("config file and flag layering") {
  const fs::path out = fresh_dir("layer");
  fs::create_directories(out);
  const fs::path cfg = out / "cfg.json";
  std::ofstream(cfg) << R"({"dataset": {"episodes": 3, "steps": 4, "seed": 1}})";
  REQUIRE(run({"--config", cfg.string(), "gen-data", "--out", out.string()}).code == kExitOk);
  CHECK(count_lines(out / "data" / "batch.jsonl") == 1 + 12);
  REQUIRE(run({"--config", cfg.string(), "gen-data", "--steps", "2", "--out", out.string()}).code == kExitOk);
  CHECK(count_lines(out / "data" / "batch.jsonl") == 1 + 6);

  std::ofstream(cfg) << R"({"dataset": {"episodez": 3}})";
  const Run bad = run({"--config", cfg.string(), "gen-data", "--out", out.string()});
  CHECK(bad.code == kExitUsage);
  CHECK(bad.err.find("episodez") != std::string::npos);
}

TEST_CASE("small pipeline runs in order and is byte-reproducible") {
  const std::vector<std::string> common = {"--threads", "1"};
  auto pipeline = [&](const fs::path& out) {
    const std::string o = out.string();
    REQUIRE(run({"gen-data", "--episodes", "20", "--steps", "60", "--out", o}).code == kExitOk);
    REQUIRE(run({"train-models", "--k", "2", "--epochs", "2", "--out", o}).code == kExitOk);
    REQUIRE(run({"train-policy", "--n-seeds", "2", "--epochs", "1", "--horizon", "10", "--out", o}).code == kExitOk);
    REQUIRE(run({"evaluate", "--n-seeds", "2", "--out", o}).code == kExitOk);
    REQUIRE(run({"scenario", "--out", o}).code == kExitOk);
  };
  const fs::path a = fresh_dir("pipe_a");
  const fs::path b = fresh_dir("pipe_b");
  pipeline(a);
  pipeline(b);
  std::size_t compared = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), a);
    INFO(rel.string());
    REQUIRE(fs::exists(b / rel));
    CHECK(read_all(entry.path()) == read_all(b / rel));
    ++compared;
  }
  CHECK(compared > 15);
  for (const char* p : {"data/batch.jsonl", "models/report.json", "policy/seed_01/learning_curve.csv",
                        "eval/report.json", "eval/report.csv", "eval/scenario.json",
                        "eval/transfer_real.csv"}) {
    CHECK(fs::exists(a / p));
  }
  const std::string manifest = read_all(a / "manifest.json");
  for (const char* stage : {"gen-data", "train-models", "train-policy", "evaluate", "scenario"}) {
    CHECK(manifest.find(stage) != std::string::npos);
  }
  CHECK(manifest.find("config_hash") != std::string::npos);

  CHECK(run({"train-policy", "--omega-x", "1", "--out", a.string()}).code == kExitUsage);
  CHECK(run({"evaluate", "--n-seeds", "3", "--out", a.string()}).code == kExitUsage);
}
