#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "ptqlab/checkpoint_io.hpp"
#include "ptqlab/pipeline.hpp"

using namespace ptqlab;
namespace fs = std::filesystem;

namespace {

const std::string kSmoke = std::string(PTQLAB_SOURCE_DIR) + "/configs/smoke.json";

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " \"" PTQLAB_CLI_PATH "\" " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), p) != nullptr) r.out += buf.data();
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ptqlab_test_" + name);
  fs::remove_all(p);
  return p;
}

nlohmann::json smoke_json() { return nlohmann::json::parse(slurp(kSmoke)); }

}  // namespace

TEST_CASE("pipeline config validation") {
  const PipelineConfig c = load_pipeline_config(kSmoke);
  CHECK(c.train.steps == 30);
  CHECK(fs::path(c.train.corpus_path).is_absolute());
  CHECK(fs::exists(c.train.corpus_path));
  CHECK(c.train.seed == c.seed);
  CHECK(PipelineConfig::from_json(c.to_json()).hash() == c.hash());

  nlohmann::json j = smoke_json();
  j["bogus"] = 1;
  CHECK_THROWS_AS(PipelineConfig::from_json(j), FormatError);
  j = smoke_json();
  j["suite"]["seed"] = j["seed"];
  CHECK_THROWS_AS(PipelineConfig::from_json(j), ParameterError);
  j = smoke_json();
  j["train"]["steps"] = 0;
  CHECK_THROWS_AS(PipelineConfig::from_json(j), ParameterError);
  j = smoke_json();
  j["gptq"]["damping"] = "lots";
  CHECK_THROWS_AS(PipelineConfig::from_json(j), FormatError);
  CHECK_THROWS_AS(load_pipeline_config("/nonexistent/ptqlab.json"), IoError);

  PipelineConfig other = c;
  other.seed += 1;
  other.train.seed = other.seed;
  CHECK(other.hash() != c.hash());
  PipelineConfig moved = c;
  moved.workspace = "elsewhere";
  CHECK(moved.hash() == c.hash());
}

TEST_CASE("cli usage errors and dry run") {
  const Run dry = run("-c \"" + kSmoke + "\" reproduce --dry-run");
  CHECK(dry.code == 0);
  CHECK(dry.out.find("grid: 22 cells") != std::string::npos);
  CHECK(dry.out.find("sweep: 4 cells") != std::string::npos);
  const Run defaults = run("reproduce --dry-run");
  CHECK(defaults.out.find("grid: 22 cells") != std::string::npos);
  CHECK(defaults.out.find("sweep: 8 cells") != std::string::npos);

  const Run bogus = run("reproduce --bogus");
  CHECK(bogus.code != 0);
  CHECK(bogus.out.find("\"kind\":\"usage\"") != std::string::npos);
  const Run missing = run("-c /nonexistent.json train");
  CHECK(missing.code == 2);
  CHECK(missing.out.find("\"kind\":\"io\"") != std::string::npos);
  const Run bad_bits = run("-c \"" + kSmoke + "\" quantize --model ar --method gptq --bits 5");
  CHECK(bad_bits.code != 0);
  CHECK(run("--help").code == 0);
}

TEST_CASE("workspace precedence") {
  const fs::path env_ws = scratch("env_ws"), flag_ws = scratch("flag_ws");
  const std::string env = "PTQLAB_WORKSPACE=\"" + env_ws.string() + "\"";
  CHECK(run("-c \"" + kSmoke + "\" -q train --model ar", env).code == 0);
  CHECK(fs::exists(env_ws / "train/ar.ckpt"));
  CHECK(run("-c \"" + kSmoke + "\" -q -w \"" + flag_ws.string() + "\" train --model ar", env).code == 0);
  CHECK(fs::exists(flag_ws / "train/ar.ckpt"));
  fs::remove_all(env_ws);
  fs::remove_all(flag_ws);
}

TEST_CASE("staged commands and hash checks") {
  const fs::path ws = scratch("stages");
  const std::string base = "-c \"" + kSmoke + "\" -q -w \"" + ws.string() + "\" ";
  REQUIRE(run(base + "train").code == 0);
  const auto ar_bytes = read_file_bytes((ws / "train/ar.ckpt").string());
  CHECK(run(base + "train").code == 0);
  CHECK(read_file_bytes((ws / "train/ar.ckpt").string()) == ar_bytes);

  const Run q = run(base + "quantize --model diffusion --method gptq --bits 4 --export-codes");
  REQUIRE(q.code == 0);
  const fs::path qck = ws / "quantized/diffusion-gptq-4.ckpt";
  CHECK(fs::exists(qck));
  CHECK(fs::exists(qck.string() + ".plan.json"));
  CHECK(fs::exists(qck.string() + ".gptq.csv"));
  CHECK_FALSE(load_checkpoint_file(qck.string()).quantized.empty());

  CHECK(run(base + "sensitivity").code == 0);
  CHECK(fs::exists(ws / "sensitivity/ar.json"));
  const Run assign = run(base + "assign --model ar --ratios 0.2,0.3,0.5");
  CHECK(assign.code == 0);
  CHECK(assign.out.find("hawq_split") != std::string::npos);
  CHECK(run(base + "assign --model ar --budget 6").code == 0);
  const fs::path plan = ws / "plans/ar-split-0.200-0.300-0.500.json";
  CHECK(fs::exists(plan));
  CHECK(fs::exists(ws / "plans/ar-budget-6.00.json"));
  const Run qp = run(base + "quantize --model ar --method gptq --plan \"" + plan.string() + "\"");
  CHECK(qp.code == 0);
  CHECK(fs::exists(ws / "quantized/ar-gptq-ar-split-0.200-0.300-0.500.ckpt"));
  CHECK(run(base + "assign --model ar --ratios 0.2,0.3").code == 2);

  const Run ev = run(base + "eval --checkpoint \"" + qck.string() + "\"");
  CHECK(ev.code == 0);
  CHECK(ev.out.find("task_score") != std::string::npos);

  // A config with another seed no longer matches the trained checkpoints.
  nlohmann::json j = smoke_json();
  j["seed"] = 100;
  j["train"]["corpus_path"] = std::string(PTQLAB_SOURCE_DIR) + "/data/corpus.txt";
  const fs::path other = ws / "other.json";
  std::ofstream(other) << j.dump();
  const std::string other_base = "-c \"" + other.string() + "\" -q -w \"" + ws.string() + "\" ";
  const Run refused = run(other_base + "eval --checkpoint \"" + qck.string() + "\"");
  CHECK(refused.code == 2);
  CHECK(refused.out.find("--force") != std::string::npos);
  CHECK(run(other_base + "--force eval --checkpoint \"" + qck.string() + "\"").code == 0);
  CHECK(run(other_base + "sensitivity").code == 2);

  CHECK(run(base + "bench").code == 0);
  CHECK(fs::exists(ws / "results/latency.csv"));
  {
    FileLock held((ws / "bench.lock").string());
    CHECK(run(base + "bench").code == 2);
  }
  fs::remove_all(ws);
}

TEST_CASE("reproduce is deterministic across workspaces") {
  const fs::path a = scratch("repro_a"), b = scratch("repro_b");
  REQUIRE(run("-c \"" + kSmoke + "\" -q -w \"" + a.string() + "\" reproduce").code == 0);
  REQUIRE(run("-c \"" + kSmoke + "\" -q -w \"" + b.string() + "\" reproduce").code == 0);
  for (const char* f : {"results.csv", "table.md", "report.json", "pareto.svg", "sweep.csv"}) {
    CAPTURE(f);
    CHECK(slurp(a / "report" / f) == slurp(b / "report" / f));
  }
  const std::string csv = slurp(a / "report/results.csv");
  std::size_t lines = 0;
  for (char ch : csv) lines += ch == '\n';
  CHECK(lines == 1 + 22 * 4);

  // Rerunning in place hits the cache and rewrites the same bytes.
  REQUIRE(run("-c \"" + kSmoke + "\" -q -w \"" + a.string() + "\" reproduce").code == 0);
  CHECK(slurp(a / "report/results.csv") == csv);
  CHECK(run("-c \"" + kSmoke + "\" -q -w \"" + a.string() + "\" report --formats markdown --out \"" +
            (a / "r2").string() + "\"")
            .code == 0);
  CHECK(slurp(a / "r2/table.md") == slurp(a / "report/table.md"));
  fs::remove_all(a);
  fs::remove_all(b);
}
