#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "ptqlab/eval.hpp"

namespace ptqlab {

// One line of results.csv:
// model,mode,method,bits_or_plan,task,score,lat_mean_ms,lat_std_ms,raw_bits,eff_bits,seed,config_hash
// Floats are written with 3 decimals; absent values are empty fields. A
// failed cell is a single row with task "failed" and no score.
struct ResultRow {
  std::string model;
  std::string mode;
  std::string method;
  std::string bits_or_plan;
  std::string task;
  std::optional<double> score;
  std::optional<double> lat_mean_ms;
  std::optional<double> lat_std_ms;
  double raw_bits = 0.0;
  double eff_bits = 0.0;
  std::uint64_t seed = 0;
  std::string config_hash;
};

inline constexpr const char* kResultsCsvHeader =
    "model,mode,method,bits_or_plan,task,score,lat_mean_ms,lat_std_ms,raw_bits,eff_bits,seed,config_hash";

std::vector<ResultRow> rows_from_results(const std::vector<EvalResult>& results);
std::string results_csv(const std::vector<ResultRow>& rows);
std::vector<ResultRow> parse_results_csv(const std::string& text);
std::string results_jsonl(const std::vector<EvalResult>& results);
std::vector<EvalResult> parse_results_jsonl(const std::string& text);

// Output of the bench stage.
struct LatencyRow {
  std::string model;
  std::string mode;
  std::string method;
  std::string bits_or_plan;
  double raw_bits = 16.0;
  LatencyStats stats;
};

std::string latency_csv(const std::vector<LatencyRow>& rows);
std::vector<LatencyRow> parse_latency_csv(const std::string& text);

// "%.3f" with negative zero printed as 0.000.
std::string fmt3(double v);
// Diffusion score followed by the AR score in parentheses; "-" for a missing side.
std::string format_cell(std::optional<double> diffusion, std::optional<double> ar);

struct DegradationCell {
  std::optional<double> diffusion;
  std::optional<double> ar;
  std::optional<double> diffusion_delta;
  std::optional<double> ar_delta;
};

struct DegradationRow {
  std::string level;
  std::vector<DegradationCell> cells;  // one per task
};

struct DegradationTable {
  std::string method;
  std::vector<TaskKind> tasks;
  std::vector<DegradationRow> rows;
};

// Rows: the 16-bit baseline, then `method` at each width from high to low,
// then HAWQ plans. Cells compare the diffusion model against the AR model.
DegradationTable build_degradation_table(const std::vector<EvalResult>& results,
                                         const std::string& method = "gptq");
std::string render_markdown(const DegradationTable& table);

struct ParetoPoint {
  std::string label;
  double bits = 0.0;
  double score = 0.0;
  bool dominated = false;
};

struct ParetoResult {
  std::vector<ParetoPoint> points;    // input order, flags set
  std::vector<ParetoPoint> frontier;  // bits ascending
};

// Maximize score, minimize bits. Among identical points the first by label
// survives.
ParetoResult pareto_frontier(const std::vector<ParetoPoint>& points);

struct TrendFlag {
  std::string name;
  std::string detail;
  bool holds = false;
};

// Monotone degradation (violations above 0.03 are flagged) and whether the
// diffusion model loses less than the AR model at 3 and 4 bits.
std::vector<TrendFlag> trend_flags(const std::vector<EvalResult>& results);

struct Report {
  std::vector<EvalResult> results;
  std::vector<EvalResult> sweep;
  std::vector<LatencyRow> latency;
};

std::string render_table_md(const Report& report);
nlohmann::json report_json(const Report& report);
std::string latency_svg(const Report& report);
std::string pareto_svg(const Report& report);

// Writes any of {csv, json, markdown, svg} into out_dir: results.csv (+ results.jsonl,
// sweep.csv), report.json, table.md, latency.svg and pareto.svg.
void emit(const Report& report, const std::set<std::string>& formats, const std::string& out_dir);

}  // namespace ptqlab
