#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ptqlab/allocator.hpp"
#include "ptqlab/gptq.hpp"
#include "ptqlab/hawq.hpp"
#include "ptqlab/model.hpp"
#include "ptqlab/quant.hpp"
#include "ptqlab/tasks.hpp"

namespace ptqlab {

struct TaskSuite {
  std::vector<TaskKind> tasks = {TaskKind::Copy, TaskKind::Reverse, TaskKind::PatternCompletion,
                                 TaskKind::HeldoutTokenAccuracy};
  std::size_t n_eval_prompts = 200;
  // Must differ from the training seed.
  std::uint64_t seed = 20251;
  std::size_t diffusion_steps = 16;

  void validate() const;
  nlohmann::json to_json() const;
  static TaskSuite from_json(const nlohmann::json& j);
};

struct TaskScore {
  TaskKind kind = TaskKind::Copy;
  double score = 0.0;
  friend bool operator==(const TaskScore&, const TaskScore&) = default;
};

/// Exact-match completion rate per generation task. AR checkpoints decode
/// greedily, diffusion checkpoints unmask the 6-byte completion in
/// suite.diffusion_steps steps. heldout_token_accuracy is the share of
/// completion tokens predicted correctly from one forward: teacher-forced for
/// AR, with the whole completion masked for diffusion.
std::vector<TaskScore> evaluate_tasks(const ModelCheckpoint& ckpt, const TaskSuite& suite);

// Mean over the exact-match tasks present in `scores`.
double exact_match_mean(const std::vector<TaskScore>& scores);

enum class UnitOfWork { ArToken, DiffusionStep };
std::string to_string(UnitOfWork u);
UnitOfWork parse_unit_of_work(std::string_view text);
UnitOfWork native_unit(GenerationMode mode);

struct LatencyConfig {
  std::size_t warmup_runs = 200;
  std::size_t timed_runs = 2000;
  std::size_t seq_len = 128;
  // Defaults to the checkpoint's native unit.
  std::optional<UnitOfWork> unit;

  void validate() const;
  nlohmann::json to_json() const;
  static LatencyConfig from_json(const nlohmann::json& j);
};

struct LatencyStats {
  double mean_ms = 0.0;
  double std_ms = 0.0;
  std::size_t warmup_runs = 0;
  std::size_t timed_runs = 0;
  std::size_t seq_len = 0;
  UnitOfWork unit = UnitOfWork::ArToken;
  double timer_resolution_ms = 0.0;
  bool coarse_timer = false;
};

/// Times exactly one unit of work per run on a monotonic clock: one
/// next-token forward over a seq_len context (logits for the last position
/// only) for ar_token, one full-sequence forward for diffusion_step. Reports
/// the sample mean and sample standard deviation of the timed runs.
LatencyStats measure_latency(const ModelCheckpoint& ckpt, const LatencyConfig& cfg,
                             std::vector<double>* samples_ms = nullptr);

struct EvalResult {
  std::string model;
  GenerationMode mode = GenerationMode::AR;
  std::string method;        // baseline | rtn | gptq | hawq
  std::string bits_or_plan;  // "16", "4", "16/8", ...
  std::vector<TaskScore> scores;
  std::optional<LatencyStats> latency;
  double raw_bits = 16.0;
  double eff_bits = 16.0;
  std::uint64_t seed = 0;
  std::string config_hash;
  bool failed = false;
  std::string error;

  double task_score() const { return exact_match_mean(scores); }
  std::optional<double> score_for(TaskKind kind) const;
};

nlohmann::json eval_result_to_json(const EvalResult& r);
EvalResult eval_result_from_json(const nlohmann::json& j);

struct HawqPlanSpec {
  std::string name;
  SplitRatios ratios;
  BitRemap remap = BitRemap::None;
};

struct GridSpec {
  bool include_baseline = true;
  std::vector<std::string> methods = {"rtn", "gptq"};
  std::vector<int> bits = {2, 3, 4, 8};
  std::vector<HawqPlanSpec> hawq_plans = {
      {"16/8", {0.5, 0.5, 0.0}, BitRemap::None},
      {"8/4", {0.5, 0.5, 0.0}, BitRemap::EightFour},
  };
  RankingMode ranking = RankingMode::Raw;
  // Quantizer that realizes HAWQ plans: "rtn" or "gptq".
  std::string hawq_quantizer = "gptq";
  std::size_t group_size = kDefaultGroupSize;
  bool include_embeddings = false;
  bool measure_latency = false;

  nlohmann::json to_json() const;
  static GridSpec from_json(const nlohmann::json& j);
};

// One model of the pair with its calibration data.
struct GridModel {
  std::string name;
  ModelCheckpoint checkpoint;
  std::vector<Batch> calibration;  // GPTQ Hessians
  std::vector<Batch> sensitivity;  // HAWQ curvature
};

struct GridSettings {
  GptqConfig gptq;
  SensitivityConfig sensitivity;
  TaskSuite suite;
  LatencyConfig latency;
  std::string cache_dir;  // empty disables caching
  std::function<void(const std::string&)> log;
};

struct GridCell {
  std::string model;
  std::string method;
  std::string bits_or_plan;
};

// Cells in execution order: per model the baseline, each method at each width,
// then the HAWQ plans.
std::vector<GridCell> plan_grid(const std::vector<std::string>& models, const GridSpec& spec);

/// Evaluates every cell. Results are cached under cache_dir by a hash of the
/// checkpoint bytes, calibration data and cell settings, so a rerun of a
/// completed grid performs no forward passes. A failing cell becomes a row
/// with failed=true and the grid moves on.
std::vector<EvalResult> run_experiment_grid(const std::vector<GridModel>& models,
                                            const GridSpec& spec, const GridSettings& settings);

// Quantized checkpoint for one cell (exposed for the quantize subcommand).
struct CellModel {
  ModelCheckpoint checkpoint;
  QuantPlan plan;
  std::map<std::string, QuantizedWeight> quantized;
  std::vector<GptqLayerReport> gptq_report;
};
CellModel build_cell_model(const GridModel& model, const std::string& method, const QuantPlan& plan,
                           const GptqConfig& gptq);

std::string batches_digest(const std::vector<Batch>& batches);

}  // namespace ptqlab
