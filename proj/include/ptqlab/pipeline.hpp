#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ptqlab/allocator.hpp"
#include "ptqlab/eval.hpp"
#include "ptqlab/gptq.hpp"
#include "ptqlab/hawq.hpp"
#include "ptqlab/report.hpp"
#include "ptqlab/trainer.hpp"

namespace ptqlab {

struct CalibrationConfig {
  std::size_t gptq_batches = 4;
  // Diffusion models calibrate on the masked training distribution unless set.
  bool unmasked = false;
};

struct AllocationConfig {
  SplitRatios ratios{0.5, 0.5, 0.0};
  BitRemap remap = BitRemap::None;
  std::optional<double> budget_avg_bits;
  RankingMode ranking = RankingMode::Raw;
};

struct PipelineConfig {
  std::string workspace = "workspace";
  std::uint64_t seed = 1234;
  TrainConfig train;
  CalibrationConfig calibration;
  GptqConfig gptq;
  SensitivityConfig sensitivity;
  AllocationConfig allocation;
  TaskSuite suite;
  LatencyConfig latency;
  GridSpec grid;
  std::vector<SplitRatios> sweep = {
      {0.2, 0.3, 0.5}, {0.25, 0.25, 0.5}, {0.34, 0.33, 0.33}, {0.5, 0.25, 0.25}};

  // Checks every section together; throws before any stage runs.
  void validate() const;
  nlohmann::json to_json() const;
  static PipelineConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

// Reads a JSON config. An empty path yields the defaults.
PipelineConfig load_pipeline_config(const std::string& path);

// Paths inside a workspace directory.
class Workspace {
 public:
  explicit Workspace(std::string root) : root_(std::move(root)) {}
  const std::string& root() const noexcept { return root_; }
  std::string checkpoint(GenerationMode mode) const;
  std::string train_log(GenerationMode mode) const;
  std::string sensitivity(GenerationMode mode) const;
  std::string plan(GenerationMode mode, const std::string& name) const;
  std::string quantized(GenerationMode mode, const std::string& method, const std::string& bits) const;
  std::string results_dir() const;
  std::string report_dir() const;
  std::string cache_dir() const;
  std::string bench_lock() const;

 private:
  std::string root_;
};

std::string model_name(GenerationMode mode);
GenerationMode parse_model_name(std::string_view name);

using LogFn = std::function<void(const std::string&)>;

std::vector<Batch> calibration_batches(const PipelineConfig& cfg, GenerationMode mode);
std::vector<Batch> sensitivity_batches(const PipelineConfig& cfg, GenerationMode mode);

// Trains when no checkpoint exists. An existing checkpoint from a different
// configuration is refused unless `force`, which retrains it.
ModelCheckpoint ensure_trained(const PipelineConfig& cfg, GenerationMode mode, bool force, const LogFn& log);

// Loads the trained checkpoint, refusing one whose config hash differs unless `force`.
ModelCheckpoint load_trained(const PipelineConfig& cfg, GenerationMode mode, bool force);

std::vector<SensitivityRecord> run_sensitivity_stage(const PipelineConfig& cfg, GenerationMode mode,
                                                     bool force, const LogFn& log);

// Plan from the workspace sensitivity report: split ratios, or the budget
// search when allocation.budget_avg_bits is set.
QuantPlan run_assign_stage(const PipelineConfig& cfg, GenerationMode mode, bool force);

struct BenchOptions {
  bool force = false;
  LogFn log;
};
std::vector<LatencyRow> run_bench_stage(const PipelineConfig& cfg, const BenchOptions& opts);

struct ReproduceOutcome {
  std::vector<EvalResult> grid;
  std::vector<EvalResult> sweep;
  std::string report_dir;
};

std::vector<GridCell> reproduce_plan(const PipelineConfig& cfg, std::vector<GridCell>* sweep_cells = nullptr);
GridSpec sweep_spec(const PipelineConfig& cfg);

// Train, evaluate the grid and the three-way sweep, then write the report.
ReproduceOutcome run_reproduce(const PipelineConfig& cfg, bool force, bool bench, const LogFn& log);

// Rebuilds the report from grid results, sweep results and bench output in the workspace.
Report load_workspace_report(const PipelineConfig& cfg);

// Exclusive lock held for the lifetime of the object.
class FileLock {
 public:
  explicit FileLock(std::string path);
  ~FileLock();
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  std::string path_;
  int fd_ = -1;
};

}  // namespace ptqlab
