#include "ptqlab/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "ptqlab/checkpoint_io.hpp"
#include "ptqlab/hash.hpp"

namespace ptqlab {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kCalibrationStream = 101;
constexpr std::uint64_t kSensitivityStream = 102;

TrainConfig train_config_for(const PipelineConfig& cfg, GenerationMode mode) {
  TrainConfig t = cfg.train;
  t.seed = cfg.seed;
  t.model.mode = mode;
  return t;
}

nlohmann::json read_json(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

void write_json(const std::string& path, const nlohmann::json& j) { write_text(path, j.dump(1) + "\n"); }

void require_file(const std::string& path, const std::string& producer) {
  if (!fs::exists(path)) {
    throw ContractError("missing " + path + "; run `ptqlab " + producer + "` first");
  }
}

void require_hash(const std::string& what, const std::string& expected, const std::string& actual,
                  bool force) {
  if (expected != actual && !force) {
    throw ContractError(what + " was produced by config " + actual + " but the current config is " +
                        expected + "; rerun the producing stage or pass --force");
  }
}

}  // namespace

void PipelineConfig::validate() const {
  if (workspace.empty()) throw ParameterError("workspace must not be empty");
  train.validate();
  gptq.validate();
  sensitivity.validate();
  allocation.ratios.validate();
  if (allocation.budget_avg_bits &&
      !(*allocation.budget_avg_bits >= 4.0 && *allocation.budget_avg_bits <= 16.0)) {
    throw ParameterError("budget_avg_bits must be within [4, 16]");
  }
  suite.validate();
  if (suite.seed == seed) {
    throw ParameterError("suite.seed must differ from the training seed so eval prompts are fresh");
  }
  latency.validate();
  if (latency.seq_len > train.model.max_seq_len) {
    throw ParameterError("latency.seq_len exceeds model.max_seq_len");
  }
  if (calibration.gptq_batches < 1) throw ParameterError("calibration.gptq_batches must be >= 1");
  for (const auto& r : sweep) r.validate();
}

nlohmann::json PipelineConfig::to_json() const {
  nlohmann::json sw = nlohmann::json::array();
  for (const auto& r : sweep) sw.push_back(r.to_json());
  nlohmann::json alloc = {{"ratios", allocation.ratios.to_json()},
                          {"remap", to_string(allocation.remap)},
                          {"ranking", to_string(allocation.ranking)}};
  alloc["budget_avg_bits"] = allocation.budget_avg_bits ? nlohmann::json(*allocation.budget_avg_bits)
                                                        : nlohmann::json(nullptr);
  nlohmann::json t = train.to_json();
  t.erase("seed");
  return {{"workspace", workspace},
          {"seed", seed},
          {"train", t},
          {"calibration", {{"gptq_batches", calibration.gptq_batches}, {"unmasked", calibration.unmasked}}},
          {"gptq", gptq.to_json()},
          {"sensitivity", sensitivity.to_json()},
          {"allocation", alloc},
          {"suite", suite.to_json()},
          {"latency", latency.to_json()},
          {"grid", grid.to_json()},
          {"sweep", sw}};
}

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {"workspace", "seed",  "train",   "calibration",
                                              "gptq",      "sensitivity", "allocation", "suite",
                                              "latency",   "grid",  "sweep"};
  if (!j.is_object()) throw FormatError("pipeline config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw FormatError("unknown config section '" + k + "'");
  }
  PipelineConfig c;
  try {
    c.workspace = j.value("workspace", c.workspace);
    c.seed = j.value("seed", c.seed);
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    c.train.seed = c.seed;
    if (j.contains("calibration")) {
      const auto& k = j.at("calibration");
      c.calibration.gptq_batches = k.value("gptq_batches", c.calibration.gptq_batches);
      c.calibration.unmasked = k.value("unmasked", c.calibration.unmasked);
    }
    if (j.contains("gptq")) c.gptq = GptqConfig::from_json(j.at("gptq"));
    if (j.contains("sensitivity")) c.sensitivity = SensitivityConfig::from_json(j.at("sensitivity"));
    if (j.contains("allocation")) {
      const auto& a = j.at("allocation");
      if (a.contains("ratios")) c.allocation.ratios = SplitRatios::from_json(a.at("ratios"));
      c.allocation.remap = parse_bit_remap(a.value("remap", std::string("none")));
      c.allocation.ranking = parse_ranking_mode(a.value("ranking", std::string("raw")));
      if (a.contains("budget_avg_bits") && !a.at("budget_avg_bits").is_null()) {
        c.allocation.budget_avg_bits = a.at("budget_avg_bits").get<double>();
      }
    }
    if (j.contains("suite")) c.suite = TaskSuite::from_json(j.at("suite"));
    if (j.contains("latency")) c.latency = LatencyConfig::from_json(j.at("latency"));
    if (j.contains("grid")) c.grid = GridSpec::from_json(j.at("grid"));
    if (j.contains("sweep")) {
      c.sweep.clear();
      for (const auto& r : j.at("sweep")) c.sweep.push_back(SplitRatios::from_json(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed pipeline config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string PipelineConfig::hash() const {
  nlohmann::json j = to_json();
  j.erase("workspace");
  j["train_hash"] = train_config_for(*this, GenerationMode::AR).config_hash();
  return hex64(fnv1a64(j.dump()));
}

PipelineConfig load_pipeline_config(const std::string& path) {
  if (path.empty()) {
    PipelineConfig c;
    c.validate();
    return c;
  }
  nlohmann::json j = read_json(path);
  // Relative corpus paths are resolved against the config file.
  if (j.contains("train") && j["train"].contains("corpus_path")) {
    const std::string p = j["train"]["corpus_path"].get<std::string>();
    if (!p.empty() && fs::path(p).is_relative()) {
      j["train"]["corpus_path"] = (fs::path(path).parent_path() / p).lexically_normal().string();
    }
  }
  return PipelineConfig::from_json(j);
}

std::string model_name(GenerationMode mode) { return mode == GenerationMode::AR ? "ar" : "diffusion"; }

GenerationMode parse_model_name(std::string_view name) {
  if (name == "ar") return GenerationMode::AR;
  if (name == "diffusion") return GenerationMode::Diffusion;
  throw ParameterError("model must be 'ar' or 'diffusion', got '" + std::string(name) + "'");
}

std::string Workspace::checkpoint(GenerationMode m) const {
  return (fs::path(root_) / "train" / (model_name(m) + ".ckpt")).string();
}
std::string Workspace::train_log(GenerationMode m) const {
  return (fs::path(root_) / "train" / (model_name(m) + "_loss.csv")).string();
}
std::string Workspace::sensitivity(GenerationMode m) const {
  return (fs::path(root_) / "sensitivity" / (model_name(m) + ".json")).string();
}
std::string Workspace::plan(GenerationMode m, const std::string& name) const {
  return (fs::path(root_) / "plans" / (model_name(m) + "-" + name + ".json")).string();
}
std::string Workspace::quantized(GenerationMode m, const std::string& method, const std::string& bits) const {
  return (fs::path(root_) / "quantized" / (model_name(m) + "-" + method + "-" + bits + ".ckpt")).string();
}
std::string Workspace::results_dir() const { return (fs::path(root_) / "results").string(); }
std::string Workspace::report_dir() const { return (fs::path(root_) / "report").string(); }
std::string Workspace::cache_dir() const { return (fs::path(root_) / "cache").string(); }
std::string Workspace::bench_lock() const { return (fs::path(root_) / "bench.lock").string(); }

std::vector<Batch> calibration_batches(const PipelineConfig& cfg, GenerationMode mode) {
  const TrainConfig t = train_config_for(cfg, mode);
  const GenerationMode source = cfg.calibration.unmasked ? GenerationMode::AR : mode;
  return heldout_batches(t, source, cfg.calibration.gptq_batches, kCalibrationStream);
}

std::vector<Batch> sensitivity_batches(const PipelineConfig& cfg, GenerationMode mode) {
  TrainConfig t = train_config_for(cfg, mode);
  t.batch_size = cfg.sensitivity.batch_size;
  return heldout_batches(t, mode, cfg.sensitivity.n_batches, kSensitivityStream);
}

ModelCheckpoint load_trained(const PipelineConfig& cfg, GenerationMode mode, bool force) {
  const Workspace ws(cfg.workspace);
  const std::string path = ws.checkpoint(mode);
  require_file(path, "train");
  ModelCheckpoint ck = load_checkpoint(path);
  require_hash(path, train_config_for(cfg, mode).config_hash(), ck.meta.config_hash, force);
  return ck;
}

ModelCheckpoint ensure_trained(const PipelineConfig& cfg, GenerationMode mode, bool force,
                               const LogFn& log) {
  const Workspace ws(cfg.workspace);
  const TrainConfig t = train_config_for(cfg, mode);
  const std::string path = ws.checkpoint(mode);
  if (fs::exists(path)) {
    ModelCheckpoint ck = load_checkpoint(path);
    if (ck.meta.config_hash == t.config_hash()) {
      if (log) log("reusing " + path);
      return ck;
    }
    require_hash(path, t.config_hash(), ck.meta.config_hash, force);
  }
  if (log) log("training " + model_name(mode) + " for " + std::to_string(t.steps) + " steps");
  TrainResult r = train(t);
  CheckpointFile file{r.checkpoint, {}, {{"stage", "train"}, {"config_hash", t.config_hash()}}};
  save_checkpoint(file, path);
  fs::create_directories(fs::path(ws.train_log(mode)).parent_path());
  write_train_log_csv(r.curve, ws.train_log(mode));
  if (log) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "heldout loss %.4f -> %.4f", r.initial_heldout_loss, r.final_heldout_loss);
    log(model_name(mode) + " " + buf);
  }
  return r.checkpoint;
}

namespace {

// Everything the sensitivity scores depend on; later stages compare against it.
std::string sensitivity_inputs_hash(const PipelineConfig& cfg, GenerationMode mode) {
  SensitivityConfig sc = cfg.sensitivity;
  sc.include_embeddings = cfg.grid.include_embeddings;
  const nlohmann::json j = {{"train", train_config_for(cfg, mode).config_hash()},
                            {"sensitivity", sc.to_json()},
                            {"batches", batches_digest(sensitivity_batches(cfg, mode))}};
  return hex64(fnv1a64(j.dump()));
}

}  // namespace

std::vector<SensitivityRecord> run_sensitivity_stage(const PipelineConfig& cfg, GenerationMode mode,
                                                     bool force, const LogFn& log) {
  const ModelCheckpoint ck = load_trained(cfg, mode, force);
  if (log) log("sensitivity " + model_name(mode));
  SensitivityConfig sc = cfg.sensitivity;
  sc.include_embeddings = cfg.grid.include_embeddings;
  const auto records = compute_model_sensitivities(ck, sensitivity_batches(cfg, mode), sc);
  const Workspace ws(cfg.workspace);
  nlohmann::json j = sensitivity_report_json(records, sc);
  j["train_config_hash"] = ck.meta.config_hash;
  j["config_hash"] = cfg.hash();
  j["inputs_hash"] = sensitivity_inputs_hash(cfg, mode);
  write_json(ws.sensitivity(mode), j);
  write_text(fs::path(ws.sensitivity(mode)).replace_extension(".csv").string(), sensitivity_csv(records));
  return records;
}

QuantPlan run_assign_stage(const PipelineConfig& cfg, GenerationMode mode, bool force) {
  const Workspace ws(cfg.workspace);
  const std::string spath = ws.sensitivity(mode);
  require_file(spath, "sensitivity");
  const nlohmann::json sj = read_json(spath);
  require_hash(spath, sensitivity_inputs_hash(cfg, mode), sj.value("inputs_hash", std::string("?")), force);
  const auto records = sensitivity_records_from_json(sj);
  const ModelConfig mc = [&] {
    ModelConfig m = cfg.train.model;
    m.mode = mode;
    return m;
  }();
  const auto ranked = expand_ranking(rank_sensitivities(records, cfg.allocation.ranking), mc,
                                     cfg.grid.include_embeddings);
  QuantPlan plan;
  std::string name;
  if (cfg.allocation.budget_avg_bits) {
    const ModelCheckpoint zero = zero_checkpoint(mc);
    std::vector<RankedModule> sized;
    for (const auto& p : ranked) sized.push_back({p, zero.param(p).numel()});
    const BudgetAssignment b = ratios_for_budget(sized, *cfg.allocation.budget_avg_bits);
    plan = plan_from_bits(ranked, b.bits, cfg.grid.group_size,
                          {{"ratios", b.ratios.to_json()},
                           {"target_avg_bits", *cfg.allocation.budget_avg_bits},
                           {"achieved_avg_bits", b.achieved_avg_bits}});
    char buf[32];
    std::snprintf(buf, sizeof buf, "budget-%.2f", *cfg.allocation.budget_avg_bits);
    name = buf;
  } else {
    plan = assign_precision(ranked, cfg.allocation.ratios, cfg.grid.group_size, cfg.allocation.remap);
    const auto& r = cfg.allocation.ratios;
    name = "split-" + fmt3(r.p16) + "-" + fmt3(r.p8) + "-" + fmt3(r.p4);
    if (cfg.allocation.remap == BitRemap::EightFour) name += "-84";
  }
  plan.details["ranking"] = to_string(cfg.allocation.ranking);
  plan.details["config_hash"] = cfg.hash();
  save_plan(plan, ws.plan(mode, name));
  return plan;
}

FileLock::FileLock(std::string path) : path_(std::move(path)) {
  fs::create_directories(fs::path(path_).parent_path());
  fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd_ < 0) {
    if (errno == EEXIST) {
      throw IoError("lock file " + path_ + " exists; another bench is running (delete it if stale)");
    }
    throw IoError("cannot create lock file " + path_ + ": " + std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto n = ::write(fd_, pid.data(), pid.size());
}

FileLock::~FileLock() {
  if (fd_ >= 0) {
    ::close(fd_);
    ::unlink(path_.c_str());
  }
}

std::vector<LatencyRow> run_bench_stage(const PipelineConfig& cfg, const BenchOptions& opts) {
  const Workspace ws(cfg.workspace);
  FileLock lock(ws.bench_lock());
  std::vector<LatencyRow> rows;
  for (const auto mode : {GenerationMode::AR, GenerationMode::Diffusion}) {
    const ModelCheckpoint ck = load_trained(cfg, mode, opts.force);
    GridModel gm{model_name(mode), ck, calibration_batches(cfg, mode), {}};
    std::vector<std::pair<std::string, int>> cells = {{"baseline", 16}};
    for (const int b : cfg.grid.bits) cells.push_back({"gptq", b});
    for (const auto& [method, bits] : cells) {
      const QuantPlan plan = uniform_plan(ck.config, bits, cfg.grid.group_size, cfg.grid.include_embeddings);
      GptqConfig g = cfg.gptq;
      g.group_size = cfg.grid.group_size;
      const CellModel cm = build_cell_model(gm, method, plan, g);
      if (opts.log) opts.log("bench " + gm.name + " " + method + " " + std::to_string(bits));
      LatencyRow row;
      row.model = gm.name;
      row.mode = to_string(mode);
      row.method = method;
      row.bits_or_plan = std::to_string(bits);
      row.raw_bits = memory_footprint(plan, ck).raw_avg_bits;
      row.stats = measure_latency(cm.checkpoint, cfg.latency);
      rows.push_back(row);
    }
  }
  fs::create_directories(ws.results_dir());
  write_text((fs::path(ws.results_dir()) / "latency.csv").string(), latency_csv(rows));
  return rows;
}

GridSpec sweep_spec(const PipelineConfig& cfg) {
  GridSpec s = cfg.grid;
  s.include_baseline = false;
  s.methods.clear();
  s.hawq_plans.clear();
  for (const auto& r : cfg.sweep) {
    s.hawq_plans.push_back({"3way " + fmt3(r.p16) + "/" + fmt3(r.p8) + "/" + fmt3(r.p4), r, BitRemap::None});
  }
  return s;
}

std::vector<GridCell> reproduce_plan(const PipelineConfig& cfg, std::vector<GridCell>* sweep_cells) {
  const std::vector<std::string> names = {"ar", "diffusion"};
  if (sweep_cells) *sweep_cells = plan_grid(names, sweep_spec(cfg));
  return plan_grid(names, cfg.grid);
}

Report load_workspace_report(const PipelineConfig& cfg) {
  const Workspace ws(cfg.workspace);
  const fs::path dir = ws.results_dir();
  const std::string grid = (dir / "grid.jsonl").string();
  require_file(grid, "reproduce");
  Report rep;
  const auto text = [](const std::string& p) {
    const auto b = read_file_bytes(p);
    return std::string(b.begin(), b.end());
  };
  rep.results = parse_results_jsonl(text(grid));
  if (fs::exists(dir / "sweep.jsonl")) rep.sweep = parse_results_jsonl(text((dir / "sweep.jsonl").string()));
  if (fs::exists(dir / "latency.csv")) rep.latency = parse_latency_csv(text((dir / "latency.csv").string()));
  return rep;
}

ReproduceOutcome run_reproduce(const PipelineConfig& cfg, bool force, bool bench, const LogFn& log) {
  cfg.validate();
  const Workspace ws(cfg.workspace);
  fs::create_directories(ws.root());
  write_json((fs::path(ws.root()) / "config.json").string(), cfg.to_json());

  std::vector<GridModel> models;
  for (const auto mode : {GenerationMode::AR, GenerationMode::Diffusion}) {
    ModelCheckpoint ck = ensure_trained(cfg, mode, force, log);
    models.push_back({model_name(mode), std::move(ck), calibration_batches(cfg, mode),
                      sensitivity_batches(cfg, mode)});
  }
  GridSettings settings;
  settings.gptq = cfg.gptq;
  settings.sensitivity = cfg.sensitivity;
  settings.suite = cfg.suite;
  settings.latency = cfg.latency;
  settings.cache_dir = ws.cache_dir();
  settings.log = log;

  ReproduceOutcome out;
  out.grid = run_experiment_grid(models, cfg.grid, settings);
  out.sweep = run_experiment_grid(models, sweep_spec(cfg), settings);
  fs::create_directories(ws.results_dir());
  write_text((fs::path(ws.results_dir()) / "grid.jsonl").string(), results_jsonl(out.grid));
  write_text((fs::path(ws.results_dir()) / "sweep.jsonl").string(), results_jsonl(out.sweep));
  if (bench) run_bench_stage(cfg, {force, log});

  const Report rep = load_workspace_report(cfg);
  emit(rep, {"csv", "json", "markdown", "svg"}, ws.report_dir());
  out.report_dir = ws.report_dir();
  return out;
}

}  // namespace ptqlab
