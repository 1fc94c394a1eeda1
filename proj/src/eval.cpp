#include "ptqlab/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>

#include "ptqlab/checkpoint_io.hpp"
#include "ptqlab/hash.hpp"

namespace ptqlab {

namespace fs = std::filesystem;

void TaskSuite::validate() const {
  if (tasks.empty()) throw ContractError("task suite is empty");
  if (n_eval_prompts < 1) throw ContractError("task suite needs at least one prompt");
  if (diffusion_steps < 1) throw ParameterError("diffusion_steps must be >= 1");
}

nlohmann::json TaskSuite::to_json() const {
  nlohmann::json t = nlohmann::json::array();
  for (const auto k : tasks) t.push_back(to_string(k));
  return {{"tasks", t},
          {"n_eval_prompts", n_eval_prompts},
          {"seed", seed},
          {"diffusion_steps", diffusion_steps}};
}

TaskSuite TaskSuite::from_json(const nlohmann::json& j) {
  TaskSuite s;
  try {
    if (j.contains("tasks")) {
      s.tasks.clear();
      for (const auto& t : j.at("tasks")) s.tasks.push_back(parse_task_kind(t.get<std::string>()));
    }
    s.n_eval_prompts = j.value("n_eval_prompts", s.n_eval_prompts);
    s.seed = j.value("seed", s.seed);
    s.diffusion_steps = j.value("diffusion_steps", s.diffusion_steps);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed task suite: ") + e.what());
  }
  s.validate();
  return s;
}

namespace {

int argmax_token(const double* logits) {
  int best = 0;
  for (int t = 1; t < tokens::kMask; ++t) {
    if (logits[t] > logits[best]) best = t;
  }
  return best;
}

double exact_match(const ParamSet& params, TaskKind kind, const TaskSuite& suite) {
  Rng rng = Rng(suite.seed).fork(static_cast<std::uint64_t>(kind) + 1);
  std::vector<std::vector<int>> prompts;
  std::vector<std::vector<int>> gold;
  for (std::size_t i = 0; i < suite.n_eval_prompts; ++i) {
    TaskExample ex = make_task_example(kind, rng);
    prompts.push_back(std::move(ex.prompt));
    gold.push_back(std::move(ex.completion));
  }
  const auto out = params.config().mode == GenerationMode::AR
                       ? generate_ar_batch(params, prompts, kCompletionLen)
                       : generate_diffusion_batch(params, prompts, kCompletionLen,
                                                  suite.diffusion_steps);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    hits += std::equal(gold[i].begin(), gold[i].end(), out[i].begin() + kPromptLen);
  }
  return static_cast<double>(hits) / static_cast<double>(out.size());
}

double heldout_token_accuracy(const ParamSet& params, const TaskSuite& suite) {
  Rng rng = Rng(suite.seed).fork(static_cast<std::uint64_t>(TaskKind::HeldoutTokenAccuracy) + 1);
  const TaskKind kinds[] = {TaskKind::Copy, TaskKind::Reverse, TaskKind::PatternCompletion};
  const bool ar = params.config().mode == GenerationMode::AR;
  const std::size_t seq = ar ? kSequenceLen - 1 : kSequenceLen;
  const std::size_t n = suite.n_eval_prompts;
  std::vector<int> inputs;
  std::vector<int> gold;
  for (std::size_t i = 0; i < n; ++i) {
    const TaskExample ex = make_task_example(kinds[i % 3], rng);
    std::vector<int> toks = ex.prompt;
    toks.insert(toks.end(), ex.completion.begin(), ex.completion.end());
    if (ar) {
      toks.pop_back();
    } else {
      std::fill(toks.begin() + kPromptLen, toks.end(), tokens::kMask);
    }
    inputs.insert(inputs.end(), toks.begin(), toks.end());
    gold.insert(gold.end(), ex.completion.begin(), ex.completion.end());
  }
  const Tensor64 logits = forward_logits(params, inputs, n, seq);
  const std::size_t v = params.config().vocab_size;
  // AR position p predicts token p + 1; diffusion predicts in place.
  const std::size_t first = ar ? kPromptLen - 1 : kPromptLen;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < kCompletionLen; ++c) {
      const double* row = logits.data() + (r * seq + first + c) * v;
      hits += argmax_token(row) == gold[r * kCompletionLen + c];
    }
  }
  return static_cast<double>(hits) / static_cast<double>(n * kCompletionLen);
}

}  // namespace

std::vector<TaskScore> evaluate_tasks(const ModelCheckpoint& ckpt, const TaskSuite& suite) {
  suite.validate();
  const ParamSet params(ckpt);
  std::vector<TaskScore> out;
  for (const auto kind : suite.tasks) {
    const double s = kind == TaskKind::HeldoutTokenAccuracy ? heldout_token_accuracy(params, suite)
                                                            : exact_match(params, kind, suite);
    out.push_back({kind, s});
  }
  return out;
}

double exact_match_mean(const std::vector<TaskScore>& scores) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : scores) {
    if (s.kind == TaskKind::HeldoutTokenAccuracy) continue;
    sum += s.score;
    ++n;
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

std::string to_string(UnitOfWork u) { return u == UnitOfWork::ArToken ? "ar_token" : "diffusion_step"; }

UnitOfWork parse_unit_of_work(std::string_view text) {
  if (text == "ar_token") return UnitOfWork::ArToken;
  if (text == "diffusion_step") return UnitOfWork::DiffusionStep;
  throw ParameterError("unknown unit of work '" + std::string(text) + "'");
}

UnitOfWork native_unit(GenerationMode mode) {
  return mode == GenerationMode::AR ? UnitOfWork::ArToken : UnitOfWork::DiffusionStep;
}

void LatencyConfig::validate() const {
  if (timed_runs < 2) throw ParameterError("latency needs at least 2 timed runs");
  if (seq_len < 1) throw ParameterError("latency seq_len must be >= 1");
}

nlohmann::json LatencyConfig::to_json() const {
  nlohmann::json j = {{"warmup_runs", warmup_runs}, {"timed_runs", timed_runs}, {"seq_len", seq_len}};
  if (unit) j["unit_of_work"] = to_string(*unit);
  return j;
}

LatencyConfig LatencyConfig::from_json(const nlohmann::json& j) {
  LatencyConfig c;
  try {
    c.warmup_runs = j.value("warmup_runs", c.warmup_runs);
    c.timed_runs = j.value("timed_runs", c.timed_runs);
    c.seq_len = j.value("seq_len", c.seq_len);
    if (j.contains("unit_of_work")) c.unit = parse_unit_of_work(j.at("unit_of_work").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed latency config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

double timer_resolution_ms() {
  using clock = std::chrono::steady_clock;
  double best = 1e300;
  for (int i = 0; i < 5; ++i) {
    const auto t0 = clock::now();
    auto t1 = clock::now();
    while (t1 == t0) t1 = clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best;
}

}  // namespace

LatencyStats measure_latency(const ModelCheckpoint& ckpt, const LatencyConfig& cfg,
                             std::vector<double>* samples_ms) {
  cfg.validate();
  const UnitOfWork unit = cfg.unit.value_or(native_unit(ckpt.config.mode));
  if (unit == UnitOfWork::ArToken && !ckpt.config.causal()) {
    throw ContractError("ar_token latency needs an AR checkpoint");
  }
  if (unit == UnitOfWork::DiffusionStep && ckpt.config.causal()) {
    throw ContractError("diffusion_step latency needs a diffusion checkpoint");
  }
  if (cfg.seq_len > ckpt.config.max_seq_len) {
    throw ParameterError("latency seq_len exceeds the model's max_seq_len");
  }
  const ParamSet params(ckpt);
  Rng rng(0x1a7e);
  std::vector<int> toks(cfg.seq_len);
  toks[0] = tokens::kBos;
  for (std::size_t i = 1; i < toks.size(); ++i) toks[i] = static_cast<int>(rng.below(256));
  if (unit == UnitOfWork::DiffusionStep) {
    // Mid-generation state: the second half still masked.
    std::fill(toks.begin() + static_cast<std::ptrdiff_t>(cfg.seq_len / 2), toks.end(), tokens::kMask);
  }
  const ForwardOptions opts{.last_position_only = unit == UnitOfWork::ArToken};
  volatile double sink = 0.0;
  const auto run_once = [&] {
    const Tensor64 logits = forward_logits(params, toks, 1, cfg.seq_len, opts);
    sink = sink + logits[0];
  };
  for (std::size_t i = 0; i < cfg.warmup_runs; ++i) run_once();

  std::vector<double> samples(cfg.timed_runs);
  using clock = std::chrono::steady_clock;
  for (std::size_t i = 0; i < cfg.timed_runs; ++i) {
    const auto t0 = clock::now();
    run_once();
    const auto t1 = clock::now();
    samples[i] = std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  LatencyStats st;
  st.warmup_runs = cfg.warmup_runs;
  st.timed_runs = samples.size();
  st.seq_len = cfg.seq_len;
  st.unit = unit;
  double sum = 0.0;
  for (const double s : samples) sum += s;
  st.mean_ms = sum / static_cast<double>(samples.size());
  double ss = 0.0;
  for (const double s : samples) ss += (s - st.mean_ms) * (s - st.mean_ms);
  st.std_ms = std::sqrt(ss / static_cast<double>(samples.size() - 1));
  st.timer_resolution_ms = timer_resolution_ms();
  st.coarse_timer = st.timer_resolution_ms > 0.01 * st.mean_ms;
  if (samples_ms != nullptr) *samples_ms = std::move(samples);
  return st;
}

std::optional<double> EvalResult::score_for(TaskKind kind) const {
  for (const auto& s : scores) {
    if (s.kind == kind) return s.score;
  }
  return std::nullopt;
}

nlohmann::json eval_result_to_json(const EvalResult& r) {
  nlohmann::json scores = nlohmann::json::object();
  for (const auto& s : r.scores) scores[to_string(s.kind)] = s.score;
  nlohmann::json j = {{"model", r.model},
                      {"mode", to_string(r.mode)},
                      {"method", r.method},
                      {"bits_or_plan", r.bits_or_plan},
                      {"scores", scores},
                      {"raw_bits", r.raw_bits},
                      {"eff_bits", r.eff_bits},
                      {"seed", r.seed},
                      {"config_hash", r.config_hash},
                      {"failed", r.failed}};
  // Keep task order explicit; JSON objects are sorted by key.
  nlohmann::json order = nlohmann::json::array();
  for (const auto& s : r.scores) order.push_back(to_string(s.kind));
  j["task_order"] = order;
  if (r.failed) j["error"] = r.error;
  if (r.latency) {
    const auto& l = *r.latency;
    j["latency"] = {{"mean_ms", l.mean_ms},         {"std_ms", l.std_ms},
                    {"warmup_runs", l.warmup_runs}, {"timed_runs", l.timed_runs},
                    {"seq_len", l.seq_len},         {"unit_of_work", to_string(l.unit)},
                    {"timer_resolution_ms", l.timer_resolution_ms},
                    {"coarse_timer", l.coarse_timer}};
  }
  return j;
}

EvalResult eval_result_from_json(const nlohmann::json& j) {
  EvalResult r;
  try {
    r.model = j.at("model").get<std::string>();
    r.mode = parse_generation_mode(j.at("mode").get<std::string>());
    r.method = j.at("method").get<std::string>();
    r.bits_or_plan = j.at("bits_or_plan").get<std::string>();
    const auto& scores = j.at("scores");
    for (const auto& name : j.at("task_order")) {
      const auto key = name.get<std::string>();
      r.scores.push_back({parse_task_kind(key), scores.at(key).get<double>()});
    }
    r.raw_bits = j.at("raw_bits").get<double>();
    r.eff_bits = j.at("eff_bits").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.failed = j.value("failed", false);
    r.error = j.value("error", std::string());
    if (j.contains("latency")) {
      const auto& l = j.at("latency");
      LatencyStats st;
      st.mean_ms = l.at("mean_ms").get<double>();
      st.std_ms = l.at("std_ms").get<double>();
      st.warmup_runs = l.at("warmup_runs").get<std::size_t>();
      st.timed_runs = l.at("timed_runs").get<std::size_t>();
      st.seq_len = l.at("seq_len").get<std::size_t>();
      st.unit = parse_unit_of_work(l.at("unit_of_work").get<std::string>());
      st.timer_resolution_ms = l.value("timer_resolution_ms", 0.0);
      st.coarse_timer = l.value("coarse_timer", false);
      r.latency = st;
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed eval result: ") + e.what());
  }
  return r;
}

nlohmann::json GridSpec::to_json() const {
  nlohmann::json plans = nlohmann::json::array();
  for (const auto& p : hawq_plans) {
    plans.push_back({{"name", p.name}, {"ratios", p.ratios.to_json()}, {"remap", to_string(p.remap)}});
  }
  return {{"include_baseline", include_baseline},
          {"methods", methods},
          {"bits", bits},
          {"hawq_plans", plans},
          {"ranking", to_string(ranking)},
          {"hawq_quantizer", hawq_quantizer},
          {"group_size", group_size},
          {"include_embeddings", include_embeddings},
          {"measure_latency", measure_latency}};
}

GridSpec GridSpec::from_json(const nlohmann::json& j) {
  GridSpec g;
  try {
    g.include_baseline = j.value("include_baseline", g.include_baseline);
    g.methods = j.value("methods", g.methods);
    g.bits = j.value("bits", g.bits);
    if (j.contains("hawq_plans")) {
      g.hawq_plans.clear();
      for (const auto& p : j.at("hawq_plans")) {
        g.hawq_plans.push_back({p.at("name").get<std::string>(), SplitRatios::from_json(p.at("ratios")),
                                parse_bit_remap(p.value("remap", std::string("none")))});
      }
    }
    g.ranking = parse_ranking_mode(j.value("ranking", std::string("raw")));
    g.hawq_quantizer = j.value("hawq_quantizer", g.hawq_quantizer);
    g.group_size = j.value("group_size", g.group_size);
    g.include_embeddings = j.value("include_embeddings", g.include_embeddings);
    g.measure_latency = j.value("measure_latency", g.measure_latency);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed grid spec: ") + e.what());
  }
  for (const auto& m : g.methods) {
    if (m != "rtn" && m != "gptq") throw ParameterError("unknown quantization method '" + m + "'");
  }
  for (const int b : g.bits) {
    if (b != 2 && b != 3 && b != 4 && b != 8) {
      throw ParameterError("grid bit widths must be in {2,3,4,8}; the 16-bit row is the baseline");
    }
  }
  if (g.hawq_quantizer != "rtn" && g.hawq_quantizer != "gptq") {
    throw ParameterError("hawq_quantizer must be rtn or gptq");
  }
  return g;
}

std::vector<GridCell> plan_grid(const std::vector<std::string>& models, const GridSpec& spec) {
  std::vector<GridCell> cells;
  for (const auto& m : models) {
    if (spec.include_baseline) cells.push_back({m, "baseline", "16"});
    for (const auto& method : spec.methods) {
      for (const int b : spec.bits) cells.push_back({m, method, std::to_string(b)});
    }
    for (const auto& p : spec.hawq_plans) cells.push_back({m, "hawq", p.name});
  }
  return cells;
}

std::string batches_digest(const std::vector<Batch>& batches) {
  std::uint64_t h = fnv1a64(std::string_view("batches"));
  for (const auto& b : batches) {
    const std::string dims = std::to_string(b.batch) + "x" + std::to_string(b.seq);
    h = fnv1a64(dims, h);
    h = fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(b.token_ids.data()),
                                              b.token_ids.size() * sizeof(int)),
                h);
    h = fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(b.targets.data()),
                                              b.targets.size() * sizeof(int)),
                h);
    h = fnv1a64(std::span<const std::uint8_t>(b.loss_mask), h);
  }
  return hex64(h);
}

CellModel build_cell_model(const GridModel& model, const std::string& method, const QuantPlan& plan,
                           const GptqConfig& gptq) {
  CellModel out;
  out.plan = plan;
  check_plan_coverage(plan, model.checkpoint);
  if (method == "baseline") {
    out.checkpoint = model.checkpoint;
  } else if (method == "rtn") {
    out.checkpoint = rtn_quantize_model(model.checkpoint, plan);
    for (const auto& e : plan.modules) {
      if (e.bits == 16) continue;
      out.quantized.emplace(e.path, quantize_weight(model.checkpoint.param(e.path),
                                                    {e.bits, plan.group_size}));
    }
  } else if (method == "gptq") {
    GptqModelResult r = gptq_quantize_model(model.checkpoint, model.calibration, gptq, &plan);
    out.checkpoint = std::move(r.checkpoint);
    out.quantized = std::move(r.quantized);
    out.gptq_report = std::move(r.report);
  } else {
    throw ParameterError("unknown quantization method '" + method + "'");
  }
  return out;
}

namespace {

struct ModelState {
  std::string ckpt_digest;
  std::string calib_digest;
  std::string sens_digest;
  std::optional<std::vector<std::string>> ranking;
};

std::string hash_json(const nlohmann::json& j) { return hex64(fnv1a64(j.dump())); }

std::optional<nlohmann::json> read_json_file(const fs::path& p) {
  std::error_code ec;
  if (!fs::exists(p, ec)) return std::nullopt;
  try {
    const auto bytes = read_file_bytes(p.string());
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const std::exception&) {
    return std::nullopt;  // a torn cache entry is recomputed
  }
}

void write_json_file(const fs::path& p, const nlohmann::json& j) {
  const std::string s = j.dump(1) + "\n";
  write_file_bytes(p.string(), std::vector<std::uint8_t>(s.begin(), s.end()));
}

}  // namespace

std::vector<EvalResult> run_experiment_grid(const std::vector<GridModel>& models,
                                            const GridSpec& spec, const GridSettings& settings) {
  settings.suite.validate();
  const auto log = [&](const std::string& msg) {
    if (settings.log) settings.log(msg);
  };
  std::vector<std::string> names;
  std::map<std::string, ModelState> state;
  for (const auto& m : models) {
    names.push_back(m.name);
    ModelState s;
    s.ckpt_digest = hex64(fnv1a64(serialize_checkpoint(CheckpointFile{m.checkpoint, {}, nlohmann::json::object()})));
    s.calib_digest = batches_digest(m.calibration);
    s.sens_digest = batches_digest(m.sensitivity);
    state[m.name] = s;
  }
  const fs::path cache = settings.cache_dir;

  std::vector<EvalResult> results;
  for (const auto& cell : plan_grid(names, spec)) {
    const GridModel& model =
        *std::find_if(models.begin(), models.end(), [&](const GridModel& m) { return m.name == cell.model; });
    ModelState& ms = state.at(cell.model);
    const ModelConfig& mc = model.checkpoint.config;

    GptqConfig gptq = settings.gptq;
    gptq.group_size = spec.group_size;
    gptq.include_embeddings = spec.include_embeddings;
    SensitivityConfig sens = settings.sensitivity;
    sens.include_embeddings = spec.include_embeddings;

    const HawqPlanSpec* hawq = nullptr;
    if (cell.method == "hawq") {
      for (const auto& p : spec.hawq_plans) {
        if (p.name == cell.bits_or_plan) hawq = &p;
      }
    }
    const std::string quantizer = hawq ? spec.hawq_quantizer : cell.method;

    nlohmann::json key = {{"v", 1},
                          {"checkpoint", ms.ckpt_digest},
                          {"method", cell.method},
                          {"bits_or_plan", cell.bits_or_plan},
                          {"group_size", spec.group_size},
                          {"include_embeddings", spec.include_embeddings},
                          {"suite", settings.suite.to_json()}};
    if (quantizer == "gptq") {
      key["calibration"] = ms.calib_digest;
      nlohmann::json g = gptq.to_json();
      g.erase("bits");
      key["gptq"] = g;
    }
    if (hawq) {
      key["sensitivity"] = sens.to_json();
      key["sensitivity_batches"] = ms.sens_digest;
      key["ranking"] = to_string(spec.ranking);
      key["ratios"] = hawq->ratios.to_json();
      key["remap"] = to_string(hawq->remap);
      key["quantizer"] = quantizer;
    }
    if (spec.measure_latency) key["latency"] = settings.latency.to_json();
    const std::string hash = hash_json(key);
    const std::string label = cell.model + "/" + cell.method + "/" + cell.bits_or_plan;

    if (!cache.empty()) {
      if (auto j = read_json_file(cache / "cells" / (hash + ".json"))) {
        try {
          results.push_back(eval_result_from_json(*j));
          log("cached " + label);
          continue;
        } catch (const Error&) {
        }
      }
    }

    EvalResult r;
    r.model = cell.model;
    r.mode = mc.mode;
    r.method = cell.method;
    r.bits_or_plan = cell.bits_or_plan;
    r.seed = settings.suite.seed;
    r.config_hash = hash;
    try {
      QuantPlan plan;
      if (cell.method == "baseline") {
        plan = uniform_plan(mc, 16, spec.group_size, spec.include_embeddings);
      } else if (hawq) {
        if (!ms.ranking) {
          const nlohmann::json skey = {{"v", 1},
                                       {"checkpoint", ms.ckpt_digest},
                                       {"batches", ms.sens_digest},
                                       {"config", sens.to_json()}};
          const fs::path sfile = cache / "sensitivity" / (hash_json(skey) + ".json");
          std::vector<SensitivityRecord> records;
          if (auto j = cache.empty() ? std::nullopt : read_json_file(sfile)) {
            records = sensitivity_records_from_json(*j);
          } else {
            log("sensitivity " + cell.model);
            records = compute_model_sensitivities(model.checkpoint, model.sensitivity, sens);
            if (!cache.empty()) write_json_file(sfile, sensitivity_report_json(records, sens));
          }
          ms.ranking = expand_ranking(rank_sensitivities(records, spec.ranking), mc,
                                      spec.include_embeddings);
        }
        plan = assign_precision(*ms.ranking, hawq->ratios, spec.group_size, hawq->remap);
      } else if (cell.method == "rtn" || cell.method == "gptq") {
        plan = uniform_plan(mc, std::stoi(cell.bits_or_plan), spec.group_size, spec.include_embeddings);
      } else {
        throw ParameterError("unknown grid cell '" + label + "'");
      }
      log("run " + label);
      const CellModel cm = build_cell_model(model, quantizer, plan, gptq);
      const MemoryFootprint mem = memory_footprint(plan, model.checkpoint);
      r.raw_bits = mem.raw_avg_bits;
      r.eff_bits = mem.effective_avg_bits;
      r.scores = evaluate_tasks(cm.checkpoint, settings.suite);
      if (spec.measure_latency) r.latency = measure_latency(cm.checkpoint, settings.latency);
      if (!cache.empty()) write_json_file(cache / "cells" / (hash + ".json"), eval_result_to_json(r));
    } catch (const Error& e) {
      r.failed = true;
      r.error = e.kind() + ": " + e.what();
      r.scores.clear();
      log("failed " + label + ": " + r.error);
    }
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace ptqlab
