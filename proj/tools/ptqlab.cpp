#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "ptqlab/checkpoint_io.hpp"
#include "ptqlab/pipeline.hpp"

using namespace ptqlab;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config_path;
  std::string workspace;
  bool force = false;
  bool quiet = false;
};

void print_error(const std::string& kind, const std::string& message) {
  const nlohmann::json j = {{"error", {{"kind", kind}, {"message", message}}}};
  std::cerr << j.dump() << "\n";
}

PipelineConfig resolve_config(const Globals& g) {
  PipelineConfig cfg = load_pipeline_config(g.config_path);
  if (const char* env = std::getenv("PTQLAB_WORKSPACE"); env != nullptr && *env != '\0') {
    cfg.workspace = env;
  }
  if (!g.workspace.empty()) cfg.workspace = g.workspace;
  return cfg;
}

std::vector<GenerationMode> models_from(const std::string& which) {
  if (which == "both") return {GenerationMode::AR, GenerationMode::Diffusion};
  return {parse_model_name(which)};
}

SplitRatios parse_ratios(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      v.push_back(std::stod(part));
    } catch (const std::exception&) {
      throw ParameterError("bad ratio '" + part + "'");
    }
  }
  if (v.size() != 3) throw ParameterError("--ratios takes three comma-separated values p16,p8,p4");
  SplitRatios r{v[0], v[1], v[2]};
  r.validate();
  return r;
}

std::string expected_train_hash(const PipelineConfig& cfg, GenerationMode mode) {
  TrainConfig t = cfg.train;
  t.seed = cfg.seed;
  t.model.mode = mode;
  return t.config_hash();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixed-precision post-training quantization lab for a toy AR/diffusion transformer"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("-c,--config", g.config_path, "Pipeline config (JSON)");
  app.add_option("-w,--workspace", g.workspace, "Workspace directory (overrides config and PTQLAB_WORKSPACE)");
  app.add_flag("--force", g.force, "Accept artifacts produced by a different config");
  app.add_flag("-q,--quiet", g.quiet, "Only print results");

  const auto log = [&g](const std::string& msg) {
    if (!g.quiet) std::cerr << "[ptqlab] " << msg << "\n";
  };

  std::string which = "both";
  auto* train_cmd = app.add_subcommand("train", "Train the paired AR and diffusion checkpoints");
  train_cmd->add_option("--model", which, "ar, diffusion or both")->check(CLI::IsMember({"ar", "diffusion", "both"}));

  std::string q_model = "ar", q_method = "gptq", q_plan, q_out;
  int q_bits = 4;
  bool q_export = false;
  auto* quant_cmd = app.add_subcommand("quantize", "Quantize a trained checkpoint");
  quant_cmd->add_option("--model", q_model)->check(CLI::IsMember({"ar", "diffusion"}));
  quant_cmd->add_option("--method", q_method)->check(CLI::IsMember({"rtn", "gptq"}));
  quant_cmd->add_option("--bits", q_bits, "Uniform width 2, 3, 4, 8 or 16");
  quant_cmd->add_option("--plan", q_plan, "Mixed-precision plan JSON (overrides --bits)");
  quant_cmd->add_option("--out", q_out, "Output checkpoint path");
  quant_cmd->add_flag("--export-codes", q_export, "Store integer codes and scales in the checkpoint");

  auto* sens_cmd = app.add_subcommand("sensitivity", "Estimate per-module Hessian sensitivities");
  sens_cmd->add_option("--model", which)->check(CLI::IsMember({"ar", "diffusion", "both"}));

  std::string a_ratios, a_remap, a_ranking;
  double a_budget = 0.0;
  auto* assign_cmd = app.add_subcommand("assign", "Turn sensitivities into a precision plan");
  assign_cmd->add_option("--model", which)->check(CLI::IsMember({"ar", "diffusion", "both"}));
  assign_cmd->add_option("--ratios", a_ratios, "p16,p8,p4");
  assign_cmd->add_option("--remap", a_remap, "none or 8/4")->check(CLI::IsMember({"none", "8/4"}));
  assign_cmd->add_option("--budget", a_budget, "Target average bits per weight");
  assign_cmd->add_option("--ranking", a_ranking)->check(CLI::IsMember({"raw", "normalized"}));

  std::string e_ckpt;
  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on the task suite");
  eval_cmd->add_option("--checkpoint", e_ckpt, "Checkpoint to evaluate")->required();

  auto* bench_cmd = app.add_subcommand("bench", "Measure per-step latency");

  std::string r_out, r_formats = "csv,json,markdown,svg";
  auto* report_cmd = app.add_subcommand("report", "Write tables and charts from workspace results");
  report_cmd->add_option("--out", r_out, "Output directory (default <workspace>/report)");
  report_cmd->add_option("--formats", r_formats, "Comma-separated subset of csv,json,markdown,svg");

  bool dry_run = false, with_bench = false;
  auto* repro_cmd = app.add_subcommand("reproduce", "Run the whole pipeline end to end");
  repro_cmd->add_flag("--dry-run", dry_run, "Print the experiment grid without running it");
  repro_cmd->add_flag("--bench", with_bench, "Also run the latency benchmark");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    return e.get_exit_code() != 0 ? e.get_exit_code() : 2;
  }

  try {
    PipelineConfig cfg = resolve_config(g);
    const Workspace ws(cfg.workspace);

    if (train_cmd->parsed()) {
      for (const auto mode : models_from(which)) ensure_trained(cfg, mode, g.force, log);
    } else if (quant_cmd->parsed()) {
      const GenerationMode mode = parse_model_name(q_model);
      const ModelCheckpoint ck = load_trained(cfg, mode, g.force);
      QuantPlan plan;
      std::string label;
      if (!q_plan.empty()) {
        plan = load_plan(q_plan);
        label = fs::path(q_plan).stem().string();
      } else {
        plan = uniform_plan(ck.config, q_bits, cfg.grid.group_size, cfg.grid.include_embeddings);
        label = std::to_string(q_bits);
      }
      const GridModel gm{model_name(mode), ck, calibration_batches(cfg, mode), {}};
      const std::string method = (q_method == "gptq" && plan.modules.size() > 0 &&
                                  std::all_of(plan.modules.begin(), plan.modules.end(),
                                              [](const PlanEntry& e) { return e.bits == 16; }))
                                     ? "baseline"
                                     : q_method;
      GptqConfig gc = cfg.gptq;
      const CellModel cm = build_cell_model(gm, method, plan, gc);
      const std::string out = q_out.empty() ? ws.quantized(mode, q_method, label) : q_out;
      CheckpointFile file;
      file.checkpoint = cm.checkpoint;
      if (q_export) file.quantized = cm.quantized;
      file.annotations = {{"stage", "quantize"},
                          {"method", q_method},
                          {"config_hash", cfg.hash()},
                          {"source_config_hash", ck.meta.config_hash},
                          {"plan", plan_to_json(plan)}};
      save_checkpoint(file, out);
      save_plan(plan, out + ".plan.json");
      if (!cm.gptq_report.empty()) write_gptq_report_csv(cm.gptq_report, out + ".gptq.csv");
      const MemoryFootprint mem = memory_footprint(plan, ck);
      std::cout << nlohmann::json({{"checkpoint", out},
                                   {"raw_avg_bits", mem.raw_avg_bits},
                                   {"effective_avg_bits", mem.effective_avg_bits}})
                       .dump()
                << "\n";
    } else if (sens_cmd->parsed()) {
      for (const auto mode : models_from(which)) {
        const auto records = run_sensitivity_stage(cfg, mode, g.force, log);
        std::cout << sensitivity_csv(records);
      }
    } else if (assign_cmd->parsed()) {
      if (!a_ratios.empty()) cfg.allocation.ratios = parse_ratios(a_ratios);
      if (!a_remap.empty()) cfg.allocation.remap = parse_bit_remap(a_remap);
      if (!a_ranking.empty()) cfg.allocation.ranking = parse_ranking_mode(a_ranking);
      if (assign_cmd->count("--budget") > 0) cfg.allocation.budget_avg_bits = a_budget;
      for (const auto mode : models_from(which)) {
        std::cout << plan_to_json(run_assign_stage(cfg, mode, g.force)).dump(1) << "\n";
      }
    } else if (eval_cmd->parsed()) {
      const CheckpointFile file = load_checkpoint_file(e_ckpt);
      const ModelCheckpoint& ck = file.checkpoint;
      const std::string source = file.annotations.value("source_config_hash", ck.meta.config_hash);
      const std::string expected = expected_train_hash(cfg, ck.config.mode);
      if (source != expected && !g.force) {
        throw ContractError(e_ckpt + " comes from training config " + source + " but the current config is " +
                            expected + "; pass --force to evaluate anyway");
      }
      const auto scores = evaluate_tasks(ck, cfg.suite);
      nlohmann::json j = {{"checkpoint", e_ckpt}, {"mode", to_string(ck.config.mode)}};
      for (const auto& s : scores) j["scores"][to_string(s.kind)] = s.score;
      j["task_score"] = exact_match_mean(scores);
      std::cout << j.dump() << "\n";
    } else if (bench_cmd->parsed()) {
      const auto rows = run_bench_stage(cfg, {g.force, log});
      std::cout << latency_csv(rows);
    } else if (report_cmd->parsed()) {
      std::set<std::string> formats;
      std::stringstream ss(r_formats);
      std::string f;
      while (std::getline(ss, f, ',')) formats.insert(f);
      const std::string out = r_out.empty() ? ws.report_dir() : r_out;
      emit(load_workspace_report(cfg), formats, out);
      std::cout << out << "\n";
    } else if (repro_cmd->parsed()) {
      if (dry_run) {
        std::vector<GridCell> sweep;
        const auto cells = reproduce_plan(cfg, &sweep);
        std::cout << "grid: " << cells.size() << " cells\n";
        for (const auto& c : cells) std::cout << c.model << " " << c.method << " " << c.bits_or_plan << "\n";
        std::cout << "sweep: " << sweep.size() << " cells\n";
        for (const auto& c : sweep) std::cout << c.model << " " << c.method << " " << c.bits_or_plan << "\n";
        return 0;
      }
      const auto out = run_reproduce(cfg, g.force, with_bench, log);
      std::cout << (fs::path(out.report_dir) / "results.csv").string() << "\n";
    }
  } catch (const Error& e) {
    print_error(e.kind(), e.what());
    return 2;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 3;
  }
  return 0;
}
