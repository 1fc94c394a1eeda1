#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "ptqlab/model.hpp"
#include "ptqlab/rng.hpp"

namespace ptqlab {

enum class Granularity { PerBlock, PerModule };
enum class RankingMode { Raw, Normalized };

std::string to_string(Granularity g);
Granularity parse_granularity(std::string_view text);
std::string to_string(RankingMode m);
RankingMode parse_ranking_mode(std::string_view text);

struct SensitivityConfig {
  double rho = 0.1;
  std::size_t n_power_iters = 5;
  // eps = eps_scale * (1 + max|W|) for the probed module.
  double eps_scale = 1e-3;
  std::size_t n_batches = 8;
  std::size_t batch_size = 16;
  Granularity granularity = Granularity::PerModule;
  std::uint64_t seed = 7;
  bool include_embeddings = false;

  void validate() const;
  nlohmann::json to_json() const;
  static SensitivityConfig from_json(const nlohmann::json& j);
};

struct SensitivityRecord {
  std::string path;
  double lambda = 0.0;
  std::size_t n_params = 0;
  double sensitivity_raw = 0.0;
  double sensitivity_normalized = 0.0;
  std::size_t iters_used = 0;
  bool converged = false;
  double eps = 0.0;
  std::vector<double> lambda_trace;  // ‖Hv‖ after every iteration
};

/// Loss surface whose gradient can be taken with respect to one named group
/// of parameters at a time. Implementations must be deterministic: the same
/// parameter values give bit-identical gradients.
class CurvatureProbe {
 public:
  virtual ~CurvatureProbe() = default;
  virtual std::vector<std::string> modules() const = 0;
  virtual std::size_t size(const std::string& path) const = 0;
  virtual std::vector<double> get(const std::string& path) const = 0;
  virtual void set(const std::string& path, std::span<const double> values) = 0;
  virtual std::vector<double> gradient(const std::string& path) = 0;
};

// Mean loss over fixed calibration batches of a private binary64 copy of the
// model, optionally multiplied by `loss_scale`.
class ModelProbe final : public CurvatureProbe {
 public:
  ModelProbe(const ModelCheckpoint& ckpt, std::vector<Batch> batches,
             Granularity granularity = Granularity::PerModule, bool include_embeddings = false,
             double loss_scale = 1.0);

  std::vector<std::string> modules() const override { return modules_; }
  std::size_t size(const std::string& path) const override;
  std::vector<double> get(const std::string& path) const override;
  void set(const std::string& path, std::span<const double> values) override;
  std::vector<double> gradient(const std::string& path) override;

  const ParamSet& params() const noexcept { return params_; }
  // Parameter tensors a block or module name refers to.
  const std::vector<std::string>& members(const std::string& path) const;

 private:
  ParamSet params_;
  std::vector<Batch> batches_;
  double loss_scale_;
  std::vector<std::string> modules_;
  std::vector<std::vector<std::string>> members_;
  std::size_t lookup(const std::string& path) const;
};

// (g(W + eps v) - g(W)) / eps for the parameters at `path`. The parameters are
// restored bit for bit afterwards. `base_grad` may be passed to skip
// recomputing g(W).
std::vector<double> hvp_finite_diff(CurvatureProbe& probe, const std::string& path,
                                    std::span<const double> v, double eps,
                                    const std::vector<double>* base_grad = nullptr);

// eps_scale * (1 + max|W|)
double hvp_step(std::span<const double> weights, double eps_scale);

/// Power iteration on the module Hessian with a sparse probe direction.
///
/// v starts as a sparse Rademacher vector; its support stays fixed, so every
/// Hv is projected back onto the support before renormalizing. lambda is ‖Hv‖
/// of the final iteration. converged means the last relative change of lambda
/// was below 1e-2 (always true when Hv vanishes).
SensitivityRecord power_iteration_sensitivity(CurvatureProbe& probe, const std::string& path,
                                              const SensitivityConfig& cfg, Rng& rng);

// Runs every module of the probe with one generator forked per module index.
std::vector<SensitivityRecord> compute_sensitivities(CurvatureProbe& probe,
                                                     const SensitivityConfig& cfg);

// Calibration batches are drawn from the model's training distribution.
std::vector<SensitivityRecord> compute_model_sensitivities(const ModelCheckpoint& ckpt,
                                                           const std::vector<Batch>& batches,
                                                           const SensitivityConfig& cfg);

// Descending by the chosen sensitivity; ties go to the lexicographically
// smaller path.
std::vector<std::string> rank_sensitivities(const std::vector<SensitivityRecord>& records,
                                            RankingMode mode = RankingMode::Raw);

// Expands a per-block ranking ("layers.N") to the modules of each block, in
// forward order within a block. Module-level rankings are returned unchanged.
std::vector<std::string> expand_ranking(const std::vector<std::string>& ranking,
                                        const ModelConfig& config, bool include_embeddings);

nlohmann::json sensitivity_report_json(const std::vector<SensitivityRecord>& records,
                                       const SensitivityConfig& cfg);
std::vector<SensitivityRecord> sensitivity_records_from_json(const nlohmann::json& j);
std::string sensitivity_csv(const std::vector<SensitivityRecord>& records);

}  // namespace ptqlab
