#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "ptqlab/model.hpp"
#include "ptqlab/quant.hpp"

namespace ptqlab {

enum class ColumnOrder { Ascending, ByDiagDesc };

struct GptqConfig {
  int bits = 4;
  std::size_t group_size = kDefaultGroupSize;
  // Fraction of mean(diag H) added to the diagonal before inversion.
  double damping = 0.01;
  ColumnOrder order = ColumnOrder::Ascending;
  // Calibrate every layer on the unquantized model instead of propagating the
  // quantized prefix.
  bool isolated_layers = false;
  bool include_embeddings = false;

  void validate() const;
  nlohmann::json to_json() const;
  static GptqConfig from_json(const nlohmann::json& j);
};

struct LayerCalibration {
  std::string path;
  Tensor64 h;  // [d_in x d_in], accumulates 2 * sum(x xᵀ)
  std::size_t n_samples = 0;

  LayerCalibration() = default;
  LayerCalibration(std::string p, std::size_t d_in) : path(std::move(p)), h({d_in, d_in}) {}
  void add_rows(std::span<const double> rows, std::size_t d_in);
};

// One Hessian per linear module in `paths` (all linear modules when empty),
// built from every token position of every batch.
std::map<std::string, LayerCalibration> collect_calibration(
    const ModelCheckpoint& ckpt, const std::vector<Batch>& batches,
    const std::vector<std::string>& paths = {});
std::map<std::string, LayerCalibration> collect_calibration(
    const ParamSet& params, const std::vector<Batch>& batches,
    const std::vector<std::string>& paths);

// tr(Δ H Δᵀ) / 2 with Δ = original - reconstructed, i.e. the summed squared
// output error over the calibration inputs.
double reconstruction_error(const Tensor& original, const Tensor& reconstructed, const Tensor64& h);

struct GptqLayerResult {
  QuantizedWeight qweight;
  double recon_error = 0.0;
  double damping_used = 0.0;
};

/// Quantizes one [d_out x d_in] weight column by column.
///
/// Columns are visited in `cfg.order`. A group's per-row scales are taken
/// from the current (already compensated) weights the first time one of its
/// columns is visited. After column j is rounded, the remaining columns absorb
/// err = (w_j - q_j) / Hinv[j][j] weighted by Hinv[j][k], and Hinv is reduced
/// by eliminating j. Cholesky failures retry with 10x damping up to 3 times.
GptqLayerResult gptq_quantize_layer(const Tensor& weight, const LayerCalibration& calib,
                                    const GptqConfig& cfg);

struct GptqLayerReport {
  std::string path;
  int bits = 0;
  double recon_error = 0.0;
  double rtn_recon_error = 0.0;
  double scale_min = 0.0;
  double scale_mean = 0.0;
  double scale_max = 0.0;
  double damping = 0.0;
};

struct GptqModelResult {
  ModelCheckpoint checkpoint;
  std::vector<GptqLayerReport> report;
  std::map<std::string, QuantizedWeight> quantized;
};

// Sequential GPTQ in forward order. Unless cfg.isolated_layers is set, each
// stage is calibrated on activations of the already-quantized prefix. With a
// plan, each module takes its planned width (16 leaves it untouched) and the
// plan's group size; cfg.bits is then ignored.
GptqModelResult gptq_quantize_model(const ModelCheckpoint& ckpt, const std::vector<Batch>& batches,
                                    const GptqConfig& cfg, const QuantPlan* plan = nullptr);

void write_gptq_report_csv(const std::vector<GptqLayerReport>& report, const std::string& path);

}  // namespace ptqlab
