#include "ptqlab/gptq.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "ptqlab/numerics.hpp"

namespace ptqlab {

void GptqConfig::validate() const {
  if (bits != 2 && bits != 3 && bits != 4 && bits != 8) {
    throw ParameterError("GPTQ supports bit widths {2,3,4,8}, got " + std::to_string(bits));
  }
  if (group_size < 1) throw ParameterError("group size must be >= 1");
  if (!(damping > 0.0)) throw ParameterError("damping fraction must be > 0");
}

nlohmann::json GptqConfig::to_json() const {
  return {{"bits", bits},
          {"group_size", group_size},
          {"damping", damping},
          {"order", order == ColumnOrder::Ascending ? "ascending" : "by_diag_desc"},
          {"isolated_layers", isolated_layers},
          {"include_embeddings", include_embeddings}};
}

GptqConfig GptqConfig::from_json(const nlohmann::json& j) {
  GptqConfig c;
  try {
    c.bits = j.value("bits", c.bits);
    c.group_size = j.value("group_size", c.group_size);
    c.damping = j.value("damping", c.damping);
    const std::string order = j.value("order", std::string("ascending"));
    if (order == "ascending") {
      c.order = ColumnOrder::Ascending;
    } else if (order == "by_diag_desc") {
      c.order = ColumnOrder::ByDiagDesc;
    } else {
      throw ParameterError("unknown GPTQ column order '" + order + "'");
    }
    c.isolated_layers = j.value("isolated_layers", c.isolated_layers);
    c.include_embeddings = j.value("include_embeddings", c.include_embeddings);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed gptq config: ") + e.what());
  }
  return c;
}

void LayerCalibration::add_rows(std::span<const double> rows, std::size_t d_in) {
  if (h.rows() != d_in || rows.size() % d_in != 0) {
    throw DimensionError("calibration rows do not match layer input width");
  }
  const std::size_t n = rows.size() / d_in;
  for (std::size_t r = 0; r < n; ++r) {
    const double* x = rows.data() + r * d_in;
    for (std::size_t i = 0; i < d_in; ++i) {
      const double xi = 2.0 * x[i];
      if (xi == 0.0) continue;
      double* hi = h.data() + i * d_in;
      for (std::size_t j = 0; j < d_in; ++j) hi[j] += xi * x[j];
    }
  }
  n_samples += n;
}

std::map<std::string, LayerCalibration> collect_calibration(
    const ParamSet& params, const std::vector<Batch>& batches,
    const std::vector<std::string>& paths) {
  if (batches.empty()) throw ContractError("calibration needs at least one batch");
  std::vector<std::string> wanted = paths.empty() ? linear_module_paths(params.config()) : paths;
  std::map<std::string, LayerCalibration> calib;
  for (const auto& p : wanted) {
    const std::size_t d_in = params.at(p).cols();
    calib.emplace(p, LayerCalibration(p, d_in));
  }
  const LinearInputHook hook = [&](const std::string& path, std::span<const double> rows,
                                   std::size_t d_in) {
    auto it = calib.find(path);
    if (it != calib.end()) it->second.add_rows(rows, d_in);
  };
  for (const auto& b : batches) {
    b.validate(params.config());
    forward_logits(params, b.token_ids, b.batch, b.seq, {.hook = &hook});
  }
  for (const auto& [path, c] : calib) {
    if (c.n_samples == 0) throw ContractError("no calibration tokens reached '" + path + "'");
  }
  return calib;
}

std::map<std::string, LayerCalibration> collect_calibration(
    const ModelCheckpoint& ckpt, const std::vector<Batch>& batches,
    const std::vector<std::string>& paths) {
  return collect_calibration(ParamSet(ckpt), batches, paths);
}

double reconstruction_error(const Tensor& original, const Tensor& reconstructed,
                            const Tensor64& h) {
  if (original.shape() != reconstructed.shape() || original.rank() != 2 ||
      h.rows() != original.cols()) {
    throw DimensionError("reconstruction_error: incompatible shapes");
  }
  const std::size_t d = original.cols();
  std::vector<double> delta(d);
  double total = 0.0;
  for (std::size_t r = 0; r < original.rows(); ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      delta[c] = static_cast<double>(original.at(r, c)) - static_cast<double>(reconstructed.at(r, c));
    }
    for (std::size_t i = 0; i < d; ++i) {
      if (delta[i] == 0.0) continue;
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += h.at(i, j) * delta[j];
      total += delta[i] * s;
    }
  }
  return total / 2.0;
}

namespace {

Tensor64 damped_inverse(Tensor64 h, double damping_fraction, double& damping_used) {
  const std::size_t d = h.rows();
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < d; ++i) mean_diag += h.at(i, i);
  mean_diag /= static_cast<double>(d);
  double damp = damping_fraction * (mean_diag > 0.0 ? mean_diag : 1.0);
  constexpr int kRetries = 3;
  for (int attempt = 0;; ++attempt) {
    Tensor64 hd = h;
    for (std::size_t i = 0; i < d; ++i) hd.at(i, i) += damp;
    try {
      Tensor64 inv = cholesky_invert_spd(hd);
      damping_used = damp;
      return inv;
    } catch (const NotPositiveDefiniteError&) {
      if (attempt == kRetries) throw;
      damp *= 10.0;
    }
  }
}

}  // namespace

GptqLayerResult gptq_quantize_layer(const Tensor& weight, const LayerCalibration& calib,
                                    const GptqConfig& cfg) {
  cfg.validate();
  if (weight.rank() != 2) throw DimensionError("GPTQ expects a 2-D weight");
  const std::size_t rows = weight.rows();
  const std::size_t cols = weight.cols();
  if (calib.h.rows() != cols || calib.h.cols() != cols) {
    throw DimensionError("calibration Hessian is " + shape_to_string(calib.h.shape()) +
                         " but the weight has " + std::to_string(cols) + " inputs");
  }
  if (calib.n_samples == 0) throw ContractError("calibration for '" + calib.path + "' is empty");
  require_finite(weight, "weight");

  Tensor64 w = weight.cast<double>();
  Tensor64 h = calib.h;
  // Dead inputs: H_jj pinned to 1, column zeroed.
  for (std::size_t i = 0; i < cols; ++i) {
    if (h.at(i, i) == 0.0) {
      h.at(i, i) = 1.0;
      for (std::size_t r = 0; r < rows; ++r) w.at(r, i) = 0.0;
    }
  }
  GptqLayerResult result;
  Tensor64 hinv = damped_inverse(h, cfg.damping, result.damping_used);

  std::vector<std::size_t> order(cols);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (cfg.order == ColumnOrder::ByDiagDesc) {
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return h.at(a, a) > h.at(b, b); });
  }

  QuantizedWeight& qw = result.qweight;
  qw.shape = weight.shape();
  qw.spec = {cfg.bits, cfg.group_size};
  const std::size_t groups = qw.n_groups();
  qw.scales = Tensor({rows, groups});
  qw.codes.assign(rows * cols, 0);
  std::vector<bool> group_ready(groups, false);
  std::vector<double> err(rows);

  for (std::size_t t = 0; t < cols; ++t) {
    const std::size_t j = order[t];
    const std::size_t g = j / cfg.group_size;
    if (!group_ready[g]) {
      const std::size_t begin = g * cfg.group_size;
      const std::size_t end = std::min(cols, begin + cfg.group_size);
      for (std::size_t r = 0; r < rows; ++r) {
        double max_abs = 0.0;
        for (std::size_t c = begin; c < end; ++c) max_abs = std::max(max_abs, std::abs(w.at(r, c)));
        qw.scales.at(r, g) = group_scale(max_abs, cfg.bits);
      }
      group_ready[g] = true;
    }
    const double d = hinv.at(j, j);
    for (std::size_t r = 0; r < rows; ++r) {
      const float s = qw.scales.at(r, g);
      const std::int8_t code = quantize_value(w.at(r, j), s, cfg.bits);
      qw.codes[r * cols + j] = code;
      const double deq = static_cast<double>(static_cast<float>(code) * s);
      err[r] = (w.at(r, j) - deq) / d;
      w.at(r, j) = deq;
    }
    // Push the rounding error onto columns that are still free.
    for (std::size_t u = t + 1; u < cols; ++u) {
      const std::size_t k = order[u];
      const double hjk = hinv.at(j, k);
      if (hjk == 0.0) continue;
      for (std::size_t r = 0; r < rows; ++r) w.at(r, k) -= err[r] * hjk;
    }
    // Eliminate j from the inverse Hessian of the remaining columns.
    for (std::size_t u = t + 1; u < cols; ++u) {
      const std::size_t a = order[u];
      const double f = hinv.at(a, j) / d;
      if (f == 0.0) continue;
      for (std::size_t v = t + 1; v < cols; ++v) {
        const std::size_t b = order[v];
        hinv.at(a, b) -= f * hinv.at(j, b);
      }
    }
  }
  result.recon_error = reconstruction_error(weight, dequantize(qw), calib.h);
  return result;
}

namespace {

// Groups of modules that read the same input, in forward order.
std::vector<std::vector<std::string>> forward_stages(const ModelConfig& c, bool include_head) {
  std::vector<std::vector<std::string>> stages;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    stages.push_back({p + "attn.q", p + "attn.k", p + "attn.v"});
    stages.push_back({p + "attn.o"});
    stages.push_back({p + "ffn.in"});
    stages.push_back({p + "ffn.out"});
  }
  if (include_head) stages.push_back({"head"});
  return stages;
}

void scale_stats(const QuantizedWeight& qw, GptqLayerReport& rep) {
  const auto& s = qw.scales.storage();
  if (s.empty()) return;
  rep.scale_min = *std::min_element(s.begin(), s.end());
  rep.scale_max = *std::max_element(s.begin(), s.end());
  double sum = 0.0;
  for (const float v : s) sum += v;
  rep.scale_mean = sum / static_cast<double>(s.size());
}

}  // namespace

GptqModelResult gptq_quantize_model(const ModelCheckpoint& ckpt, const std::vector<Batch>& batches,
                                    const GptqConfig& cfg_in, const QuantPlan* plan) {
  GptqConfig cfg = cfg_in;
  if (plan != nullptr) {
    check_plan_coverage(*plan, ckpt);
    cfg.include_embeddings = plan->includes_embeddings();
    cfg.group_size = plan->group_size;
    cfg.bits = 8;
  }
  cfg.validate();
  if (batches.empty()) throw ContractError("GPTQ needs calibration batches");
  GptqModelResult out;
  out.checkpoint = ckpt;
  ParamSet current(ckpt);
  const auto stages = forward_stages(ckpt.config, cfg.include_embeddings);
  const auto bits_for = [&](const std::string& path) {
    return plan != nullptr ? plan->spec_for(path).bits : cfg.bits;
  };

  std::map<std::string, LayerCalibration> isolated;
  if (cfg.isolated_layers) isolated = collect_calibration(current, batches, {});

  for (const auto& stage : stages) {
    if (std::all_of(stage.begin(), stage.end(),
                    [&](const std::string& p) { return bits_for(p) == 16; })) {
      continue;
    }
    std::map<std::string, LayerCalibration> calib =
        cfg.isolated_layers ? std::map<std::string, LayerCalibration>{}
                            : collect_calibration(current, batches, stage);
    for (const auto& path : stage) {
      GptqConfig layer_cfg = cfg;
      layer_cfg.bits = bits_for(path);
      if (layer_cfg.bits == 16) continue;
      const LayerCalibration& c = cfg.isolated_layers ? isolated.at(path) : calib.at(path);
      const Tensor& w = ckpt.param(path);
      GptqLayerResult layer;
      try {
        layer = gptq_quantize_layer(w, c, layer_cfg);
      } catch (const Error& e) {
        throw Error(e.kind(), "GPTQ failed for '" + path + "': " + e.what());
      }
      const Tensor deq = dequantize(layer.qweight);
      GptqLayerReport rep;
      rep.path = path;
      rep.bits = layer_cfg.bits;
      rep.recon_error = layer.recon_error;
      rep.rtn_recon_error = reconstruction_error(
          w, dequantize(quantize_weight(w, {layer_cfg.bits, cfg.group_size})), c.h);
      rep.damping = layer.damping_used;
      scale_stats(layer.qweight, rep);
      out.report.push_back(rep);
      out.checkpoint.param(path) = deq;
      current.at(path) = deq.cast<double>();
      out.quantized.emplace(path, std::move(layer.qweight));
    }
  }
  if (cfg.include_embeddings && bits_for("tok_emb") != 16) {
    // The embedding is a lookup table with no input activations; it takes the
    // round-to-nearest grid.
    QuantizedWeight qw = quantize_weight(ckpt.param("tok_emb"), {bits_for("tok_emb"), cfg.group_size});
    out.checkpoint.param("tok_emb") = dequantize(qw);
    out.quantized.emplace("tok_emb", std::move(qw));
  }
  return out;
}

void write_gptq_report_csv(const std::vector<GptqLayerReport>& report, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write GPTQ report " + path);
  os << "path,bits,recon_error,rtn_recon_error,scale_min,scale_mean,scale_max,damping\n";
  char buf[512];
  for (const auto& r : report) {
    std::snprintf(buf, sizeof buf, "%s,%d,%.6e,%.6e,%.6e,%.6e,%.6e,%.6e\n", r.path.c_str(), r.bits,
                  r.recon_error, r.rtn_recon_error, r.scale_min, r.scale_mean, r.scale_max,
                  r.damping);
    os << buf;
  }
}

}  // namespace ptqlab
