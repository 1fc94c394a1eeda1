#include "ptqlab/quant.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

namespace ptqlab {

void GroupQuantSpec::validate() const {
  if (bits != 2 && bits != 3 && bits != 4 && bits != 8 && bits != 16) {
    throw ParameterError("bit width must be one of {2,3,4,8,16}, got " + std::to_string(bits));
  }
  if (group_size < 1) throw ParameterError("group size must be >= 1");
}

int quant_max_code(int bits) {
  if (bits < 2 || bits > 8) {
    throw ParameterError("integer quantization supports 2..8 bits, got " + std::to_string(bits));
  }
  return (1 << (bits - 1)) - 1;
}

namespace {

constexpr int kScaleMantissaBits = 17;

// Rounds a positive value up to kScaleMantissaBits significant bits.
double round_up_mantissa(double x) {
  int exp = 0;
  const double frac = std::frexp(x, &exp);
  return std::ldexp(std::ceil(std::ldexp(frac, kScaleMantissaBits)), exp - kScaleMantissaBits);
}

}  // namespace

float group_scale(double max_abs, int bits) {
  const int qmax = quant_max_code(bits);
  if (max_abs == 0.0) return 1.0f;
  return static_cast<float>(round_up_mantissa(max_abs / qmax));
}

std::int8_t quantize_value(double value, float scale, int bits) {
  const int qmax = quant_max_code(bits);
  const double q = std::round(value / static_cast<double>(scale));
  return static_cast<std::int8_t>(std::clamp(q, -static_cast<double>(qmax), static_cast<double>(qmax)));
}

GroupQuant quantize_group(std::span<const float> values, int bits) {
  if (bits != 2 && bits != 3 && bits != 4 && bits != 8) {
    throw ParameterError("quantize_group supports 2, 3, 4 or 8 bits, got " + std::to_string(bits));
  }
  double max_abs = 0.0;
  for (const float v : values) {
    if (!std::isfinite(v)) throw NumericError("quantize_group: non-finite input value");
    max_abs = std::max(max_abs, std::abs(static_cast<double>(v)));
  }
  GroupQuant g;
  g.scale = group_scale(max_abs, bits);
  g.codes.reserve(values.size());
  for (const float v : values) g.codes.push_back(quantize_value(v, g.scale, bits));
  return g;
}

std::size_t group_count(std::size_t cols, std::size_t group_size) {
  return (cols + group_size - 1) / group_size;
}

void QuantizedWeight::validate() const {
  spec.validate();
  if (shape.size() != 2) throw DimensionError("quantized weight must be 2-D");
  if (spec.passthrough()) {
    if (passthrough_values.shape() != shape) {
      throw DimensionError("16-bit passthrough values do not match weight shape");
    }
    return;
  }
  const int qmax = quant_max_code(spec.bits);
  if (codes.size() != rows() * cols()) throw DimensionError("code grid does not match shape");
  if (scales.shape() != Shape{rows(), n_groups()}) {
    throw DimensionError("scale grid must be [rows x n_groups]");
  }
  for (const auto c : codes) {
    if (c < -qmax || c > qmax) throw ContractError("code outside the symmetric grid");
  }
  for (const float s : scales.storage()) {
    if (!(s >= 0.0f) || !std::isfinite(s)) throw ContractError("invalid group scale");
  }
}

QuantizedWeight quantize_weight(const Tensor& weight, const GroupQuantSpec& spec) {
  spec.validate();
  if (weight.rank() != 2) {
    throw DimensionError("quantize_weight expects a 2-D weight, got " +
                         shape_to_string(weight.shape()));
  }
  require_finite(weight, "weight");
  QuantizedWeight qw;
  qw.shape = weight.shape();
  qw.spec = spec;
  if (spec.passthrough()) {
    qw.passthrough_values = weight;
    return qw;
  }
  const std::size_t rows = weight.rows();
  const std::size_t cols = weight.cols();
  const std::size_t groups = group_count(cols, spec.group_size);
  qw.scales = Tensor({rows, groups});
  qw.codes.resize(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = weight.row(r);
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t begin = g * spec.group_size;
      const std::size_t len = std::min(spec.group_size, cols - begin);
      const GroupQuant gq = quantize_group(row.subspan(begin, len), spec.bits);
      qw.scales.at(r, g) = gq.scale;
      std::copy(gq.codes.begin(), gq.codes.end(), qw.codes.begin() + static_cast<std::ptrdiff_t>(r * cols + begin));
    }
  }
  return qw;
}

Tensor dequantize(const QuantizedWeight& qw) {
  qw.validate();
  if (qw.spec.passthrough()) return qw.passthrough_values;
  Tensor out(qw.shape);
  const std::size_t cols = qw.cols();
  for (std::size_t r = 0; r < qw.rows(); ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const float s = qw.scales.at(r, c / qw.spec.group_size);
      out.at(r, c) = static_cast<float>(qw.codes[r * cols + c]) * s;
    }
  }
  return out;
}

std::string to_string(PlanProvenance p) {
  switch (p) {
    case PlanProvenance::Uniform: return "uniform";
    case PlanProvenance::HawqSplit: return "hawq_split";
    case PlanProvenance::Manual: return "manual";
  }
  return "manual";
}

PlanProvenance parse_provenance(std::string_view text) {
  if (text == "uniform") return PlanProvenance::Uniform;
  if (text == "hawq_split") return PlanProvenance::HawqSplit;
  if (text == "manual") return PlanProvenance::Manual;
  throw FormatError("unknown plan provenance '" + std::string(text) + "'");
}

std::optional<int> QuantPlan::bits_for(std::string_view path) const {
  for (const auto& e : modules) {
    if (e.path == path) return e.bits;
  }
  return std::nullopt;
}

GroupQuantSpec QuantPlan::spec_for(std::string_view path) const {
  const auto bits = bits_for(path);
  if (!bits) throw CoverageError("plan does not cover module '" + std::string(path) + "'");
  return {*bits, group_size};
}

bool QuantPlan::includes_embeddings() const {
  return bits_for("tok_emb").has_value() || bits_for("head").has_value();
}

nlohmann::json plan_to_json(const QuantPlan& plan) {
  nlohmann::json modules = nlohmann::json::array();
  for (const auto& e : plan.modules) modules.push_back({{"path", e.path}, {"bits", e.bits}});
  nlohmann::json j = {{"version", kPlanFormatVersion},
                      {"group_size", plan.group_size},
                      {"provenance", to_string(plan.provenance)},
                      {"modules", modules}};
  if (!plan.details.empty()) j["details"] = plan.details;
  return j;
}

QuantPlan plan_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != kPlanFormatVersion) {
      throw FormatError("unsupported plan version " + j.at("version").dump());
    }
    QuantPlan plan;
    plan.group_size = j.at("group_size").get<std::size_t>();
    plan.provenance = parse_provenance(j.at("provenance").get<std::string>());
    for (const auto& m : j.at("modules")) {
      plan.modules.push_back({m.at("path").get<std::string>(), m.at("bits").get<int>()});
      GroupQuantSpec{plan.modules.back().bits, plan.group_size}.validate();
    }
    if (j.contains("details")) plan.details = j.at("details");
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed quantization plan: ") + e.what());
  }
}

void save_plan(const QuantPlan& plan, const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write plan file " + path);
  os << plan_to_json(plan).dump(2) << '\n';
  if (!os) throw IoError("failed writing plan file " + path);
}

QuantPlan load_plan(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read plan file " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("plan file " + path + " is not valid JSON: " + e.what());
  }
  return plan_from_json(j);
}

QuantPlan uniform_plan(const ModelConfig& config, int bits, std::size_t group_size,
                       bool include_embeddings) {
  GroupQuantSpec{bits, group_size}.validate();
  QuantPlan plan;
  plan.group_size = group_size;
  plan.provenance = PlanProvenance::Uniform;
  for (auto& p : quantizable_module_paths(config, include_embeddings)) {
    plan.modules.push_back({std::move(p), bits});
  }
  return plan;
}

void check_plan_coverage(const QuantPlan& plan, const ModelCheckpoint& ckpt) {
  const auto required = quantizable_module_paths(ckpt.config, plan.includes_embeddings());
  std::set<std::string> seen;
  std::vector<std::string> problems;
  for (const auto& e : plan.modules) {
    if (!seen.insert(e.path).second) problems.push_back("duplicate '" + e.path + "'");
    if (std::find(required.begin(), required.end(), e.path) == required.end()) {
      problems.push_back("unknown '" + e.path + "'");
    }
    GroupQuantSpec{e.bits, plan.group_size}.validate();
  }
  for (const auto& r : required) {
    if (!seen.count(r)) problems.push_back("missing '" + r + "'");
  }
  if (!problems.empty()) {
    std::string msg = "plan does not match checkpoint modules:";
    for (const auto& p : problems) msg += " " + p;
    throw CoverageError(msg);
  }
}

ModelCheckpoint rtn_quantize_model(const ModelCheckpoint& ckpt, const QuantPlan& plan) {
  check_plan_coverage(plan, ckpt);
  ModelCheckpoint out = ckpt;
  for (const auto& e : plan.modules) {
    const GroupQuantSpec spec{e.bits, plan.group_size};
    if (spec.passthrough()) continue;
    out.param(e.path) = dequantize(quantize_weight(ckpt.param(e.path), spec));
  }
  return out;
}

MemoryFootprint memory_footprint(const QuantPlan& plan, const ModelCheckpoint& ckpt) {
  check_plan_coverage(plan, ckpt);
  double weights = 0.0;
  double raw_bits = 0.0;
  double eff_bits = 0.0;
  for (const auto& e : plan.modules) {
    const Tensor& w = ckpt.param(e.path);
    const auto n = static_cast<double>(w.numel());
    weights += n;
    raw_bits += n * e.bits;
    eff_bits += n * e.bits;
    if (e.bits != 16) {
      eff_bits += 16.0 * static_cast<double>(w.rows() * group_count(w.cols(), plan.group_size));
    }
  }
  MemoryFootprint m;
  if (weights > 0.0) {
    m.raw_avg_bits = raw_bits / weights;
    m.effective_avg_bits = eff_bits / weights;
  }
  m.total_bytes_effective = eff_bits / 8.0;
  return m;
}

}  // namespace ptqlab
