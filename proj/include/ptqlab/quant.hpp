#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "ptqlab/model.hpp"
#include "ptqlab/tensor.hpp"

namespace ptqlab {

inline constexpr std::size_t kDefaultGroupSize = 128;

struct GroupQuantSpec {
  int bits = 16;
  std::size_t group_size = kDefaultGroupSize;

  void validate() const;
  bool passthrough() const noexcept { return bits == 16; }
  friend bool operator==(const GroupQuantSpec&, const GroupQuantSpec&) = default;
};

// Largest code magnitude of the symmetric grid: 2^(bits-1) - 1.
int quant_max_code(int bits);

struct GroupQuant {
  float scale = 1.0f;
  std::vector<std::int8_t> codes;
};

/// Symmetric round-to-nearest quantization of one group.
///
/// scale = max|v| / qmax and codes = clamp(round_half_away(v / scale)). The
/// scale is rounded up to 17 significant bits. code * scale is then exact in
/// binary32 for every width up to 8, dequantized weights stay on the grid
/// after float storage and re-quantization is a fixed point. An
/// all-zero group gets scale 1 and zero codes.
GroupQuant quantize_group(std::span<const float> values, int bits);

// Scale that quantize_group would pick for a group whose max magnitude is
// `max_abs`.
float group_scale(double max_abs, int bits);
// clamp(round_half_away(value / scale), -qmax, qmax)
std::int8_t quantize_value(double value, float scale, int bits);

struct QuantizedWeight {
  Shape shape;                      // [rows x cols], groups run along cols
  GroupQuantSpec spec;
  Tensor scales;                    // [rows x n_groups]
  std::vector<std::int8_t> codes;   // rows x cols
  Tensor passthrough_values;        // set only when spec.bits == 16

  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.at(1); }
  std::size_t n_groups() const { return (cols() + spec.group_size - 1) / spec.group_size; }
  void validate() const;
  friend bool operator==(const QuantizedWeight&, const QuantizedWeight&) = default;
};

std::size_t group_count(std::size_t cols, std::size_t group_size);

QuantizedWeight quantize_weight(const Tensor& weight, const GroupQuantSpec& spec);
Tensor dequantize(const QuantizedWeight& qw);

enum class PlanProvenance { Uniform, HawqSplit, Manual };
std::string to_string(PlanProvenance p);
PlanProvenance parse_provenance(std::string_view text);

struct PlanEntry {
  std::string path;
  int bits = 16;
  friend bool operator==(const PlanEntry&, const PlanEntry&) = default;
};

struct QuantPlan {
  std::size_t group_size = kDefaultGroupSize;
  PlanProvenance provenance = PlanProvenance::Uniform;
  std::vector<PlanEntry> modules;
  // Free-form provenance details (split ratios, budget, remap).
  nlohmann::json details = nlohmann::json::object();

  std::optional<int> bits_for(std::string_view path) const;
  GroupQuantSpec spec_for(std::string_view path) const;
  bool includes_embeddings() const;
  friend bool operator==(const QuantPlan& a, const QuantPlan& b) {
    return a.group_size == b.group_size && a.provenance == b.provenance &&
           a.modules == b.modules && a.details == b.details;
  }
};

inline constexpr int kPlanFormatVersion = 1;

nlohmann::json plan_to_json(const QuantPlan& plan);
QuantPlan plan_from_json(const nlohmann::json& j);
void save_plan(const QuantPlan& plan, const std::string& path);
QuantPlan load_plan(const std::string& path);

QuantPlan uniform_plan(const ModelConfig& config, int bits,
                       std::size_t group_size = kDefaultGroupSize,
                       bool include_embeddings = false);

// Throws CoverageError unless the plan names every quantizable module of the
// checkpoint exactly once (and nothing else).
void check_plan_coverage(const QuantPlan& plan, const ModelCheckpoint& ckpt);

// Round-to-nearest baseline: each planned weight is replaced by
// dequantize(quantize_weight(...)); all other parameters are copied unchanged.
ModelCheckpoint rtn_quantize_model(const ModelCheckpoint& ckpt, const QuantPlan& plan);

struct MemoryFootprint {
  double raw_avg_bits = 0.0;
  double effective_avg_bits = 0.0;
  double total_bytes_effective = 0.0;
};

// Averages over the planned modules. Effective bits add one 16-bit scale per
// group for every quantized (non-16-bit) module.
MemoryFootprint memory_footprint(const QuantPlan& plan, const ModelCheckpoint& ckpt);

}  // namespace ptqlab
