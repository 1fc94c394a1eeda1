#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"

#include "ptqlab/quant.hpp"

namespace ptqlab {

struct SplitRatios {
  double p16 = 0.5;
  double p8 = 0.5;
  double p4 = 0.0;

  void validate() const;
  nlohmann::json to_json() const;
  static SplitRatios from_json(const nlohmann::json& j);
};

// EightFour relabels the tiers so the top group gets 8 bits and the rest 4.
enum class BitRemap { None, EightFour };
std::string to_string(BitRemap r);
BitRemap parse_bit_remap(std::string_view text);

// Bits for M modules ranked most sensitive first: positions 1..k16 get 16,
// k16+1..k8 get 8 and the rest 4, with k16 = floor(p16 M) and
// k8 = floor((p16 + p8) M).
std::vector<int> split_bits(std::size_t m, const SplitRatios& ratios, BitRemap remap = BitRemap::None);

// Plan listing the modules in ranked order.
QuantPlan assign_precision(const std::vector<std::string>& ranked_modules, const SplitRatios& ratios,
                           std::size_t group_size = kDefaultGroupSize,
                           BitRemap remap = BitRemap::None);

struct RankedModule {
  std::string path;
  std::size_t n_params = 0;
};

struct BudgetAssignment {
  SplitRatios ratios;
  double achieved_avg_bits = 0.0;
  std::vector<int> bits;  // per ranked module
};

/// Size-aware greedy fill toward an average of `target_avg_bits` per weight.
///
/// Starting from all 4-bit, modules are raised to 8 bits in ranked order until
/// the next one no longer fits; then modules already at 8 are raised to 16 in
/// the same order until the next one no longer fits. The result never exceeds
/// the target and more sensitive modules never hold fewer bits.
BudgetAssignment ratios_for_budget(const std::vector<RankedModule>& ranked, double target_avg_bits);

QuantPlan plan_from_bits(const std::vector<std::string>& ranked_modules, const std::vector<int>& bits,
                         std::size_t group_size, nlohmann::json details);

}  // namespace ptqlab
