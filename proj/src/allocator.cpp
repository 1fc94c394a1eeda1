#include "ptqlab/allocator.hpp"

#include <cmath>

namespace ptqlab {

void SplitRatios::validate() const {
  if (p16 < 0.0 || p8 < 0.0 || p4 < 0.0) throw ParameterError("split ratios must be >= 0");
  if (std::abs(p16 + p8 + p4 - 1.0) > 1e-9) throw ParameterError("split ratios must sum to 1");
}

nlohmann::json SplitRatios::to_json() const { return nlohmann::json::array({p16, p8, p4}); }

SplitRatios SplitRatios::from_json(const nlohmann::json& j) {
  SplitRatios r;
  try {
    if (j.is_array()) {
      if (j.size() != 3) throw FormatError("split ratios need three entries");
      r = {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
    } else {
      r = {j.at("p16").get<double>(), j.at("p8").get<double>(), j.at("p4").get<double>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed split ratios: ") + e.what());
  }
  r.validate();
  return r;
}

std::string to_string(BitRemap r) { return r == BitRemap::None ? "none" : "8/4"; }

BitRemap parse_bit_remap(std::string_view text) {
  if (text == "none" || text == "16/8") return BitRemap::None;
  if (text == "8/4") return BitRemap::EightFour;
  throw ParameterError("unknown bit remap '" + std::string(text) + "'");
}

std::vector<int> split_bits(std::size_t m, const SplitRatios& ratios, BitRemap remap) {
  ratios.validate();
  const double md = static_cast<double>(m);
  const auto k16 = static_cast<std::size_t>(std::floor(ratios.p16 * md));
  const auto k8 = static_cast<std::size_t>(std::floor((ratios.p16 + ratios.p8) * md));
  const int hi = remap == BitRemap::EightFour ? 8 : 16;
  const int mid = remap == BitRemap::EightFour ? 4 : 8;
  std::vector<int> bits(m);
  for (std::size_t i = 1; i <= m; ++i) {
    bits[i - 1] = i <= k16 ? hi : (i <= k8 ? mid : 4);
  }
  return bits;
}

QuantPlan plan_from_bits(const std::vector<std::string>& ranked_modules, const std::vector<int>& bits,
                         std::size_t group_size, nlohmann::json details) {
  if (bits.size() != ranked_modules.size()) throw DimensionError("one bit width per module needed");
  QuantPlan plan;
  plan.group_size = group_size;
  plan.provenance = PlanProvenance::HawqSplit;
  for (std::size_t i = 0; i < bits.size(); ++i) plan.modules.push_back({ranked_modules[i], bits[i]});
  plan.details = std::move(details);
  return plan;
}

QuantPlan assign_precision(const std::vector<std::string>& ranked_modules, const SplitRatios& ratios,
                           std::size_t group_size, BitRemap remap) {
  if (ranked_modules.empty()) throw ParameterError("no modules to assign");
  const auto bits = split_bits(ranked_modules.size(), ratios, remap);
  return plan_from_bits(ranked_modules, bits, group_size,
                        {{"ratios", ratios.to_json()}, {"remap", to_string(remap)}});
}

BudgetAssignment ratios_for_budget(const std::vector<RankedModule>& ranked, double target_avg_bits) {
  if (!(target_avg_bits >= 4.0 && target_avg_bits <= 16.0)) {
    throw ParameterError("target average bits must be within [4, 16]");
  }
  if (ranked.empty()) throw ParameterError("no modules to assign");
  double total = 0.0;
  for (const auto& m : ranked) {
    if (m.n_params == 0) throw ParameterError("module '" + m.path + "' has no parameters");
    total += static_cast<double>(m.n_params);
  }
  const double budget = target_avg_bits * total;
  BudgetAssignment out;
  out.bits.assign(ranked.size(), 4);
  double used = 4.0 * total;
  const auto raise = [&](int from, int to) {
    for (std::size_t i = 0; i < ranked.size(); ++i) {
      if (out.bits[i] != from) continue;
      const double extra = static_cast<double>(to - from) * static_cast<double>(ranked[i].n_params);
      if (used + extra > budget + 1e-9 * total) break;
      used += extra;
      out.bits[i] = to;
    }
  };
  raise(4, 8);
  raise(8, 16);
  std::size_t n16 = 0, n8 = 0;
  for (const int b : out.bits) {
    n16 += b == 16;
    n8 += b == 8;
  }
  const double m = static_cast<double>(ranked.size());
  out.ratios = {static_cast<double>(n16) / m, static_cast<double>(n8) / m,
                static_cast<double>(ranked.size() - n16 - n8) / m};
  out.achieved_avg_bits = used / total;
  return out;
}

}  // namespace ptqlab
