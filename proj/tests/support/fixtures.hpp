#pragma once

#include <array>
#include <string>
#include <vector>

#include "ptqlab/eval.hpp"

namespace fixture {

using ptqlab::EvalResult;
using ptqlab::GenerationMode;
using ptqlab::TaskKind;

inline EvalResult result(const std::string& model, const std::string& method, const std::string& level,
                         const std::array<double, 4>& s, double bits) {
  EvalResult r;
  r.model = model;
  r.mode = model == "ar" ? GenerationMode::AR : GenerationMode::Diffusion;
  r.method = method;
  r.bits_or_plan = level;
  r.scores = {{TaskKind::Copy, s[0]},
              {TaskKind::Reverse, s[1]},
              {TaskKind::PatternCompletion, s[2]},
              {TaskKind::HeldoutTokenAccuracy, s[3]}};
  r.raw_bits = bits;
  r.eff_bits = bits == 16 ? 16 : bits + 0.125;
  r.seed = 20251;
  r.config_hash = "0123456789abcdef";
  return r;
}

// Per model a baseline and GPTQ at 8/4/3/2 bits; four score columns map onto
// the four tasks.
inline std::vector<EvalResult> reference_grid() {
  struct Level {
    std::string method, level;
    double bits;
    std::array<double, 4> diffusion, ar;
  };
  const std::vector<Level> levels = {
      {"baseline", "16", 16, {0.481, 0.439, 0.468, 0.619}, {0.671, 0.628, 0.478, 0.664}},
      {"gptq", "8", 8, {0.481, 0.421, 0.466, 0.632}, {0.665, 0.616, 0.490, 0.656}},
      {"gptq", "4", 4, {0.457, 0.421, 0.418, 0.574}, {0.439, 0.409, 0.358, 0.503}},
      {"gptq", "3", 3, {0.317, 0.292, 0.362, 0.479}, {0.000, 0.000, 0.002, 0.000}},
      {"gptq", "2", 2, {0.000, 0.000, 0.000, 0.000}, {0.000, 0.000, 0.000, 0.000}},
  };
  std::vector<EvalResult> out;
  for (const auto& l : levels) out.push_back(result("ar", l.method, l.level, l.ar, l.bits));
  for (const auto& l : levels) out.push_back(result("diffusion", l.method, l.level, l.diffusion, l.bits));
  return out;
}

}  // namespace fixture
