#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "ptqlab/model.hpp"
#include "ptqlab/rng.hpp"

namespace ptqlab {

// Synthetic exact-match tasks. Every example is BOS + 7 prompt bytes followed
// by a 6-byte completion, so all sequences share one length:
//   copy     BOS s1..s6 '='  ->  s1..s6
//   reverse  BOS s1..s6 '<'  ->  s6..s1
//   pattern  BOS p1..p7      ->  p8..p13   (p has period 2 or 3)
enum class TaskKind { Copy, Reverse, PatternCompletion, HeldoutTokenAccuracy };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view text);

inline constexpr std::size_t kTaskBodyLen = 6;
inline constexpr std::size_t kPromptLen = 8;      // BOS + 7 bytes
inline constexpr std::size_t kCompletionLen = 6;
inline constexpr std::size_t kSequenceLen = kPromptLen + kCompletionLen;

struct TaskExample {
  TaskKind kind = TaskKind::Copy;
  std::vector<int> prompt;
  std::vector<int> completion;
};

// Draws one example of a generation task (not HeldoutTokenAccuracy).
TaskExample make_task_example(TaskKind kind, Rng& rng);

// A training/calibration sequence: tokens plus the index where the
// completion starts (diffusion masking only touches positions >= that index).
struct Sequence {
  std::vector<int> tokens;
  std::size_t completion_start = 1;
};

struct TaskMix {
  double copy = 1.0;
  double reverse = 1.0;
  double pattern = 1.0;
  double text = 0.1;

  void validate() const;
  nlohmann::json to_json() const;
  static TaskMix from_json(const nlohmann::json& j);
};

/// Draws training sequences from the task generators and an optional text
/// shard (fixed-length windows of raw bytes).
class CorpusSampler {
 public:
  CorpusSampler(TaskMix mix, std::string text);

  Sequence sample(Rng& rng) const;
  // Stable digest of the generator setup and text bytes.
  std::string corpus_hash() const;
  const std::string& text() const noexcept { return text_; }

 private:
  TaskMix mix_;
  std::string text_;
};

std::string read_text_file(const std::string& path);

// AR: inputs are tokens[0..L-2], targets tokens[1..L-1], loss everywhere.
// Diffusion: each completion position is replaced by MASK with probability
// `mask_ratio` (at least one per row); loss only at masked positions.
Batch make_batch(const std::vector<Sequence>& rows, GenerationMode mode, double mask_ratio,
                 Rng& mask_rng);

// Draws `rows` sequences and a mask ratio uniform in [0.1, 0.9] (diffusion only).
Batch sample_batch(const CorpusSampler& sampler, std::size_t rows, GenerationMode mode,
                   Rng& data_rng, Rng& mask_rng);

}  // namespace ptqlab
