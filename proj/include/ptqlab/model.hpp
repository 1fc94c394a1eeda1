#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ptqlab/tensor.hpp"

namespace ptqlab {

enum class GenerationMode { AR, Diffusion };

std::string to_string(GenerationMode mode);
GenerationMode parse_generation_mode(std::string_view text);

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by three specials.
namespace tokens {
inline constexpr int kMask = 256;
inline constexpr int kBos = 257;
inline constexpr int kPad = 258;
inline constexpr int kVocabSize = 259;
}  // namespace tokens

struct ModelConfig {
  std::size_t vocab_size = tokens::kVocabSize;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_seq_len = 128;
  GenerationMode mode = GenerationMode::AR;

  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }
  bool causal() const { return mode == GenerationMode::AR; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TrainingMeta {
  std::uint64_t seed = 0;
  std::uint64_t steps = 0;
  std::string corpus_hash;
  std::string config_hash;
  friend bool operator==(const TrainingMeta&, const TrainingMeta&) = default;
};

struct ModelCheckpoint {
  ModelConfig config;
  std::map<std::string, Tensor> params;
  TrainingMeta meta;

  const Tensor& param(const std::string& path) const;
  Tensor& param(const std::string& path);
  friend bool operator==(const ModelCheckpoint&, const ModelCheckpoint&) = default;
};

// Canonical parameter order, used for serialization and the binary64 engine.
std::vector<std::string> parameter_names(const ModelConfig& config);
Shape parameter_shape(const ModelConfig& config, std::string_view name);

// 2-D weights of linear maps in forward order (attention q/k/v/o, feed-forward
// in/out per layer, then the output head). Each is stored [d_out x d_in].
std::vector<std::string> linear_module_paths(const ModelConfig& config);
// Modules a quantization plan must cover. The token embedding and output head
// are only included when `include_embeddings` is set.
std::vector<std::string> quantizable_module_paths(const ModelConfig& config,
                                                  bool include_embeddings);

ModelCheckpoint init_checkpoint(const ModelConfig& config, std::uint64_t seed);
ModelCheckpoint zero_checkpoint(const ModelConfig& config);

struct Batch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> token_ids;          // batch x seq
  std::vector<int> targets;            // batch x seq, read where loss_mask is set
  std::vector<std::uint8_t> loss_mask; // batch x seq

  void validate(const ModelConfig& config) const;
  std::size_t loss_positions() const;
};

// Binary64 working copy of a checkpoint in canonical parameter order. All
// forward/backward math runs on this type.
class ParamSet {
 public:
  explicit ParamSet(const ModelCheckpoint& ckpt);
  ParamSet(ModelConfig config, std::vector<Tensor64> tensors);

  const ModelConfig& config() const noexcept { return config_; }
  std::size_t size() const noexcept { return tensors_.size(); }
  std::size_t index_of(std::string_view path) const;
  const std::string& name(std::size_t i) const { return names_[i]; }
  const std::vector<std::string>& names() const noexcept { return names_; }

  Tensor64& operator[](std::size_t i) { return tensors_[i]; }
  const Tensor64& operator[](std::size_t i) const { return tensors_[i]; }
  Tensor64& at(std::string_view path) { return tensors_[index_of(path)]; }
  const Tensor64& at(std::string_view path) const { return tensors_[index_of(path)]; }
  std::vector<Tensor64>& tensors() noexcept { return tensors_; }
  const std::vector<Tensor64>& tensors() const noexcept { return tensors_; }

  // Rounds to binary32 storage.
  ModelCheckpoint to_checkpoint(const TrainingMeta& meta) const;
  std::size_t total_parameters() const;

 private:
  ModelConfig config_;
  std::vector<std::string> names_;
  std::vector<Tensor64> tensors_;
};

// Called with the input rows of a linear module during a forward pass.
using LinearInputHook =
    std::function<void(const std::string& path, std::span<const double> rows, std::size_t d_in)>;

struct ForwardOptions {
  // Compute logits only for the final position of every row.
  bool last_position_only = false;
  const LinearInputHook* hook = nullptr;
};

// Logits laid out [batch x seq x vocab] (or [batch x vocab] when
// last_position_only is set).
Tensor64 forward_logits(const ParamSet& params, std::span<const int> token_ids, std::size_t batch,
                        std::size_t seq, const ForwardOptions& options = {});
Tensor forward(const ModelCheckpoint& ckpt, const Batch& batch);

struct LossAndGrads {
  double loss = 0.0;
  std::vector<Tensor64> grads;  // canonical order, same shapes as ParamSet
};

// Mean cross-entropy over loss-mask positions and its gradient.
LossAndGrads loss_and_grads(const ParamSet& params, const Batch& batch);
double loss_only(const ParamSet& params, const Batch& batch);

struct CheckpointLossAndGrads {
  double loss = 0.0;
  std::map<std::string, Tensor64> grads;
};
CheckpointLossAndGrads loss_and_grads(const ModelCheckpoint& ckpt, const Batch& batch);

// Greedy argmax continuation; all prompts must share one length.
std::vector<std::vector<int>> generate_ar_batch(const ParamSet& params,
                                                const std::vector<std::vector<int>>& prompts,
                                                std::size_t max_new);
std::vector<int> generate_ar(const ModelCheckpoint& ckpt, const std::vector<int>& prompt,
                             std::size_t max_new);

/// Confidence-ordered parallel unmasking.
///
/// The completion region starts as MASK. Each step runs one full-sequence
/// forward, scores every still-masked position by the softmax probability of
/// its argmax token, and commits the k = ceil(remaining / steps_left) most
/// confident positions (ties to the lower index). Steps beyond target_len have
/// nothing left to commit and are skipped. `remaining_trace`, when given,
/// receives the masked count after every executed step of the first prompt.
std::vector<std::vector<int>> generate_diffusion_batch(
    const ParamSet& params, const std::vector<std::vector<int>>& prompts, std::size_t target_len,
    std::size_t steps, std::vector<std::size_t>* remaining_trace = nullptr);
std::vector<int> generate_diffusion(const ModelCheckpoint& ckpt, const std::vector<int>& prompt,
                                    std::size_t target_len, std::size_t steps);

// Number of committed positions per step for the unmasking schedule.
std::vector<std::size_t> unmask_schedule(std::size_t target_len, std::size_t steps);

// Total forward passes executed by this process (used to verify cache hits).
std::uint64_t forward_call_count();

}  // namespace ptqlab
