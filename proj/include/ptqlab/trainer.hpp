#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ptqlab/model.hpp"
#include "ptqlab/tasks.hpp"

namespace ptqlab {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  ModelConfig model;
  std::string corpus_path;  // optional text shard; empty means tasks only
  TaskMix mix;
  std::size_t batch_size = 32;
  std::size_t steps = 3000;
  AdamConfig adam;
  std::uint64_t seed = 1234;
  std::size_t log_every = 10;
  std::size_t heldout_batches = 4;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  // Digest of everything that determines the trained weights.
  std::string config_hash() const;
};

struct TrainLogEntry {
  std::size_t step = 0;
  double loss = 0.0;
};

struct TrainResult {
  ModelCheckpoint checkpoint;
  std::vector<TrainLogEntry> curve;
  double initial_heldout_loss = 0.0;
  double final_heldout_loss = 0.0;
};

// Raised when the loss becomes non-finite; carries the last finite state.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, ModelCheckpoint last_good, std::size_t step)
      : Error("divergence", what), last_good_(std::move(last_good)), step_(step) {}
  const ModelCheckpoint& last_good() const noexcept { return last_good_; }
  std::size_t step() const noexcept { return step_; }

 private:
  ModelCheckpoint last_good_;
  std::size_t step_;
};

CorpusSampler make_sampler(const TrainConfig& cfg);

// Adam on a binary64 master copy; the returned checkpoint is rounded to
// binary32. Deterministic given the config.
TrainResult train(const TrainConfig& cfg);

// Trains the AR and diffusion variants of `cfg.model` on the same data stream.
std::pair<TrainResult, TrainResult> make_paired_checkpoints(const TrainConfig& cfg);

void write_train_log_csv(const std::vector<TrainLogEntry>& curve, const std::string& path);

// Held-out batches drawn from a stream disjoint from training.
std::vector<Batch> heldout_batches(const TrainConfig& cfg, GenerationMode mode,
                                   std::size_t count, std::uint64_t stream);

}  // namespace ptqlab
