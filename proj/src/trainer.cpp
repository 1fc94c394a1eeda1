#include "ptqlab/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "ptqlab/checkpoint_io.hpp"
#include "ptqlab/hash.hpp"

namespace ptqlab {
namespace {

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kDataStream = 2;
constexpr std::uint64_t kMaskStream = 3;
constexpr std::uint64_t kHeldoutStream = 4;

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  mix.validate();
  if (steps < 1) throw ParameterError("steps must be >= 1");
  if (!(adam.lr > 0.0)) throw ParameterError("learning rate must be > 0");
  if (batch_size < 1) throw ParameterError("batch size must be >= 1");
  if (model.max_seq_len < kSequenceLen) {
    throw ParameterError("max_seq_len is shorter than the task sequences");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return {{"model", config_to_json(model)},
          {"corpus_path", corpus_path},
          {"mix", mix.to_json()},
          {"batch_size", batch_size},
          {"steps", steps},
          {"adam", {{"lr", adam.lr}, {"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}}},
          {"seed", seed},
          {"log_every", log_every},
          {"heldout_batches", heldout_batches}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    if (j.contains("model")) c.model = config_from_json(j.at("model"));
    c.corpus_path = j.value("corpus_path", c.corpus_path);
    if (j.contains("mix")) c.mix = TaskMix::from_json(j.at("mix"));
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps = j.value("steps", c.steps);
    if (j.contains("adam")) {
      const auto& a = j.at("adam");
      c.adam.lr = a.value("lr", c.adam.lr);
      c.adam.beta1 = a.value("beta1", c.adam.beta1);
      c.adam.beta2 = a.value("beta2", c.adam.beta2);
      c.adam.eps = a.value("eps", c.adam.eps);
    }
    c.seed = j.value("seed", c.seed);
    c.log_every = j.value("log_every", c.log_every);
    c.heldout_batches = j.value("heldout_batches", c.heldout_batches);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed train config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string TrainConfig::config_hash() const {
  nlohmann::json j = to_json();
  j.erase("log_every");
  // The corpus enters through its content hash, not its location.
  j.erase("corpus_path");
  j["corpus_hash"] = make_sampler(*this).corpus_hash();
  return hex64(fnv1a64(j.dump()));
}

CorpusSampler make_sampler(const TrainConfig& cfg) {
  std::string text;
  if (!cfg.corpus_path.empty()) text = read_text_file(cfg.corpus_path);
  TaskMix mix = cfg.mix;
  if (text.empty()) mix.text = 0.0;
  return CorpusSampler(mix, std::move(text));
}

std::vector<Batch> heldout_batches(const TrainConfig& cfg, GenerationMode mode,
                                   std::size_t count, std::uint64_t stream) {
  const CorpusSampler sampler = make_sampler(cfg);
  Rng base = Rng(cfg.seed).fork(kHeldoutStream).fork(stream);
  Rng data = base.fork(1);
  Rng mask = base.fork(2);
  std::vector<Batch> out;
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(sample_batch(sampler, cfg.batch_size, mode, data, mask));
  }
  return out;
}

namespace {

double mean_loss(const ParamSet& params, const std::vector<Batch>& batches) {
  double s = 0.0;
  for (const auto& b : batches) s += loss_only(params, b);
  return s / static_cast<double>(batches.size());
}

bool fits_binary32(const ParamSet& params) {
  constexpr double kMax = std::numeric_limits<float>::max();
  for (const auto& t : params.tensors())
    for (const double w : t.values())
      if (!(std::abs(w) <= kMax)) return false;
  return true;
}

}  // namespace

TrainResult train(const TrainConfig& cfg) {
  cfg.validate();
  const CorpusSampler sampler = make_sampler(cfg);
  const GenerationMode mode = cfg.model.mode;

  const Rng root(cfg.seed);
  ModelCheckpoint init = init_checkpoint(cfg.model, root.fork(kInitStream).next_u64());
  ParamSet params(init);
  Rng data_rng = root.fork(kDataStream);
  Rng mask_rng = root.fork(kMaskStream);

  TrainingMeta meta;
  meta.seed = cfg.seed;
  meta.corpus_hash = sampler.corpus_hash();
  meta.config_hash = cfg.config_hash();

  const std::vector<Batch> heldout = heldout_batches(cfg, mode, cfg.heldout_batches, 0);
  TrainResult result;
  result.initial_heldout_loss = mean_loss(params, heldout);

  std::vector<Tensor64> m1, m2;
  for (const auto& t : params.tensors()) {
    m1.emplace_back(t.shape());
    m2.emplace_back(t.shape());
  }
  const AdamConfig& a = cfg.adam;
  double b1t = 1.0;
  double b2t = 1.0;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const Batch batch = sample_batch(sampler, cfg.batch_size, mode, data_rng, mask_rng);
    LossAndGrads lg;
    try {
      lg = loss_and_grads(params, batch);
    } catch (const NumericError& e) {
      meta.steps = step - 1;
      throw DivergenceError(std::string("training diverged: ") + e.what(),
                            params.to_checkpoint(meta), step);
    }
    if (step % cfg.log_every == 0 || step == 1 || step == cfg.steps) {
      result.curve.push_back({step, lg.loss});
    }
    const std::vector<Tensor64> before = params.tensors();
    b1t *= a.beta1;
    b2t *= a.beta2;
    const double c1 = 1.0 / (1.0 - b1t);
    const double c2 = 1.0 / (1.0 - b2t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      double* w = params[i].data();
      const double* g = lg.grads[i].data();
      double* m = m1[i].data();
      double* v = m2[i].data();
      for (std::size_t k = 0; k < params[i].numel(); ++k) {
        m[k] = a.beta1 * m[k] + (1.0 - a.beta1) * g[k];
        v[k] = a.beta2 * v[k] + (1.0 - a.beta2) * g[k] * g[k];
        w[k] -= a.lr * (m[k] * c1) / (std::sqrt(v[k] * c2) + a.eps);
      }
    }
    if (!fits_binary32(params)) {
      meta.steps = step - 1;
      throw DivergenceError("training diverged: weights left the binary32 range at step " +
                                std::to_string(step),
                            ParamSet(cfg.model, before).to_checkpoint(meta), step);
    }
  }
  meta.steps = cfg.steps;
  result.checkpoint = params.to_checkpoint(meta);
  result.final_heldout_loss = mean_loss(ParamSet(result.checkpoint), heldout);
  return result;
}

std::pair<TrainResult, TrainResult> make_paired_checkpoints(const TrainConfig& cfg) {
  TrainConfig ar = cfg;
  ar.model.mode = GenerationMode::AR;
  TrainConfig diff = cfg;
  diff.model.mode = GenerationMode::Diffusion;
  return {train(ar), train(diff)};
}

void write_train_log_csv(const std::vector<TrainLogEntry>& curve, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write training log " + path);
  os << "step,loss\n";
  char buf[64];
  for (const auto& e : curve) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f\n", e.step, e.loss);
    os << buf;
  }
}

}  // namespace ptqlab
