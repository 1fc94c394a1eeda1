#include "ptqlab/model.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>

#include "ptqlab/rng.hpp"

namespace ptqlab {

std::string to_string(GenerationMode mode) {
  return mode == GenerationMode::AR ? "ar" : "diffusion";
}

GenerationMode parse_generation_mode(std::string_view text) {
  if (text == "ar" || text == "AR") return GenerationMode::AR;
  if (text == "diffusion" || text == "Diffusion") return GenerationMode::Diffusion;
  throw ParameterError("unknown generation mode '" + std::string(text) + "'");
}

void ModelConfig::validate() const {
  if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 ||
      max_seq_len < 1) {
    throw ParameterError("model dimensions must all be positive");
  }
  if (d_model % n_heads != 0) {
    throw ParameterError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                         std::to_string(n_heads));
  }
  if (vocab_size <= static_cast<std::size_t>(tokens::kMask)) {
    throw ParameterError("vocab_size must cover bytes and special tokens");
  }
}

const Tensor& ModelCheckpoint::param(const std::string& path) const {
  auto it = params.find(path);
  if (it == params.end()) throw ContractError("checkpoint has no parameter '" + path + "'");
  return it->second;
}

Tensor& ModelCheckpoint::param(const std::string& path) {
  auto it = params.find(path);
  if (it == params.end()) throw ContractError("checkpoint has no parameter '" + path + "'");
  return it->second;
}

namespace {

constexpr std::size_t kPerLayer = 10;
constexpr double kLnEps = 1e-5;

// Offsets inside a layer's slice of the canonical order.
enum LayerSlot : std::size_t {
  kLn1Gain = 0,
  kLn1Bias,
  kAttnQ,
  kAttnK,
  kAttnV,
  kAttnO,
  kLn2Gain,
  kLn2Bias,
  kFfnIn,
  kFfnOut,
};

constexpr const char* kLayerSuffix[kPerLayer] = {
    "ln1.gain", "ln1.bias", "attn.q",   "attn.k",   "attn.v",
    "attn.o",   "ln2.gain", "ln2.bias", "ffn.in",   "ffn.out",
};

std::size_t layer_index(std::size_t layer, LayerSlot slot) { return 2 + layer * kPerLayer + slot; }

struct FinalIndex {
  std::size_t gain, bias, head;
};

FinalIndex final_index(const ModelConfig& c) {
  const std::size_t base = 2 + c.n_layers * kPerLayer;
  return {base, base + 1, base + 2};
}

std::string layer_path(std::size_t layer, LayerSlot slot) {
  return "layers." + std::to_string(layer) + "." + kLayerSuffix[slot];
}

std::atomic<std::uint64_t> g_forward_calls{0};

}  // namespace

std::vector<std::string> parameter_names(const ModelConfig& config) {
  std::vector<std::string> names = {"tok_emb", "pos_emb"};
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    for (std::size_t s = 0; s < kPerLayer; ++s) names.push_back(layer_path(l, LayerSlot(s)));
  }
  names.insert(names.end(), {"ln_f.gain", "ln_f.bias", "head"});
  return names;
}

Shape parameter_shape(const ModelConfig& c, std::string_view name) {
  if (name == "tok_emb") return {c.vocab_size, c.d_model};
  if (name == "pos_emb") return {c.max_seq_len, c.d_model};
  if (name == "head") return {c.vocab_size, c.d_model};
  if (name == "ln_f.gain" || name == "ln_f.bias") return {c.d_model};
  const auto dot = name.rfind('.');
  const auto prev = name.rfind('.', dot - 1);
  const std::string_view suffix = name.substr(prev + 1);
  if (suffix == "ln1.gain" || suffix == "ln1.bias" || suffix == "ln2.gain" ||
      suffix == "ln2.bias") {
    return {c.d_model};
  }
  if (suffix == "attn.q" || suffix == "attn.k" || suffix == "attn.v" || suffix == "attn.o") {
    return {c.d_model, c.d_model};
  }
  if (suffix == "ffn.in") return {c.d_ff, c.d_model};
  if (suffix == "ffn.out") return {c.d_model, c.d_ff};
  throw ContractError("unknown parameter name '" + std::string(name) + "'");
}

std::vector<std::string> linear_module_paths(const ModelConfig& config) {
  std::vector<std::string> paths;
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    for (LayerSlot s : {kAttnQ, kAttnK, kAttnV, kAttnO, kFfnIn, kFfnOut}) {
      paths.push_back(layer_path(l, s));
    }
  }
  paths.emplace_back("head");
  return paths;
}

std::vector<std::string> quantizable_module_paths(const ModelConfig& config,
                                                  bool include_embeddings) {
  std::vector<std::string> paths;
  if (include_embeddings) paths.emplace_back("tok_emb");
  for (auto& p : linear_module_paths(config)) {
    if (p == "head" && !include_embeddings) continue;
    paths.push_back(std::move(p));
  }
  return paths;
}

ModelCheckpoint init_checkpoint(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelCheckpoint ckpt;
  ckpt.config = config;
  ckpt.meta.seed = seed;
  Rng rng(seed);
  for (const auto& name : parameter_names(config)) {
    Tensor t(parameter_shape(config, name));
    const bool is_gain = name.ends_with(".gain");
    const bool is_bias = name.ends_with(".bias");
    for (float& v : t.storage()) {
      if (is_gain) {
        v = 1.0f;
      } else if (!is_bias) {
        v = static_cast<float>(0.02 * rng.normal());
      }
    }
    ckpt.params.emplace(name, std::move(t));
  }
  return ckpt;
}

ModelCheckpoint zero_checkpoint(const ModelConfig& config) {
  config.validate();
  ModelCheckpoint ckpt;
  ckpt.config = config;
  for (const auto& name : parameter_names(config)) {
    ckpt.params.emplace(name, Tensor(parameter_shape(config, name)));
  }
  return ckpt;
}

void Batch::validate(const ModelConfig& config) const {
  const std::size_t n = batch * seq;
  if (batch == 0 || seq == 0) throw ContractError("batch must be non-empty");
  if (token_ids.size() != n || targets.size() != n || loss_mask.size() != n) {
    throw DimensionError("batch arrays do not match batch x seq = " + std::to_string(n));
  }
  if (seq > config.max_seq_len) {
    throw DimensionError("sequence length " + std::to_string(seq) + " exceeds max_seq_len " +
                         std::to_string(config.max_seq_len));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (token_ids[i] < 0 || static_cast<std::size_t>(token_ids[i]) >= config.vocab_size) {
      throw ContractError("token id out of vocabulary at flat index " + std::to_string(i));
    }
    if (loss_mask[i] && (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= config.vocab_size)) {
      throw ContractError("target id out of vocabulary at flat index " + std::to_string(i));
    }
  }
  if (loss_positions() == 0) throw ContractError("loss mask selects no positions");
}

std::size_t Batch::loss_positions() const {
  return static_cast<std::size_t>(std::count_if(loss_mask.begin(), loss_mask.end(),
                                                [](std::uint8_t m) { return m != 0; }));
}

ParamSet::ParamSet(const ModelCheckpoint& ckpt)
    : config_(ckpt.config), names_(parameter_names(ckpt.config)) {
  config_.validate();
  tensors_.reserve(names_.size());
  for (const auto& name : names_) {
    const Tensor& t = ckpt.param(name);
    if (t.shape() != parameter_shape(config_, name)) {
      throw DimensionError("parameter '" + name + "' has shape " + shape_to_string(t.shape()));
    }
    tensors_.push_back(t.cast<double>());
  }
}

ParamSet::ParamSet(ModelConfig config, std::vector<Tensor64> tensors)
    : config_(config), names_(parameter_names(config)), tensors_(std::move(tensors)) {
  if (tensors_.size() != names_.size()) throw DimensionError("parameter count mismatch");
}

std::size_t ParamSet::index_of(std::string_view path) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == path) return i;
  }
  throw ContractError("unknown parameter '" + std::string(path) + "'");
}

ModelCheckpoint ParamSet::to_checkpoint(const TrainingMeta& meta) const {
  ModelCheckpoint ckpt;
  ckpt.config = config_;
  ckpt.meta = meta;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    ckpt.params.emplace(names_[i], tensors_[i].cast<float>());
  }
  return ckpt;
}

std::size_t ParamSet::total_parameters() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.numel();
  return n;
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

namespace {

using Buffer = std::vector<double>;

// y[n x dout] = x[n x din] · wᵀ, with w stored [dout x din].
void linear_forward(const Buffer& x, std::size_t n, std::size_t din, const Tensor64& w,
                    Buffer& y) {
  const std::size_t dout = w.rows();
  // Transposed copy; the inner loop is a contiguous axpy.
  Buffer wt(din * dout);
  for (std::size_t o = 0; o < dout; ++o) {
    for (std::size_t k = 0; k < din; ++k) wt[k * dout + o] = w.at(o, k);
  }
  y.assign(n * dout, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double* yi = y.data() + i * dout;
    const double* xi = x.data() + i * din;
    for (std::size_t k = 0; k < din; ++k) {
      const double a = xi[k];
      const double* wk = wt.data() + k * dout;
      for (std::size_t o = 0; o < dout; ++o) yi[o] += a * wk[o];
    }
  }
}

// dx[n x din] += dy[n x dout] · w
void linear_backward_input(const Buffer& dy, std::size_t n, const Tensor64& w, Buffer& dx) {
  const std::size_t dout = w.rows();
  const std::size_t din = w.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double* dxi = dx.data() + i * din;
    const double* dyi = dy.data() + i * dout;
    for (std::size_t o = 0; o < dout; ++o) {
      const double g = dyi[o];
      if (g == 0.0) continue;
      const double* wo = w.data() + o * din;
      for (std::size_t k = 0; k < din; ++k) dxi[k] += g * wo[k];
    }
  }
}

// dw[dout x din] += dyᵀ · x
void linear_backward_weight(const Buffer& dy, std::size_t n, const Buffer& x, Tensor64& dw) {
  const std::size_t dout = dw.rows();
  const std::size_t din = dw.cols();
  for (std::size_t i = 0; i < n; ++i) {
    const double* dyi = dy.data() + i * dout;
    const double* xi = x.data() + i * din;
    for (std::size_t o = 0; o < dout; ++o) {
      const double g = dyi[o];
      if (g == 0.0) continue;
      double* dwo = dw.data() + o * din;
      for (std::size_t k = 0; k < din; ++k) dwo[k] += g * xi[k];
    }
  }
}

struct LayerNormCache {
  Buffer xhat;
  Buffer rstd;
};

void layer_norm_forward(const Buffer& x, std::size_t n, std::size_t d, const Tensor64& gain,
                        const Tensor64& bias, Buffer& y, LayerNormCache* cache) {
  y.resize(n * d);
  if (cache) {
    cache->xhat.resize(n * d);
    cache->rstd.resize(n);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x.data() + i * d;
    double mean = 0.0;
    for (std::size_t k = 0; k < d; ++k) mean += xi[k];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t k = 0; k < d; ++k) var += (xi[k] - mean) * (xi[k] - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    double* yi = y.data() + i * d;
    for (std::size_t k = 0; k < d; ++k) {
      const double xh = (xi[k] - mean) * rstd;
      if (cache) cache->xhat[i * d + k] = xh;
      yi[k] = xh * gain[k] + bias[k];
    }
    if (cache) cache->rstd[i] = rstd;
  }
}

// Accumulates into dx, dgain and dbias.
void layer_norm_backward(const Buffer& dy, std::size_t n, std::size_t d, const Tensor64& gain,
                         const LayerNormCache& cache, Buffer& dx, Tensor64& dgain,
                         Tensor64& dbias) {
  Buffer dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    const double* dyi = dy.data() + i * d;
    const double* xh = cache.xhat.data() + i * d;
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      dgain[k] += dyi[k] * xh[k];
      dbias[k] += dyi[k];
      dxhat[k] = dyi[k] * gain[k];
      mean_dxhat += dxhat[k];
      mean_dxhat_xhat += dxhat[k] * xh[k];
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    const double rstd = cache.rstd[i];
    double* dxi = dx.data() + i * d;
    for (std::size_t k = 0; k < d; ++k) {
      dxi[k] += rstd * (dxhat[k] - mean_dxhat - xh[k] * mean_dxhat_xhat);
    }
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu(double u) {
  return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + kGeluA * u * u * u)));
}

double gelu_grad(double u) {
  const double t = std::tanh(kGeluC * (u + kGeluA * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * u * u);
}

struct LayerCache {
  LayerNormCache ln1, ln2;
  Buffer h1, q, k, v, probs, ctx, h2, u, g;
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  LayerNormCache ln_f;
  Buffer hf;
};

struct Dims {
  std::size_t batch, seq, n, d, heads, dh, dff, vocab;
  bool causal;
};

// Multi-head attention over q/k/v [n x d]; probs is [batch x heads x seq x seq].
void attention_forward(const Dims& dm, const Buffer& q, const Buffer& k, const Buffer& v,
                       Buffer& probs, Buffer& ctx) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(dm.dh));
  probs.assign(dm.batch * dm.heads * dm.seq * dm.seq, 0.0);
  ctx.assign(dm.n * dm.d, 0.0);
  Buffer scores(dm.seq);
  for (std::size_t b = 0; b < dm.batch; ++b) {
    for (std::size_t h = 0; h < dm.heads; ++h) {
      const std::size_t off = h * dm.dh;
      for (std::size_t i = 0; i < dm.seq; ++i) {
        const std::size_t jmax = dm.causal ? i + 1 : dm.seq;
        const double* qi = q.data() + (b * dm.seq + i) * dm.d + off;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < jmax; ++j) {
          const double* kj = k.data() + (b * dm.seq + j) * dm.d + off;
          double s = 0.0;
          for (std::size_t t = 0; t < dm.dh; ++t) s += qi[t] * kj[t];
          scores[j] = s * scale;
          mx = std::max(mx, scores[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < jmax; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          z += scores[j];
        }
        double* p = probs.data() + ((b * dm.heads + h) * dm.seq + i) * dm.seq;
        double* ci = ctx.data() + (b * dm.seq + i) * dm.d + off;
        for (std::size_t j = 0; j < jmax; ++j) {
          p[j] = scores[j] / z;
          const double* vj = v.data() + (b * dm.seq + j) * dm.d + off;
          for (std::size_t t = 0; t < dm.dh; ++t) ci[t] += p[j] * vj[t];
        }
      }
    }
  }
}

void attention_backward(const Dims& dm, const Buffer& q, const Buffer& k, const Buffer& v,
                        const Buffer& probs, const Buffer& dctx, Buffer& dq, Buffer& dk,
                        Buffer& dv) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(dm.dh));
  dq.assign(dm.n * dm.d, 0.0);
  dk.assign(dm.n * dm.d, 0.0);
  dv.assign(dm.n * dm.d, 0.0);
  Buffer dp(dm.seq);
  for (std::size_t b = 0; b < dm.batch; ++b) {
    for (std::size_t h = 0; h < dm.heads; ++h) {
      const std::size_t off = h * dm.dh;
      for (std::size_t i = 0; i < dm.seq; ++i) {
        const std::size_t jmax = dm.causal ? i + 1 : dm.seq;
        const double* p = probs.data() + ((b * dm.heads + h) * dm.seq + i) * dm.seq;
        const double* dci = dctx.data() + (b * dm.seq + i) * dm.d + off;
        double weighted = 0.0;
        for (std::size_t j = 0; j < jmax; ++j) {
          const double* vj = v.data() + (b * dm.seq + j) * dm.d + off;
          double* dvj = dv.data() + (b * dm.seq + j) * dm.d + off;
          double s = 0.0;
          for (std::size_t t = 0; t < dm.dh; ++t) {
            s += dci[t] * vj[t];
            dvj[t] += p[j] * dci[t];
          }
          dp[j] = s;
          weighted += p[j] * s;
        }
        const double* qi = q.data() + (b * dm.seq + i) * dm.d + off;
        double* dqi = dq.data() + (b * dm.seq + i) * dm.d + off;
        for (std::size_t j = 0; j < jmax; ++j) {
          const double ds = p[j] * (dp[j] - weighted) * scale;
          if (ds == 0.0) continue;
          const double* kj = k.data() + (b * dm.seq + j) * dm.d + off;
          double* dkj = dk.data() + (b * dm.seq + j) * dm.d + off;
          for (std::size_t t = 0; t < dm.dh; ++t) {
            dqi[t] += ds * kj[t];
            dkj[t] += ds * qi[t];
          }
        }
      }
    }
  }
}

Dims make_dims(const ModelConfig& c, std::size_t batch, std::size_t seq) {
  return {batch, seq, batch * seq, c.d_model, c.n_heads, c.head_dim(), c.d_ff, c.vocab_size,
          c.causal()};
}

// Runs the transformer trunk and returns the final normalized hidden states
// (hf) in `cache.hf`. Layer caches are filled only when `keep` is set.
void trunk_forward(const ParamSet& p, std::span<const int> tokens, const Dims& dm,
                   ForwardCache& cache, bool keep, const LinearInputHook* hook) {
  const ModelConfig& c = p.config();
  if (dm.seq > c.max_seq_len) {
    throw DimensionError("sequence length " + std::to_string(dm.seq) + " exceeds max_seq_len " +
                         std::to_string(c.max_seq_len));
  }
  if (tokens.size() != dm.n) throw DimensionError("token grid does not match batch x seq");
  g_forward_calls.fetch_add(1, std::memory_order_relaxed);

  const Tensor64& tok = p[0];
  const Tensor64& pos = p[1];
  Buffer x(dm.n * dm.d);
  for (std::size_t r = 0; r < dm.n; ++r) {
    const int id = tokens[r];
    if (id < 0 || static_cast<std::size_t>(id) >= dm.vocab) {
      throw ContractError("token id " + std::to_string(id) + " outside vocabulary");
    }
    const std::size_t t = r % dm.seq;
    for (std::size_t k = 0; k < dm.d; ++k) x[r * dm.d + k] = tok.at(id, k) + pos.at(t, k);
  }

  cache.layers.resize(keep ? c.n_layers : 1);
  Buffer tmp;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    LayerCache& lc = cache.layers[keep ? l : 0];
    auto P = [&](LayerSlot s) -> const Tensor64& { return p[layer_index(l, s)]; };
    auto emit = [&](LayerSlot s, const Buffer& rows, std::size_t din) {
      if (hook && *hook) (*hook)(layer_path(l, s), rows, din);
    };

    layer_norm_forward(x, dm.n, dm.d, P(kLn1Gain), P(kLn1Bias), lc.h1, keep ? &lc.ln1 : nullptr);
    emit(kAttnQ, lc.h1, dm.d);
    emit(kAttnK, lc.h1, dm.d);
    emit(kAttnV, lc.h1, dm.d);
    linear_forward(lc.h1, dm.n, dm.d, P(kAttnQ), lc.q);
    linear_forward(lc.h1, dm.n, dm.d, P(kAttnK), lc.k);
    linear_forward(lc.h1, dm.n, dm.d, P(kAttnV), lc.v);
    attention_forward(dm, lc.q, lc.k, lc.v, lc.probs, lc.ctx);
    emit(kAttnO, lc.ctx, dm.d);
    linear_forward(lc.ctx, dm.n, dm.d, P(kAttnO), tmp);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += tmp[i];

    layer_norm_forward(x, dm.n, dm.d, P(kLn2Gain), P(kLn2Bias), lc.h2, keep ? &lc.ln2 : nullptr);
    emit(kFfnIn, lc.h2, dm.d);
    linear_forward(lc.h2, dm.n, dm.d, P(kFfnIn), lc.u);
    lc.g.resize(lc.u.size());
    for (std::size_t i = 0; i < lc.u.size(); ++i) lc.g[i] = gelu(lc.u[i]);
    emit(kFfnOut, lc.g, dm.dff);
    linear_forward(lc.g, dm.n, dm.dff, P(kFfnOut), tmp);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += tmp[i];
  }
  const FinalIndex fi = final_index(c);
  layer_norm_forward(x, dm.n, dm.d, p[fi.gain], p[fi.bias], cache.hf, keep ? &cache.ln_f : nullptr);
  if (hook && *hook) (*hook)("head", cache.hf, dm.d);
}

}  // namespace

Tensor64 forward_logits(const ParamSet& params, std::span<const int> token_ids, std::size_t batch,
                        std::size_t seq, const ForwardOptions& options) {
  const Dims dm = make_dims(params.config(), batch, seq);
  ForwardCache cache;
  trunk_forward(params, token_ids, dm, cache, false, options.hook);
  const Tensor64& head = params[final_index(params.config()).head];
  if (options.last_position_only) {
    Buffer last(batch * dm.d);
    for (std::size_t b = 0; b < batch; ++b) {
      std::copy_n(cache.hf.data() + ((b + 1) * seq - 1) * dm.d, dm.d, last.data() + b * dm.d);
    }
    Buffer logits;
    linear_forward(last, batch, dm.d, head, logits);
    return Tensor64({batch, dm.vocab}, std::move(logits));
  }
  Buffer logits;
  linear_forward(cache.hf, dm.n, dm.d, head, logits);
  return Tensor64({batch, seq, dm.vocab}, std::move(logits));
}

Tensor forward(const ModelCheckpoint& ckpt, const Batch& batch) {
  if (batch.seq > ckpt.config.max_seq_len) {
    throw DimensionError("sequence length " + std::to_string(batch.seq) +
                         " exceeds max_seq_len " + std::to_string(ckpt.config.max_seq_len));
  }
  const ParamSet params(ckpt);
  const Tensor64 logits = forward_logits(params, batch.token_ids, batch.batch, batch.seq);
  Tensor out = logits.cast<float>();
  require_finite(out, "logits");
  return out;
}

namespace {

// Cross-entropy over masked rows. Fills dlogits (scaled by 1/count) when given.
double cross_entropy(const Buffer& logits, const Batch& batch, std::size_t vocab,
                     Buffer* dlogits) {
  const std::size_t count = batch.loss_positions();
  if (count == 0) throw ContractError("loss mask selects no positions");
  const double inv = 1.0 / static_cast<double>(count);
  if (dlogits) dlogits->assign(logits.size(), 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < batch.batch * batch.seq; ++r) {
    if (!batch.loss_mask[r]) continue;
    const double* lr = logits.data() + r * vocab;
    const double mx = *std::max_element(lr, lr + vocab);
    double z = 0.0;
    for (std::size_t o = 0; o < vocab; ++o) z += std::exp(lr[o] - mx);
    const double logz = mx + std::log(z);
    const auto target = static_cast<std::size_t>(batch.targets[r]);
    total += logz - lr[target];
    if (dlogits) {
      double* dr = dlogits->data() + r * vocab;
      for (std::size_t o = 0; o < vocab; ++o) dr[o] = std::exp(lr[o] - logz) * inv;
      dr[target] -= inv;
    }
  }
  const double loss = total * inv;
  if (!std::isfinite(loss)) throw NumericError("loss is not finite");
  return loss;
}

}  // namespace

double loss_only(const ParamSet& params, const Batch& batch) {
  batch.validate(params.config());
  const Dims dm = make_dims(params.config(), batch.batch, batch.seq);
  ForwardCache cache;
  trunk_forward(params, batch.token_ids, dm, cache, false, nullptr);
  Buffer logits;
  linear_forward(cache.hf, dm.n, dm.d, params[final_index(params.config()).head], logits);
  return cross_entropy(logits, batch, dm.vocab, nullptr);
}

LossAndGrads loss_and_grads(const ParamSet& p, const Batch& batch) {
  const ModelConfig& c = p.config();
  batch.validate(c);
  const Dims dm = make_dims(c, batch.batch, batch.seq);
  ForwardCache cache;
  trunk_forward(p, batch.token_ids, dm, cache, true, nullptr);
  const FinalIndex fi = final_index(c);

  LossAndGrads out;
  out.grads.reserve(p.size());
  for (const auto& t : p.tensors()) out.grads.emplace_back(t.shape());
  auto& G = out.grads;

  Buffer logits;
  linear_forward(cache.hf, dm.n, dm.d, p[fi.head], logits);
  Buffer dlogits;
  out.loss = cross_entropy(logits, batch, dm.vocab, &dlogits);

  linear_backward_weight(dlogits, dm.n, cache.hf, G[fi.head]);
  Buffer dhf(dm.n * dm.d, 0.0);
  linear_backward_input(dlogits, dm.n, p[fi.head], dhf);
  Buffer dx(dm.n * dm.d, 0.0);
  layer_norm_backward(dhf, dm.n, dm.d, p[fi.gain], cache.ln_f, dx, G[fi.gain], G[fi.bias]);

  Buffer dtmp, dctx, dq, dk, dv, dh;
  for (std::size_t li = c.n_layers; li-- > 0;) {
    const LayerCache& lc = cache.layers[li];
    auto P = [&](LayerSlot s) -> const Tensor64& { return p[layer_index(li, s)]; };
    auto D = [&](LayerSlot s) -> Tensor64& { return G[layer_index(li, s)]; };

    // Feed-forward branch: dx is the gradient w.r.t. the block output.
    linear_backward_weight(dx, dm.n, lc.g, D(kFfnOut));
    dtmp.assign(dm.n * dm.dff, 0.0);
    linear_backward_input(dx, dm.n, P(kFfnOut), dtmp);
    for (std::size_t i = 0; i < dtmp.size(); ++i) dtmp[i] *= gelu_grad(lc.u[i]);
    linear_backward_weight(dtmp, dm.n, lc.h2, D(kFfnIn));
    dh.assign(dm.n * dm.d, 0.0);
    linear_backward_input(dtmp, dm.n, P(kFfnIn), dh);
    layer_norm_backward(dh, dm.n, dm.d, P(kLn2Gain), lc.ln2, dx, D(kLn2Gain), D(kLn2Bias));

    // Attention branch.
    linear_backward_weight(dx, dm.n, lc.ctx, D(kAttnO));
    dctx.assign(dm.n * dm.d, 0.0);
    linear_backward_input(dx, dm.n, P(kAttnO), dctx);
    attention_backward(dm, lc.q, lc.k, lc.v, lc.probs, dctx, dq, dk, dv);
    linear_backward_weight(dq, dm.n, lc.h1, D(kAttnQ));
    linear_backward_weight(dk, dm.n, lc.h1, D(kAttnK));
    linear_backward_weight(dv, dm.n, lc.h1, D(kAttnV));
    dh.assign(dm.n * dm.d, 0.0);
    linear_backward_input(dq, dm.n, P(kAttnQ), dh);
    linear_backward_input(dk, dm.n, P(kAttnK), dh);
    linear_backward_input(dv, dm.n, P(kAttnV), dh);
    layer_norm_backward(dh, dm.n, dm.d, P(kLn1Gain), lc.ln1, dx, D(kLn1Gain), D(kLn1Bias));
  }

  for (std::size_t r = 0; r < dm.n; ++r) {
    const auto id = static_cast<std::size_t>(batch.token_ids[r]);
    const std::size_t t = r % dm.seq;
    for (std::size_t k = 0; k < dm.d; ++k) {
      G[0].at(id, k) += dx[r * dm.d + k];
      G[1].at(t, k) += dx[r * dm.d + k];
    }
  }
  for (std::size_t i = 0; i < G.size(); ++i) {
    if (!G[i].all_finite()) throw NumericError("gradient of '" + p.name(i) + "' is not finite");
  }
  return out;
}

CheckpointLossAndGrads loss_and_grads(const ModelCheckpoint& ckpt, const Batch& batch) {
  const ParamSet params(ckpt);
  LossAndGrads lg = loss_and_grads(params, batch);
  CheckpointLossAndGrads out;
  out.loss = lg.loss;
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.grads.emplace(params.name(i), std::move(lg.grads[i]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace {

std::size_t common_length(const std::vector<std::vector<int>>& prompts) {
  if (prompts.empty()) throw ContractError("no prompts given");
  const std::size_t len = prompts.front().size();
  for (const auto& p : prompts) {
    if (p.size() != len) throw ContractError("batched prompts must share one length");
  }
  return len;
}

std::size_t argmax_row(const double* row, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

}  // namespace

std::vector<std::vector<int>> generate_ar_batch(const ParamSet& params,
                                                const std::vector<std::vector<int>>& prompts,
                                                std::size_t max_new) {
  if (params.config().mode != GenerationMode::AR) {
    throw ContractError("generate_ar requires an AR checkpoint");
  }
  const std::size_t len = common_length(prompts);
  if (len == 0) throw ContractError("AR generation needs a non-empty prompt");
  if (len + max_new > params.config().max_seq_len + 1 && max_new > 0) {
    throw ParameterError("prompt plus continuation exceeds max_seq_len");
  }
  std::vector<std::vector<int>> out = prompts;
  const std::size_t b = prompts.size();
  const std::size_t vocab = params.config().vocab_size;
  for (std::size_t step = 0; step < max_new; ++step) {
    const std::size_t seq = out.front().size();
    std::vector<int> grid;
    grid.reserve(b * seq);
    for (const auto& row : out) grid.insert(grid.end(), row.begin(), row.end());
    const Tensor64 logits = forward_logits(params, grid, b, seq, {.last_position_only = true});
    for (std::size_t r = 0; r < b; ++r) {
      // Restrict the choice to content tokens; specials are never emitted.
      const std::size_t next = argmax_row(logits.data() + r * vocab, tokens::kMask);
      out[r].push_back(static_cast<int>(next));
    }
  }
  return out;
}

std::vector<int> generate_ar(const ModelCheckpoint& ckpt, const std::vector<int>& prompt,
                             std::size_t max_new) {
  if (ckpt.config.mode != GenerationMode::AR) {
    throw ContractError("generate_ar requires an AR checkpoint");
  }
  const ParamSet params(ckpt);
  return generate_ar_batch(params, {prompt}, max_new).front();
}

std::vector<std::size_t> unmask_schedule(std::size_t target_len, std::size_t steps) {
  if (steps < 1) throw ParameterError("diffusion generation needs at least one step");
  std::vector<std::size_t> commits;
  std::size_t remaining = target_len;
  for (std::size_t s = 0; s < steps && remaining > 0; ++s) {
    const std::size_t left = steps - s;
    const std::size_t k = (remaining + left - 1) / left;
    commits.push_back(k);
    remaining -= k;
  }
  return commits;
}

std::vector<std::vector<int>> generate_diffusion_batch(
    const ParamSet& params, const std::vector<std::vector<int>>& prompts, std::size_t target_len,
    std::size_t steps, std::vector<std::size_t>* remaining_trace) {
  const ModelConfig& c = params.config();
  if (c.mode != GenerationMode::Diffusion) {
    throw ContractError("generate_diffusion requires a diffusion checkpoint");
  }
  if (steps < 1) throw ParameterError("diffusion generation needs at least one step");
  const std::size_t len = common_length(prompts);
  if (len > c.max_seq_len || target_len > c.max_seq_len - len) {
    throw ParameterError("prompt plus target length exceeds max_seq_len");
  }
  const std::size_t b = prompts.size();
  const std::size_t seq = len + target_len;
  std::vector<int> grid(b * seq, tokens::kMask);
  for (std::size_t r = 0; r < b; ++r) std::copy(prompts[r].begin(), prompts[r].end(), grid.begin() + r * seq);
  if (remaining_trace) remaining_trace->clear();

  const std::vector<std::size_t> schedule = unmask_schedule(target_len, steps);
  std::vector<std::pair<double, std::size_t>> candidates;
  std::vector<int> best_token(seq);
  for (const std::size_t k : schedule) {
    const Tensor64 logits = forward_logits(params, grid, b, seq);
    for (std::size_t r = 0; r < b; ++r) {
      candidates.clear();
      for (std::size_t t = len; t < seq; ++t) {
        if (grid[r * seq + t] != tokens::kMask) continue;
        const double* row = logits.data() + (r * seq + t) * c.vocab_size;
        const std::size_t arg = argmax_row(row, tokens::kMask);
        double z = 0.0;
        for (std::size_t o = 0; o < c.vocab_size; ++o) z += std::exp(row[o] - row[arg]);
        candidates.emplace_back(1.0 / z, t);
        best_token[t] = static_cast<int>(arg);
      }
      // Highest confidence first, lower index on ties.
      std::stable_sort(candidates.begin(), candidates.end(),
                       [](const auto& a, const auto& b2) { return a.first > b2.first; });
      for (std::size_t i = 0; i < k && i < candidates.size(); ++i) {
        const std::size_t t = candidates[i].second;
        grid[r * seq + t] = best_token[t];
      }
    }
    if (remaining_trace) {
      remaining_trace->push_back(static_cast<std::size_t>(
          std::count(grid.begin() + static_cast<std::ptrdiff_t>(len),
                      grid.begin() + static_cast<std::ptrdiff_t>(seq), tokens::kMask)));
    }
  }
  std::vector<std::vector<int>> out(b);
  for (std::size_t r = 0; r < b; ++r) {
    out[r].assign(grid.begin() + static_cast<std::ptrdiff_t>(r * seq),
                  grid.begin() + static_cast<std::ptrdiff_t>((r + 1) * seq));
  }
  return out;
}

std::vector<int> generate_diffusion(const ModelCheckpoint& ckpt, const std::vector<int>& prompt,
                                    std::size_t target_len, std::size_t steps) {
  if (ckpt.config.mode != GenerationMode::Diffusion) {
    throw ContractError("generate_diffusion requires a diffusion checkpoint");
  }
  const ParamSet params(ckpt);
  return generate_diffusion_batch(params, {prompt}, target_len, steps).front();
}

std::uint64_t forward_call_count() { return g_forward_calls.load(std::memory_order_relaxed); }

}  // namespace ptqlab
