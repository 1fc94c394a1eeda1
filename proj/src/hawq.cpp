#include "ptqlab/hawq.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "ptqlab/numerics.hpp"

namespace ptqlab {

std::string to_string(Granularity g) {
  return g == Granularity::PerBlock ? "per_block" : "per_module";
}

Granularity parse_granularity(std::string_view text) {
  if (text == "per_block") return Granularity::PerBlock;
  if (text == "per_module") return Granularity::PerModule;
  throw ParameterError("unknown granularity '" + std::string(text) + "'");
}

std::string to_string(RankingMode m) { return m == RankingMode::Raw ? "raw" : "normalized"; }

RankingMode parse_ranking_mode(std::string_view text) {
  if (text == "raw") return RankingMode::Raw;
  if (text == "normalized") return RankingMode::Normalized;
  throw ParameterError("unknown ranking mode '" + std::string(text) + "'");
}

void SensitivityConfig::validate() const {
  if (!(rho > 0.0 && rho <= 1.0)) throw ParameterError("rho must be in (0, 1]");
  if (n_power_iters < 1) throw ParameterError("n_power_iters must be >= 1");
  if (!(eps_scale > 0.0)) throw ParameterError("eps must be > 0");
  if (n_batches < 1 || batch_size < 1) throw ParameterError("need at least one calibration batch");
}

nlohmann::json SensitivityConfig::to_json() const {
  return {{"rho", rho},
          {"n_power_iters", n_power_iters},
          {"eps_scale", eps_scale},
          {"n_batches", n_batches},
          {"batch_size", batch_size},
          {"granularity", to_string(granularity)},
          {"seed", seed},
          {"include_embeddings", include_embeddings}};
}

SensitivityConfig SensitivityConfig::from_json(const nlohmann::json& j) {
  SensitivityConfig c;
  try {
    c.rho = j.value("rho", c.rho);
    c.n_power_iters = j.value("n_power_iters", c.n_power_iters);
    c.eps_scale = j.value("eps_scale", c.eps_scale);
    c.n_batches = j.value("n_batches", c.n_batches);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.granularity = parse_granularity(j.value("granularity", std::string("per_module")));
    c.seed = j.value("seed", c.seed);
    c.include_embeddings = j.value("include_embeddings", c.include_embeddings);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed sensitivity config: ") + e.what());
  }
  c.validate();
  return c;
}

ModelProbe::ModelProbe(const ModelCheckpoint& ckpt, std::vector<Batch> batches,
                       Granularity granularity, bool include_embeddings, double loss_scale)
    : params_(ckpt), batches_(std::move(batches)), loss_scale_(loss_scale) {
  if (batches_.empty()) throw ContractError("sensitivity needs calibration batches");
  for (const auto& b : batches_) b.validate(ckpt.config);
  const auto paths = quantizable_module_paths(ckpt.config, include_embeddings);
  if (granularity == Granularity::PerModule) {
    for (const auto& p : paths) {
      modules_.push_back(p);
      members_.push_back({p});
    }
    return;
  }
  for (const auto& p : paths) {
    std::string block = p;
    if (p.rfind("layers.", 0) == 0) block = p.substr(0, p.find('.', 7));
    if (modules_.empty() || modules_.back() != block) {
      modules_.push_back(block);
      members_.emplace_back();
    }
    members_.back().push_back(p);
  }
}

std::size_t ModelProbe::lookup(const std::string& path) const {
  const auto it = std::find(modules_.begin(), modules_.end(), path);
  if (it == modules_.end()) throw ParameterError("no sensitivity module named '" + path + "'");
  return static_cast<std::size_t>(it - modules_.begin());
}

const std::vector<std::string>& ModelProbe::members(const std::string& path) const {
  return members_[lookup(path)];
}

std::size_t ModelProbe::size(const std::string& path) const {
  std::size_t n = 0;
  for (const auto& m : members(path)) n += params_.at(m).numel();
  return n;
}

std::vector<double> ModelProbe::get(const std::string& path) const {
  std::vector<double> out;
  for (const auto& m : members(path)) {
    const auto& t = params_.at(m).storage();
    out.insert(out.end(), t.begin(), t.end());
  }
  return out;
}

void ModelProbe::set(const std::string& path, std::span<const double> values) {
  if (values.size() != size(path)) throw DimensionError("parameter size mismatch for " + path);
  std::size_t off = 0;
  for (const auto& m : members(path)) {
    auto& t = params_.at(m).storage();
    std::copy(values.begin() + static_cast<std::ptrdiff_t>(off),
              values.begin() + static_cast<std::ptrdiff_t>(off + t.size()), t.begin());
    off += t.size();
  }
}

std::vector<double> ModelProbe::gradient(const std::string& path) {
  const auto& mem = members(path);
  std::vector<double> g(size(path), 0.0);
  for (const auto& b : batches_) {
    const LossAndGrads lg = loss_and_grads(params_, b);
    std::size_t off = 0;
    for (const auto& m : mem) {
      const auto& gm = lg.grads[params_.index_of(m)].storage();
      for (std::size_t i = 0; i < gm.size(); ++i) g[off + i] += gm[i];
      off += gm.size();
    }
  }
  const double scale = loss_scale_ / static_cast<double>(batches_.size());
  for (auto& x : g) x *= scale;
  return g;
}

double hvp_step(std::span<const double> weights, double eps_scale) {
  double m = 0.0;
  for (const double w : weights) m = std::max(m, std::abs(w));
  return eps_scale * (1.0 + m);
}

std::vector<double> hvp_finite_diff(CurvatureProbe& probe, const std::string& path,
                                    std::span<const double> v, double eps,
                                    const std::vector<double>* base_grad) {
  if (!(eps > 0.0)) throw ParameterError("finite-difference step must be > 0");
  const std::vector<double> saved = probe.get(path);
  if (v.size() != saved.size()) {
    throw DimensionError("direction has " + std::to_string(v.size()) + " entries but '" + path +
                         "' has " + std::to_string(saved.size()));
  }
  std::vector<double> g0;
  if (base_grad == nullptr) {
    g0 = probe.gradient(path);
    base_grad = &g0;
  }
  std::vector<double> shifted(saved.size());
  for (std::size_t i = 0; i < saved.size(); ++i) shifted[i] = saved[i] + eps * v[i];
  probe.set(path, shifted);
  std::vector<double> gp;
  try {
    gp = probe.gradient(path);
  } catch (...) {
    probe.set(path, saved);
    throw;
  }
  probe.set(path, saved);
  std::vector<double> hv(saved.size());
  for (std::size_t i = 0; i < hv.size(); ++i) {
    hv[i] = (gp[i] - (*base_grad)[i]) / eps;
    if (!std::isfinite(hv[i])) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.6g", eps);
      throw NumericError("non-finite Hessian-vector product for '" + path + "' (eps=" + buf + ")");
    }
  }
  return hv;
}

SensitivityRecord power_iteration_sensitivity(CurvatureProbe& probe, const std::string& path,
                                              const SensitivityConfig& cfg, Rng& rng) {
  cfg.validate();
  SensitivityRecord rec;
  rec.path = path;
  const std::vector<double> w = probe.get(path);
  rec.n_params = w.size();
  if (rec.n_params == 0) throw ContractError("module '" + path + "' has no parameters");
  rec.eps = hvp_step(w, cfg.eps_scale);

  Tensor64 v0 = sample_sparse_direction(rng, rec.n_params, cfg.rho);
  std::vector<double> v = std::move(v0.storage());
  std::vector<std::size_t> support;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] != 0.0) support.push_back(i);
  }
  const std::vector<double> g0 = probe.gradient(path);

  double lambda = 0.0;
  for (std::size_t it = 0; it < cfg.n_power_iters; ++it) {
    const std::vector<double> hv = hvp_finite_diff(probe, path, v, rec.eps, &g0);
    double sq = 0.0;
    for (const std::size_t i : support) sq += hv[i] * hv[i];
    const double prev = lambda;
    lambda = std::sqrt(sq);
    rec.lambda_trace.push_back(lambda);
    rec.iters_used = it + 1;
    if (lambda == 0.0) {
      rec.converged = true;
      break;
    }
    rec.converged = it > 0 && std::abs(lambda - prev) / lambda < 1e-2;
    for (const std::size_t i : support) v[i] = hv[i] / lambda;
  }
  rec.lambda = lambda;
  rec.sensitivity_raw = lambda;
  rec.sensitivity_normalized = lambda / static_cast<double>(rec.n_params);
  return rec;
}

std::vector<SensitivityRecord> compute_sensitivities(CurvatureProbe& probe,
                                                     const SensitivityConfig& cfg) {
  cfg.validate();
  const Rng root(cfg.seed);
  std::vector<SensitivityRecord> out;
  const auto mods = probe.modules();
  for (std::size_t i = 0; i < mods.size(); ++i) {
    Rng rng = root.fork(i + 1);
    out.push_back(power_iteration_sensitivity(probe, mods[i], cfg, rng));
  }
  return out;
}

std::vector<SensitivityRecord> compute_model_sensitivities(const ModelCheckpoint& ckpt,
                                                           const std::vector<Batch>& batches,
                                                           const SensitivityConfig& cfg) {
  ModelProbe probe(ckpt, batches, cfg.granularity, cfg.include_embeddings);
  return compute_sensitivities(probe, cfg);
}

std::vector<std::string> rank_sensitivities(const std::vector<SensitivityRecord>& records,
                                            RankingMode mode) {
  if (records.empty()) throw ContractError("no sensitivity records to rank");
  std::vector<const SensitivityRecord*> order;
  for (const auto& r : records) order.push_back(&r);
  const auto key = [mode](const SensitivityRecord* r) {
    return mode == RankingMode::Raw ? r->sensitivity_raw : r->sensitivity_normalized;
  };
  std::sort(order.begin(), order.end(), [&](const SensitivityRecord* a, const SensitivityRecord* b) {
    if (key(a) != key(b)) return key(a) > key(b);
    return a->path < b->path;
  });
  std::vector<std::string> out;
  for (const auto* r : order) out.push_back(r->path);
  return out;
}

std::vector<std::string> expand_ranking(const std::vector<std::string>& ranking,
                                        const ModelConfig& config, bool include_embeddings) {
  const auto paths = quantizable_module_paths(config, include_embeddings);
  std::vector<std::string> out;
  for (const auto& name : ranking) {
    bool matched = false;
    for (const auto& p : paths) {
      if (p == name || p.rfind(name + ".", 0) == 0) {
        out.push_back(p);
        matched = true;
      }
    }
    if (!matched) throw ParameterError("ranking names unknown module '" + name + "'");
  }
  return out;
}

nlohmann::json sensitivity_report_json(const std::vector<SensitivityRecord>& records,
                                       const SensitivityConfig& cfg) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : records) {
    arr.push_back({{"path", r.path},
                   {"lambda", r.lambda},
                   {"n_params", r.n_params},
                   {"sensitivity_raw", r.sensitivity_raw},
                   {"sensitivity_normalized", r.sensitivity_normalized},
                   {"iters_used", r.iters_used},
                   {"converged", r.converged},
                   {"eps", r.eps},
                   {"lambda_trace", r.lambda_trace}});
  }
  return {{"version", 1}, {"config", cfg.to_json()}, {"records", arr}};
}

std::vector<SensitivityRecord> sensitivity_records_from_json(const nlohmann::json& j) {
  std::vector<SensitivityRecord> out;
  try {
    const auto& arr = j.is_array() ? j : j.at("records");
    for (const auto& e : arr) {
      SensitivityRecord r;
      r.path = e.at("path").get<std::string>();
      r.lambda = e.at("lambda").get<double>();
      r.n_params = e.at("n_params").get<std::size_t>();
      r.sensitivity_raw = e.value("sensitivity_raw", r.lambda);
      r.sensitivity_normalized =
          e.value("sensitivity_normalized", r.lambda / static_cast<double>(r.n_params));
      r.iters_used = e.value("iters_used", std::size_t{0});
      r.converged = e.value("converged", false);
      r.eps = e.value("eps", 0.0);
      r.lambda_trace = e.value("lambda_trace", std::vector<double>{});
      if (r.lambda < 0.0 || r.n_params < 1) {
        throw FormatError("invalid sensitivity record for '" + r.path + "'");
      }
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed sensitivity report: ") + e.what());
  }
  return out;
}

std::string sensitivity_csv(const std::vector<SensitivityRecord>& records) {
  std::string out = "path,lambda,n_params,sensitivity_raw,sensitivity_normalized,iters_used,converged\n";
  char buf[512];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%s,%.9g,%zu,%.9g,%.9g,%zu,%d\n", r.path.c_str(), r.lambda,
                  r.n_params, r.sensitivity_raw, r.sensitivity_normalized, r.iters_used,
                  r.converged ? 1 : 0);
    out += buf;
  }
  return out;
}

}  // namespace ptqlab
