#include <cmath>

#include "doctest.h"
#include "ptqlab/checkpoint_io.hpp"
#include "ptqlab/hawq.hpp"
#include "ptqlab/numerics.hpp"
#include "ptqlab/tasks.hpp"
#include "support/oracles.hpp"

using namespace ptqlab;

namespace {

SensitivityConfig dense_config(std::size_t iters) {
  SensitivityConfig c;
  c.rho = 1.0;
  c.n_power_iters = iters;
  return c;
}

std::vector<Batch> task_batches(GenerationMode mode, std::size_t n, std::uint64_t seed) {
  TaskMix mix;
  mix.text = 0;
  CorpusSampler sampler(mix, "");
  Rng data(seed), mask(seed + 1);
  std::vector<Batch> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(sample_batch(sampler, 4, mode, data, mask));
  return out;
}

ModelConfig small_model(GenerationMode mode) {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_seq_len = 16;
  c.mode = mode;
  return c;
}

SensitivityRecord record(std::string path, double lambda, std::size_t n) {
  SensitivityRecord r;
  r.path = std::move(path);
  r.lambda = r.sensitivity_raw = lambda;
  r.n_params = n;
  r.sensitivity_normalized = lambda / static_cast<double>(n);
  return r;
}

}  // namespace

TEST_CASE("finite-difference HVP on quadratics") {
  oracle::QuadraticProbe probe;
  probe.add("a", Tensor64::matrix(2, 2, {3, 0, 0, 1}), {0.5, -0.2});
  const std::vector<double> v = {1.0, 0.0};
  const auto hv = hvp_finite_diff(probe, "a", v, 1e-3);
  CHECK(std::abs(hv[0] - 3.0) <= 3e-6);
  CHECK(std::abs(hv[1]) <= 3e-6);

  const std::vector<double> u = {0.6, -0.8};
  const std::vector<double> mu = {-0.6, 0.8};
  const auto hu = hvp_finite_diff(probe, "a", u, 1e-3);
  const auto hmu = hvp_finite_diff(probe, "a", mu, 1e-3);
  for (std::size_t i = 0; i < 2; ++i) CHECK(std::abs(hu[i] + hmu[i]) <= 1e-4);
  const auto half = hvp_finite_diff(probe, "a", u, 5e-4);
  for (std::size_t i = 0; i < 2; ++i) CHECK(std::abs(hu[i] - half[i]) <= 1e-9);

  // Dense oracle on a random block.
  Rng rng(2);
  const Tensor64 a = oracle::random_spd(rng, 12);
  std::vector<double> w(12), z(12);
  for (auto& x : w) x = rng.normal();
  for (auto& x : z) x = rng.normal();
  const double nz = l2_norm(z);
  for (auto& x : z) x /= nz;
  probe.add("b", a, w);
  const auto hz = hvp_finite_diff(probe, "b", z, 1e-3);
  for (std::size_t i = 0; i < 12; ++i) {
    double ref = 0;
    for (std::size_t j = 0; j < 12; ++j) ref += a.at(i, j) * z[j];
    CHECK(std::abs(hz[i] - ref) <= 1e-6 * std::max(1.0, std::abs(ref)));
  }
  CHECK(probe.get("b") == w);

  CHECK_THROWS_AS(hvp_finite_diff(probe, "a", v, 0.0), ParameterError);
  CHECK_THROWS_AS(hvp_finite_diff(probe, "a", std::vector<double>{1.0}, 1e-3), DimensionError);
}

TEST_CASE("power iteration recovers the top eigenvalue") {
  Rng rng(3);
  oracle::QuadraticProbe probe;
  probe.add("m", oracle::symmetric_with_spectrum(rng, {5.0, 1.0, 0.1}), {0.1, 0.2, 0.3});
  Rng r1(1);
  const auto rec = power_iteration_sensitivity(probe, "m", dense_config(100), r1);
  CHECK(std::abs(rec.lambda - 5.0) <= 0.05);
  CHECK(rec.converged);
  CHECK(rec.iters_used == 100);
  CHECK(rec.sensitivity_normalized == doctest::Approx(rec.lambda / 3));

  Rng r2(1);
  const auto five = power_iteration_sensitivity(probe, "m", dense_config(5), r2);
  REQUIRE(five.lambda_trace.size() == 5);
  for (std::size_t i = 1; i < 5; ++i) CHECK(five.lambda_trace[i] >= five.lambda_trace[i - 1] - 1e-6);
  CHECK(five.lambda >= five.lambda_trace.front());
  CHECK(five.lambda <= 5.0 * 1.01);

  // Larger probe against the Jacobi oracle.
  const Tensor64 big = oracle::random_spd(rng, 30, 0.0);
  const auto ev = oracle::symmetric_eigenvalues(big);
  probe.add("big", big, std::vector<double>(30, 0.0));
  Rng r3(4);
  const auto rb = power_iteration_sensitivity(probe, "big", dense_config(300), r3);
  CHECK(std::abs(rb.lambda - ev.back()) <= 0.01 * ev.back());
}

TEST_CASE("sparse support bounds the estimate") {
  Rng rng(5);
  const Tensor64 a = oracle::random_spd(rng, 40, 0.0);
  oracle::QuadraticProbe probe;
  probe.add("m", a, std::vector<double>(40, 0.0));
  SensitivityConfig cfg;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng r(seed), replay(seed);
    const Tensor64 v = sample_sparse_direction(replay, 40, cfg.rho);
    std::vector<std::size_t> support;
    for (std::size_t i = 0; i < 40; ++i)
      if (v[i] != 0.0) support.push_back(i);
    const auto rec = power_iteration_sensitivity(probe, "m", cfg, r);
    CHECK(rec.lambda <= oracle::restricted_top_eigenvalue(a, support) * (1 + 1e-6));
  }
}

TEST_CASE("flat loss gives zero sensitivity") {
  const ModelCheckpoint zero = zero_checkpoint(small_model(GenerationMode::AR));
  ModelProbe probe(zero, task_batches(GenerationMode::AR, 1, 3));
  SensitivityConfig cfg;
  cfg.n_power_iters = 3;
  for (const auto& r : compute_sensitivities(probe, cfg)) {
    CHECK(r.lambda <= 1e-9);
    CHECK(r.converged);
  }
}

TEST_CASE("ranking") {
  const std::vector<SensitivityRecord> three = {record("a", 5, 1), record("b", 1, 1), record("c", 3, 1)};
  CHECK(rank_sensitivities(three) == std::vector<std::string>{"a", "c", "b"});
  const std::vector<SensitivityRecord> two = {record("x", 4, 10), record("y", 4, 2)};
  CHECK(rank_sensitivities(two, RankingMode::Normalized) == std::vector<std::string>{"y", "x"});
  const std::vector<SensitivityRecord> ties = {record("q", 1, 1), record("b", 1, 1), record("k", 1, 1)};
  CHECK(rank_sensitivities(ties) == std::vector<std::string>{"b", "k", "q"});
  CHECK_THROWS_AS(rank_sensitivities({}), ContractError);

  ModelConfig c = small_model(GenerationMode::AR);
  const auto expanded = expand_ranking({"layers.1", "layers.0"}, c, false);
  REQUIRE(expanded.size() == 12);
  CHECK(expanded.front() == "layers.1.attn.q");
  CHECK(expanded[6] == "layers.0.attn.q");
  const std::vector<std::string> modules = {"head", "layers.0.ffn.in"};
  CHECK(expand_ranking(modules, c, true) == modules);
}

TEST_CASE("model probe restores weights and scales covariantly") {
  for (const auto mode : {GenerationMode::AR, GenerationMode::Diffusion}) {
    CAPTURE(to_string(mode));
    const ModelCheckpoint ckpt = init_checkpoint(small_model(mode), 6);
    const auto batches = task_batches(mode, 2, 7);
    const auto before = serialize_checkpoint({ckpt, {}, {}});
    SensitivityConfig cfg;
    cfg.n_power_iters = 3;
    ModelProbe probe(ckpt, batches);
    const auto probe_before = serialize_checkpoint({probe.params().to_checkpoint(ckpt.meta), {}, {}});
    const auto recs = compute_sensitivities(probe, cfg);
    CHECK(serialize_checkpoint({ckpt, {}, {}}) == before);
    CHECK(serialize_checkpoint({probe.params().to_checkpoint(ckpt.meta), {}, {}}) == probe_before);
    CHECK(recs.size() == quantizable_module_paths(ckpt.config, false).size());
    for (const auto& r : recs) {
      CHECK(r.lambda >= 0);
      CHECK(r.eps > 0);
    }

    ModelProbe scaled(ckpt, batches, Granularity::PerModule, false, 3.0);
    const auto srecs = compute_sensitivities(scaled, cfg);
    for (std::size_t i = 0; i < recs.size(); ++i)
      CHECK(srecs[i].lambda == doctest::Approx(3.0 * recs[i].lambda).epsilon(1e-6));
    CHECK(rank_sensitivities(srecs) == rank_sensitivities(recs));
    CHECK(compute_sensitivities(probe, cfg)[0].lambda == recs[0].lambda);

    ModelProbe blocks(ckpt, batches, Granularity::PerBlock);
    CHECK(blocks.modules() == std::vector<std::string>{"layers.0", "layers.1"});
    CHECK(blocks.members("layers.0").size() == 6);
  }
}

TEST_CASE("scale covariance on quadratic probes") {
  Rng rng(8);
  oracle::QuadraticProbe p1, p2;
  for (int m = 0; m < 6; ++m) {
    const Tensor64 a = oracle::random_spd(rng, 10, 0.1 * m);
    p1.add("m" + std::to_string(m), a, std::vector<double>(10, 0.3));
    p2.add("m" + std::to_string(m), a, std::vector<double>(10, 0.3));
  }
  p2.scale = 7.0;
  const auto r1 = compute_sensitivities(p1, SensitivityConfig{});
  const auto r2 = compute_sensitivities(p2, SensitivityConfig{});
  for (std::size_t i = 0; i < r1.size(); ++i)
    CHECK(r2[i].lambda == doctest::Approx(7.0 * r1[i].lambda).epsilon(1e-9));
  CHECK(rank_sensitivities(r1) == rank_sensitivities(r2));
}

TEST_CASE("sensitivity report round trip and config validation") {
  std::vector<SensitivityRecord> recs = {record("layers.0.attn.q", 2.5, 4096)};
  recs[0].lambda_trace = {1.0, 2.5};
  recs[0].iters_used = 2;
  const auto j = sensitivity_report_json(recs, SensitivityConfig{});
  const auto back = sensitivity_records_from_json(j);
  REQUIRE(back.size() == 1);
  CHECK(back[0].lambda == 2.5);
  CHECK(back[0].lambda_trace == recs[0].lambda_trace);
  CHECK(sensitivity_csv(recs).rfind("path,", 0) == 0);

  SensitivityConfig bad;
  bad.rho = 0;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
  bad = SensitivityConfig{};
  bad.n_power_iters = 0;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
  bad = SensitivityConfig{};
  bad.eps_scale = -1;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
}
