#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ptqlab/hawq.hpp"
#include "ptqlab/numerics.hpp"
#include "ptqlab/rng.hpp"
#include "ptqlab/tensor.hpp"

namespace oracle {

using ptqlab::Tensor64;

inline Tensor64 naive_matmul(const Tensor64& a, const Tensor64& b) {
  Tensor64 c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0;
      for (std::size_t t = 0; t < a.cols(); ++t) s += (long double)a.at(i, t) * b.at(t, j);
      c.at(i, j) = (double)s;
    }
  return c;
}

inline Tensor64 random_matrix(ptqlab::Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Tensor64 m({r, c});
  for (auto& v : m.storage()) v = scale * rng.normal();
  return m;
}

// Mᵀ M + shift·I
inline Tensor64 random_spd(ptqlab::Rng& rng, std::size_t n, double shift = 1.0) {
  const Tensor64 m = random_matrix(rng, n, n);
  Tensor64 a = naive_matmul(ptqlab::transpose(m), m);
  for (std::size_t i = 0; i < n; ++i) a.at(i, i) += shift;
  return a;
}

// Cyclic Jacobi eigenvalue iteration for symmetric matrices; ascending.
inline std::vector<double> symmetric_eigenvalues(Tensor64 a) {
  const std::size_t n = a.rows();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a.at(i, j) * a.at(i, j);
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (a.at(p, q) == 0.0) continue;
        const double theta = (a.at(q, q) - a.at(p, p)) / (2 * a.at(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a.at(k, p), akq = a.at(k, q);
          a.at(k, p) = c * akp - s * akq;
          a.at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a.at(p, k), aqk = a.at(q, k);
          a.at(p, k) = c * apk - s * aqk;
          a.at(q, k) = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a.at(i, i);
  std::sort(ev.begin(), ev.end());
  return ev;
}

// Q diag(eigs) Qᵀ with a random orthogonal Q (Gram-Schmidt).
inline Tensor64 symmetric_with_spectrum(ptqlab::Rng& rng, const std::vector<double>& eigs) {
  const std::size_t n = eigs.size();
  Tensor64 q = random_matrix(rng, n, n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < j; ++k) {
      double d = 0;
      for (std::size_t i = 0; i < n; ++i) d += q.at(i, j) * q.at(i, k);
      for (std::size_t i = 0; i < n; ++i) q.at(i, j) -= d * q.at(i, k);
    }
    double nrm = 0;
    for (std::size_t i = 0; i < n; ++i) nrm += q.at(i, j) * q.at(i, j);
    nrm = std::sqrt(nrm);
    for (std::size_t i = 0; i < n; ++i) q.at(i, j) /= nrm;
  }
  Tensor64 a({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < n; ++k) s += q.at(i, k) * eigs[k] * q.at(j, k);
      a.at(i, j) = s;
    }
  return a;
}

inline std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = (i + j) / 2.0;
    i = j + 1;
  }
  return r;
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = ranks(a), rb = ranks(b);
  const double n = (double)a.size();
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// L(w) = c/2 Σ_m w_mᵀ A_m w_m, one dense block per module.
class QuadraticProbe final : public ptqlab::CurvatureProbe {
 public:
  void add(std::string name, Tensor64 a, std::vector<double> w) {
    names_.push_back(name);
    blocks_[name] = {std::move(a), std::move(w)};
  }
  double scale = 1.0;
  std::size_t gradient_calls = 0;

  std::vector<std::string> modules() const override { return names_; }
  std::size_t size(const std::string& p) const override { return blocks_.at(p).w.size(); }
  std::vector<double> get(const std::string& p) const override { return blocks_.at(p).w; }
  void set(const std::string& p, std::span<const double> v) override {
    blocks_.at(p).w.assign(v.begin(), v.end());
  }
  std::vector<double> gradient(const std::string& p) override {
    ++gradient_calls;
    const auto& b = blocks_.at(p);
    std::vector<double> g(b.w.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      double s = 0;
      for (std::size_t j = 0; j < g.size(); ++j) s += b.a.at(i, j) * b.w[j];
      g[i] = scale * s;
    }
    return g;
  }
  const Tensor64& hessian(const std::string& p) const { return blocks_.at(p).a; }

 private:
  struct Block {
    Tensor64 a;
    std::vector<double> w;
  };
  std::vector<std::string> names_;
  std::map<std::string, Block> blocks_;
};

// Top eigenvalue of A restricted to the given index set.
inline double restricted_top_eigenvalue(const Tensor64& a, const std::vector<std::size_t>& idx) {
  Tensor64 s({idx.size(), idx.size()});
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = 0; j < idx.size(); ++j) s.at(i, j) = a.at(idx[i], idx[j]);
  const auto ev = symmetric_eigenvalues(s);
  return std::max(std::abs(ev.front()), std::abs(ev.back()));
}

}  // namespace oracle
