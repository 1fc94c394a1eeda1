#include "ptqlab/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

namespace ptqlab {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

template <typename T>
void check_matmul_shapes(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError("matmul expects 2-D operands, got " + shape_to_string(a.shape()) +
                         " and " + shape_to_string(b.shape()));
  }
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul inner dimensions differ: " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
}

// Row-at-a-time i-k-j product with a binary64 accumulator row. The t loop is
// outermost per output row, which keeps the ascending summation order for
// each c[i][j].
template <typename T>
BasicTensor<T> matmul_impl(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  check_matmul_shapes(a, b);
  const std::size_t m = a.rows();
  const std::size_t k = a.cols();
  const std::size_t n = b.cols();
  BasicTensor<T> c({m, n});
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t t = 0; t < k; ++t) {
      const double av = a.at(i, t);
      const T* brow = b.data() + t * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<double>(brow[j]);
    }
    for (std::size_t j = 0; j < n; ++j) c.at(i, j) = static_cast<T>(acc[j]);
  }
  return c;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_impl(a, b); }
Tensor64 matmul(const Tensor64& a, const Tensor64& b) { return matmul_impl(a, b); }

Tensor64 transpose(const Tensor64& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects a 2-D tensor");
  Tensor64 t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
  }
  return t;
}

Tensor64 cholesky_invert_spd(const Tensor64& h) {
  if (h.rank() != 2 || h.rows() != h.cols()) {
    throw DimensionError("cholesky_invert_spd expects a square matrix, got " +
                         shape_to_string(h.shape()));
  }
  const std::size_t n = h.rows();
  // Lower factor L with h = L·Lᵀ.
  Tensor64 l({n, n});
  for (std::size_t j = 0; j < n; ++j) {
    double diag = h.at(j, j);
    for (std::size_t t = 0; t < j; ++t) diag -= l.at(j, t) * l.at(j, t);
    // A pivot that cancelled down to rounding noise is treated as singular.
    if (!(diag > 1e-12 * std::abs(h.at(j, j))) || !std::isfinite(diag)) {
      throw NotPositiveDefiniteError("non-positive pivot " + std::to_string(diag) +
                                     " at index " + std::to_string(j));
    }
    const double ljj = std::sqrt(diag);
    l.at(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = h.at(i, j);
      for (std::size_t t = 0; t < j; ++t) s -= l.at(i, t) * l.at(j, t);
      l.at(i, j) = s / ljj;
    }
  }
  // Linv = L⁻¹ by forward substitution, column by column.
  Tensor64 linv({n, n});
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t i = c; i < n; ++i) {
      double s = (i == c) ? 1.0 : 0.0;
      for (std::size_t t = c; t < i; ++t) s -= l.at(i, t) * linv.at(t, c);
      linv.at(i, c) = s / l.at(i, i);
    }
  }
  // h⁻¹ = Linvᵀ·Linv; fill the upper triangle and mirror for exact symmetry.
  Tensor64 inv({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (std::size_t t = j; t < n; ++t) s += linv.at(t, i) * linv.at(t, j);
      inv.at(i, j) = s;
      inv.at(j, i) = s;
    }
  }
  return inv;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

std::size_t sparse_support_size(std::size_t n_params, double rho) {
  if (!(rho > 0.0 && rho <= 1.0)) {
    throw ParameterError("sample ratio rho must lie in (0, 1], got " + std::to_string(rho));
  }
  if (n_params == 0) throw ParameterError("sparse direction needs at least one parameter");
  const auto k = static_cast<std::size_t>(std::ceil(rho * static_cast<double>(n_params)));
  return std::clamp<std::size_t>(k, 1, n_params);
}

Tensor64 sample_sparse_direction(Rng& rng, std::size_t n_params, double rho) {
  const std::size_t k = sparse_support_size(n_params, rho);
  Tensor64 v({n_params});
  const double magnitude = 1.0 / std::sqrt(static_cast<double>(k));
  for (const std::size_t idx : rng.sample_without_replacement(n_params, k)) {
    v[idx] = rng.coin() ? magnitude : -magnitude;
  }
  return v;
}

double finite_diff_grad_check(const ScalarFunction& f, std::span<const double> analytic_grad,
                              std::span<const double> point, double eps) {
  if (analytic_grad.size() != point.size()) {
    throw DimensionError("gradient and point lengths differ");
  }
  if (!(eps > 0.0)) throw ParameterError("finite-difference step must be positive");
  std::vector<double> x(point.begin(), point.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + eps;
    const double fp = f(x);
    x[i] = saved - eps;
    const double fm = f(x);
    x[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("function is not finite near coordinate " + std::to_string(i));
    }
    const double numeric = (fp - fm) / (2.0 * eps);
    const double err = std::abs(numeric - analytic_grad[i]) / (std::abs(analytic_grad[i]) + 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace ptqlab
