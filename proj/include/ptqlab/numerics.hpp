#pragma once

#include <cstddef>
#include <functional>
#include <span>

#include "ptqlab/rng.hpp"
#include "ptqlab/tensor.hpp"

namespace ptqlab {

// c = a·b. Every output element is accumulated in binary64 with ascending
// inner index, so results are reproducible bit for bit.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor64 matmul(const Tensor64& a, const Tensor64& b);

Tensor64 transpose(const Tensor64& a);

// Inverse of a symmetric positive definite matrix through its Cholesky factor.
// Throws NotPositiveDefiniteError on a non-positive pivot; callers add damping
// and retry.
Tensor64 cholesky_invert_spd(const Tensor64& h);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> v);

/// Sparse Rademacher probe direction of length `n_params`.
///
/// Exactly ceil(rho * n_params) coordinates are nonzero, chosen uniformly
/// without replacement; each nonzero is +-1 with equal probability before the
/// vector is scaled to unit L2 norm.
Tensor64 sample_sparse_direction(Rng& rng, std::size_t n_params, double rho);

// Number of nonzeros sample_sparse_direction produces for (n_params, rho).
std::size_t sparse_support_size(std::size_t n_params, double rho);

using ScalarFunction = std::function<double(std::span<const double>)>;

// max_i |central_diff_i - analytic_i| / (|analytic_i| + 1e-8).
double finite_diff_grad_check(const ScalarFunction& f, std::span<const double> analytic_grad,
                              std::span<const double> point, double eps);

}  // namespace ptqlab
