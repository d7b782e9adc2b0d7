#pragma once

// Exact discrete optimal transport between two weighted point clouds under Euclidean
// ground cost, solved with the transportation simplex.

#include "proxbundle/core/matrix.hpp"

namespace proxbundle::geometry {

struct TransportPlan {
  Matrix plan;  // P × Q, γ_ij ≥ 0
  double cost = 0.0;
  Index pivots = 0;
};

/// Pairwise Euclidean distances between the columns of x (d × P) and y (d × Q).
Matrix euclidean_cost(const Matrix& x, const Matrix& y);

/// Minimizes Σ γ_ij C_ij subject to row sums `a` and column sums `b`. Weights must be
/// nonnegative with equal totals (relative 1e-12).
TransportPlan solve_transport(const Matrix& cost, const Vector& a, const Vector& b);

/// W₁ between the columns of x and y. Empty weights mean uniform (1/P, 1/Q).
TransportPlan wasserstein1(const Matrix& x, const Matrix& y, const Vector& a = {},
                           const Vector& b = {});

}  // namespace proxbundle::geometry
