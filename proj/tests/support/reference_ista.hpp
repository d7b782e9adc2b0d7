#pragma once

// Loop-level reference for one ISTA step and the block-mass statistic. Written with
// explicit index loops so it shares no code path with the library kernels.

#include "proxbundle/core/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace proxbundle::reference {

inline double sgn(double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); }

/// max(0, sgn(u)·max(|u| − t, 0)), evaluated exactly as written.
inline Matrix shrink_relu_literal(const Matrix& u, double t) {
  Matrix out(u.rows(), u.cols());
  for (Index i = 0; i < u.rows(); ++i)
    for (Index j = 0; j < u.cols(); ++j)
      out(i, j) = std::max(0.0, sgn(u(i, j)) * std::max(std::abs(u(i, j)) - t, 0.0));
  return out;
}

/// W − γ·Zᵀ(ZW − Z)·R followed by the shrink; `r == nullptr` means R = I.
inline Matrix ista_step(const Matrix& z, const Matrix& w, double gamma, double lambda,
                        const Matrix* r, bool zero_diagonal) {
  const Index d = z.rows(), m = z.cols();
  Matrix resid(d, m);
  for (Index i = 0; i < d; ++i)
    for (Index j = 0; j < m; ++j) {
      double s = 0;
      for (Index k = 0; k < m; ++k) s += z(i, k) * w(k, j);
      resid(i, j) = s - z(i, j);
    }
  Matrix grad(m, m);
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < m; ++j) {
      double s = 0;
      for (Index k = 0; k < d; ++k) s += z(k, i) * resid(k, j);
      grad(i, j) = s;
    }
  Matrix dir = grad;
  if (r != nullptr) {
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < m; ++j) {
        double s = 0;
        for (Index k = 0; k < m; ++k) s += grad(i, k) * (*r)(k, j);
        dir(i, j) = s;
      }
  }
  Matrix u(m, m);
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < m; ++j) u(i, j) = w(i, j) - gamma * dir(i, j);
  Matrix next = shrink_relu_literal(u, gamma * lambda);
  if (zero_diagonal)
    for (Index i = 0; i < m; ++i) next(i, i) = 0.0;
  return next;
}

/// Fraction of Σ|W_ij| that falls on same-label pairs.
inline double within_block_fraction(const Matrix& w, const std::vector<int>& labels) {
  double within = 0, total = 0;
  for (Index i = 0; i < w.rows(); ++i)
    for (Index j = 0; j < w.cols(); ++j) {
      const double a = std::abs(w(i, j));
      total += a;
      if (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) within += a;
    }
  return total > 0 ? within / total : 0.0;
}

}  // namespace proxbundle::reference
