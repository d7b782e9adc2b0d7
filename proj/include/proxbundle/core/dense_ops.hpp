#pragma once

#include "proxbundle/core/matrix.hpp"

#include <cmath>
#include <concepts>
#include <numbers>

namespace proxbundle {

/// Row-wise softmax with max subtraction. Every output row is a probability vector.
template <typename Derived>
MatrixX<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out(a.rows(), a.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    const Scalar shift = a.row(i).maxCoeff();
    out.row(i) = (a.row(i).array() - shift).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

/// Largest eigenvalue of AᵀA (the squared spectral norm) by power iteration from the
/// normalized all-ones vector. Stops once the Rayleigh quotient changes by at most `tol`
/// relative, or after `iters` sweeps. A zero matrix yields 0.
template <typename Derived>
typename Derived::Scalar spectral_norm_sq(const Eigen::MatrixBase<Derived>& a,
                                          std::size_t iters = 10000,
                                          typename Derived::Scalar tol = 1e-14) {
  using Scalar = typename Derived::Scalar;
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  if (a.size() == 0 || a.cwiseAbs().maxCoeff() == Scalar(0)) return Scalar(0);
  const MatrixX<Scalar> gram = a.transpose() * a;
  Vec v = Vec::Ones(gram.cols()) / std::sqrt(static_cast<Scalar>(gram.cols()));
  Scalar estimate = 0;
  for (std::size_t it = 0; it < iters; ++it) {
    Vec w = gram * v;
    const Scalar norm = w.norm();
    if (norm == Scalar(0)) {
      // Start vector in the null space; fall back to the first basis vector.
      v.setZero();
      v(it % v.size()) = 1;
      continue;
    }
    const Scalar next = v.dot(w);
    v = w / norm;
    if (it > 0 && std::abs(next - estimate) <= tol * std::abs(next)) {
      estimate = next;
      break;
    }
    estimate = next;
  }
  // Final Rayleigh quotient on the converged direction.
  return std::max(estimate, v.dot(gram * v));
}

template <std::floating_point Scalar>
Scalar gelu(Scalar x) {
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x / std::numbers::sqrt2_v<Scalar>));
}

/// d/dx of the exact (erf) GELU.
template <std::floating_point Scalar>
Scalar gelu_derivative(Scalar x) {
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x / std::numbers::sqrt2_v<Scalar>));
  const Scalar pdf = std::exp(Scalar(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<Scalar> /
                     std::numbers::sqrt2_v<Scalar>;
  return cdf + x * pdf;
}

template <typename Derived>
MatrixX<typename Derived::Scalar> gelu(const Eigen::MatrixBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  return a.unaryExpr([](Scalar x) { return gelu(x); });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes each row to zero mean and unit variance (biased), then applies the
/// per-feature affine map `scale`, `shift` (both 1×cols).
template <typename Derived, typename S, typename B>
MatrixX<typename Derived::Scalar> layer_norm_rows(const Eigen::MatrixBase<Derived>& a,
                                                  const Eigen::MatrixBase<S>& scale,
                                                  const Eigen::MatrixBase<B>& shift,
                                                  typename Derived::Scalar eps = kLayerNormEps) {
  using Scalar = typename Derived::Scalar;
  if (scale.rows() != 1 || scale.cols() != a.cols() || shift.rows() != 1 ||
      shift.cols() != a.cols()) {
    throw DimensionError("layer_norm_rows: affine parameters must be 1x" +
                         std::to_string(a.cols()));
  }
  MatrixX<Scalar> out(a.rows(), a.cols());
  const Scalar n = static_cast<Scalar>(a.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    const Scalar mean = a.row(i).sum() / n;
    const auto centered = (a.row(i).array() - mean).matrix().eval();
    const Scalar var = centered.squaredNorm() / n;
    const Scalar inv = Scalar(1) / std::sqrt(var + eps);
    out.row(i) = (centered.array() * inv * scale.array() + shift.array()).matrix();
  }
  return out;
}

}  // namespace proxbundle
