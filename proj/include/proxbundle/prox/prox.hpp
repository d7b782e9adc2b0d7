#pragma once

// Proximal-gradient self-expression on batches of class tokens.
//
// Given a feature matrix Z (d×m, one column per sample) the module minimizes
//
//     F(W) = ½‖Z − ZW‖²_F + λ‖W‖₁   over nonnegative m×m matrices W
//
// by unrolled forward-backward steps
//
//     W_{k+1} = max(0, W_k − γ_k ∇f(W_k) R_k − γ_k λ),   ∇f(W) = Zᵀ(ZW − Z),
//
// where R_k = I for the fixed variant and a trained m×m matrix for the learnable one.
// The refined representation handed downstream is Ẑ = Z·W_{k_max}.

#include "proxbundle/core/dense_ops.hpp"
#include "proxbundle/core/matrix.hpp"
#include "proxbundle/core/tape.hpp"

#include <optional>
#include <vector>

namespace proxbundle::prox {

inline constexpr double kDefaultLambda = 0.1;
inline constexpr double kLearnableGammaInit = 0.1;
inline constexpr double kGammaMin = 1e-6;
inline constexpr double kGammaMax = 10.0;

struct ProxSchedule {
  double lambda = kDefaultLambda;
  std::vector<double> gammas;                       // one per iteration
  std::optional<std::vector<Matrix>> preconditioners;  // absent for the fixed variant
  bool zero_diagonal = false;

  std::size_t k_max() const { return gammas.size(); }
  bool learnable() const { return preconditioners.has_value(); }

  /// Throws UsageError/DimensionError if the schedule cannot drive an m×m unroll.
  void validate(Index m) const;

  /// Fixed variant with every γ_k = default_step(z).
  static ProxSchedule fixed(const Matrix& z, std::size_t k_max, double lambda = kDefaultLambda,
                            bool zero_diagonal = false);
  /// Learnable variant at its initial point: γ_k = 0.1, R_k = I.
  static ProxSchedule learnable_init(Index m, std::size_t k_max, double lambda = kDefaultLambda,
                                     bool zero_diagonal = false);
};

struct SelfRepresentation {
  Matrix z_hat;    // Z · w_final
  Matrix w_final;  // m×m, nonnegative
  std::vector<double> objective_trace;  // F(W_0) … F(W_{k_max})
};

// -- elementwise kernels ------------------------------------------------------------------

/// Soft-threshold followed by ReLU: max(0, u − t) elementwise. Requires t ≥ 0.
template <typename Derived>
MatrixX<typename Derived::Scalar> shrink_relu(const Eigen::MatrixBase<Derived>& u,
                                              typename Derived::Scalar threshold) {
  using Scalar = typename Derived::Scalar;
  if (!(threshold >= Scalar(0))) throw UsageError("shrink_relu: threshold must be >= 0");
  return (u.array() - threshold).cwiseMax(Scalar(0)).matrix();
}

/// Zᵀ(ZW − Z), the gradient of ½‖Z − ZW‖²_F with respect to W.
template <typename DZ, typename DW>
MatrixX<typename DZ::Scalar> reconstruction_gradient(const Eigen::MatrixBase<DZ>& z,
                                                     const Eigen::MatrixBase<DW>& w) {
  using Scalar = typename DZ::Scalar;
  if (w.rows() != z.cols() || w.cols() != z.cols()) {
    throw DimensionError("reconstruction_gradient: Z is " + shape_of(z) + ", W is " +
                         shape_of(w) + " (expected " + shape_of(z.cols(), z.cols()) + ")");
  }
  const MatrixX<Scalar> residual = z * w - z;
  const MatrixX<Scalar> zt = z.transpose();
  return zt * residual;
}

/// ½‖Z − ZW‖²_F + λ‖W‖₁.
template <typename DZ, typename DW>
typename DZ::Scalar objective(const Eigen::MatrixBase<DZ>& z, const Eigen::MatrixBase<DW>& w,
                              typename DZ::Scalar lambda) {
  require_product(z, w, "objective");
  using Scalar = typename DZ::Scalar;
  const MatrixX<Scalar> residual = z - z * w;
  return Scalar(0.5) * residual.squaredNorm() + lambda * w.cwiseAbs().sum();
}

template <typename Derived>
void zero_diagonal_in_place(Eigen::MatrixBase<Derived>& w) {
  w.diagonal().setZero();
}

/// One step with the identity preconditioner.
template <typename DZ, typename DW>
MatrixX<typename DZ::Scalar> prox_step_fixed(const Eigen::MatrixBase<DZ>& z,
                                             const Eigen::MatrixBase<DW>& w,
                                             typename DZ::Scalar gamma,
                                             typename DZ::Scalar lambda,
                                             bool zero_diagonal = false) {
  using Scalar = typename DZ::Scalar;
  if (!(gamma > Scalar(0))) throw UsageError("prox_step_fixed: gamma must be > 0");
  const MatrixX<Scalar> grad = reconstruction_gradient(z, w);
  const MatrixX<Scalar> direction = gamma * grad;
  const MatrixX<Scalar> u = w - direction;
  MatrixX<Scalar> next = shrink_relu(u, gamma * lambda);
  if (zero_diagonal) zero_diagonal_in_place(next);
  return next;
}

/// One step with the gradient right-multiplied by the preconditioner `r` (m×m).
template <typename DZ, typename DW, typename DR>
MatrixX<typename DZ::Scalar> prox_step_learnable(const Eigen::MatrixBase<DZ>& z,
                                                 const Eigen::MatrixBase<DW>& w,
                                                 typename DZ::Scalar gamma,
                                                 typename DZ::Scalar lambda,
                                                 const Eigen::MatrixBase<DR>& r,
                                                 bool zero_diagonal = false) {
  using Scalar = typename DZ::Scalar;
  if (!(gamma > Scalar(0))) throw UsageError("prox_step_learnable: gamma must be > 0");
  if (r.rows() != z.cols() || r.cols() != z.cols()) {
    throw DimensionError("prox_step_learnable: R is " + shape_of(r) + ", expected " +
                         shape_of(z.cols(), z.cols()));
  }
  const MatrixX<Scalar> grad = reconstruction_gradient(z, w);
  const MatrixX<Scalar> preconditioned = grad * r;
  const MatrixX<Scalar> direction = gamma * preconditioned;
  const MatrixX<Scalar> u = w - direction;
  MatrixX<Scalar> next = shrink_relu(u, gamma * lambda);
  if (zero_diagonal) zero_diagonal_in_place(next);
  return next;
}

/// 1/σ_max(Z)², the classical ISTA step. Throws UsageError for a zero matrix.
double default_step(const Matrix& z);

/// Runs k_max steps from w0 and records F(W_k) at every iterate.
SelfRepresentation unroll(const Matrix& z, const ProxSchedule& schedule, const Matrix& w0);
/// Same, starting from W_0 = 0.
SelfRepresentation unroll(const Matrix& z, const ProxSchedule& schedule);

/// Resizes a trained preconditioner to an m×m batch: the leading block when m is smaller,
/// identity padding when m is larger.
Matrix conform_preconditioner(const Matrix& r, Index m);

// -- differentiable counterparts ----------------------------------------------------------

/// Step sizes and preconditioners as tape variables. `gammas` are 1×1.
struct DiffSchedule {
  double lambda = kDefaultLambda;
  std::vector<ad::Var> gammas;
  std::vector<ad::Var> preconditioners;  // empty for the fixed variant
  bool zero_diagonal = false;
};

struct DiffSelfRepresentation {
  ad::Var z_hat;
  ad::Var w_final;
  std::vector<double> objective_trace;
};

/// Recorded max(0, u − t); `threshold` is 1×1. Subgradient 0 at the kink.
ad::Var shrink_relu(const ad::Var& u, const ad::Var& threshold);
ad::Var zero_diagonal(const ad::Var& w);
ad::Var conform_preconditioner(const ad::Var& r, Index m);

ad::Var reconstruction_gradient(const ad::Var& z, const ad::Var& w);

/// Recorded step; `r` may be an unbound Var for the identity preconditioner.
ad::Var prox_step(const ad::Var& z, const ad::Var& w, const ad::Var& gamma, double lambda,
                  const ad::Var& r, bool zero_diagonal);

/// Recorded unroll. Produces values bitwise equal to the plain unroll for the same inputs.
DiffSelfRepresentation unroll(const ad::Var& z, const DiffSchedule& schedule, const ad::Var& w0);

}  // namespace proxbundle::prox
