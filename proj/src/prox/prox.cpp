#include "proxbundle/prox/prox.hpp"

#include <string>

namespace proxbundle::prox {

void ProxSchedule::validate(Index m) const {
  if (m < 2) throw UsageError("prox: self-expression needs at least 2 samples, got " + std::to_string(m));
  if (!(lambda >= 0.0)) throw UsageError("prox: lambda must be >= 0");
  for (std::size_t k = 0; k < gammas.size(); ++k) {
    if (!(gammas[k] > 0.0)) {
      throw UsageError("prox: gamma[" + std::to_string(k) + "] must be > 0");
    }
  }
  if (preconditioners) {
    if (preconditioners->size() != gammas.size()) {
      throw UsageError("prox: " + std::to_string(preconditioners->size()) +
                       " preconditioners for k_max = " + std::to_string(gammas.size()));
    }
    for (const Matrix& r : *preconditioners) {
      if (r.rows() != m || r.cols() != m) {
        throw DimensionError("prox: preconditioner is " + shape_of(r) + ", expected " +
                             shape_of(m, m));
      }
    }
  }
}

ProxSchedule ProxSchedule::fixed(const Matrix& z, std::size_t k_max, double lambda,
                                 bool zero_diagonal) {
  ProxSchedule s;
  s.lambda = lambda;
  s.gammas.assign(k_max, k_max > 0 ? default_step(z) : 1.0);
  s.zero_diagonal = zero_diagonal;
  return s;
}

ProxSchedule ProxSchedule::learnable_init(Index m, std::size_t k_max, double lambda,
                                          bool zero_diagonal) {
  ProxSchedule s;
  s.lambda = lambda;
  s.gammas.assign(k_max, kLearnableGammaInit);
  s.preconditioners = std::vector<Matrix>(k_max, Matrix::Identity(m, m));
  s.zero_diagonal = zero_diagonal;
  return s;
}

double default_step(const Matrix& z) {
  const double l = spectral_norm_sq(z);
  if (!(l > 0.0)) throw UsageError("default_step: feature matrix is zero");
  return 1.0 / l;
}

SelfRepresentation unroll(const Matrix& z, const ProxSchedule& schedule, const Matrix& w0) {
  const Index m = z.cols();
  schedule.validate(m);
  if (w0.rows() != m || w0.cols() != m) {
    throw DimensionError("unroll: W0 is " + shape_of(w0) + ", expected " + shape_of(m, m));
  }
  SelfRepresentation out;
  out.w_final = w0;
  out.objective_trace.reserve(schedule.k_max() + 1);
  out.objective_trace.push_back(objective(z, out.w_final, schedule.lambda));
  for (std::size_t k = 0; k < schedule.k_max(); ++k) {
    if (schedule.learnable()) {
      out.w_final = prox_step_learnable(z, out.w_final, schedule.gammas[k], schedule.lambda,
                                        (*schedule.preconditioners)[k], schedule.zero_diagonal);
    } else {
      out.w_final = prox_step_fixed(z, out.w_final, schedule.gammas[k], schedule.lambda,
                                    schedule.zero_diagonal);
    }
    out.objective_trace.push_back(objective(z, out.w_final, schedule.lambda));
  }
  out.z_hat = matmul(z, out.w_final);
  return out;
}

SelfRepresentation unroll(const Matrix& z, const ProxSchedule& schedule) {
  return unroll(z, schedule, Matrix::Zero(z.cols(), z.cols()));
}

Matrix conform_preconditioner(const Matrix& r, Index m) {
  if (r.rows() != r.cols()) throw DimensionError("conform_preconditioner: R is " + shape_of(r));
  if (r.rows() == m) return r;
  Matrix out = Matrix::Identity(m, m);
  const Index k = std::min(m, r.rows());
  out.topLeftCorner(k, k) = r.topLeftCorner(k, k);
  return out;
}

// -- recorded versions ----------------------------------------------------------------------

ad::Var shrink_relu(const ad::Var& u, const ad::Var& threshold) {
  const double t = threshold.scalar();
  Matrix value = shrink_relu(u.value(), t);
  const double margin = u.value().size() > 0 ? (u.value().array() - t).abs().minCoeff() : 0.0;
  ad::Var out = ad::custom({u, threshold}, std::move(value),
                    [](const Matrix& adj, std::span<const Matrix> in, const Matrix&) {
                      const double t = in[1](0, 0);
                      const Matrix mask =
                          (in[0].array() - t > 0.0).cast<double>().matrix();
                      const Matrix du = adj.cwiseProduct(mask);
                      return std::vector<Matrix>{du, Matrix::Constant(1, 1, -du.sum())};
                    });
  out.tape()->set_kink_margin(out, margin);
  return out;
}

ad::Var zero_diagonal(const ad::Var& w) {
  Matrix value = w.value();
  zero_diagonal_in_place(value);
  return ad::custom({w}, std::move(value),
                    [](const Matrix& adj, std::span<const Matrix>, const Matrix&) {
                      Matrix g = adj;
                      g.diagonal().setZero();
                      return std::vector<Matrix>{g};
                    });
}

ad::Var conform_preconditioner(const ad::Var& r, Index m) {
  if (r.rows() == m && r.cols() == m) return r;
  return ad::custom({r}, conform_preconditioner(r.value(), m),
                    [m](const Matrix& adj, std::span<const Matrix> in, const Matrix&) {
                      const Index k = std::min(m, in[0].rows());
                      Matrix g = Matrix::Zero(in[0].rows(), in[0].cols());
                      g.topLeftCorner(k, k) = adj.topLeftCorner(k, k);
                      return std::vector<Matrix>{g};
                    });
}

ad::Var reconstruction_gradient(const ad::Var& z, const ad::Var& w) {
  if (w.rows() != z.cols() || w.cols() != z.cols()) {
    throw DimensionError("reconstruction_gradient: Z is " + shape_of(z.value()) + ", W is " +
                         shape_of(w.value()));
  }
  const ad::Var residual = z * w - z;
  return ad::transpose(z) * residual;
}

ad::Var prox_step(const ad::Var& z, const ad::Var& w, const ad::Var& gamma, double lambda,
                  const ad::Var& r, bool zero_diag) {
  if (!(gamma.scalar() > 0.0)) throw UsageError("prox_step: gamma must be > 0");
  ad::Var direction = reconstruction_gradient(z, w);
  if (r.valid()) {
    if (r.rows() != z.cols() || r.cols() != z.cols()) {
      throw DimensionError("prox_step: R is " + shape_of(r.value()) + ", expected " +
                           shape_of(z.cols(), z.cols()));
    }
    direction = direction * r;
  }
  const ad::Var u = w - ad::scale_by(gamma, direction);
  ad::Var next = shrink_relu(u, ad::scale(gamma, lambda));
  if (zero_diag) next = zero_diagonal(next);
  return next;
}

DiffSelfRepresentation unroll(const ad::Var& z, const DiffSchedule& schedule, const ad::Var& w0) {
  const Index m = z.cols();
  if (m < 2) throw UsageError("prox: self-expression needs at least 2 samples, got " + std::to_string(m));
  if (!schedule.preconditioners.empty() &&
      schedule.preconditioners.size() != schedule.gammas.size()) {
    throw UsageError("prox: preconditioner count does not match k_max");
  }
  if (w0.rows() != m || w0.cols() != m) {
    throw DimensionError("unroll: W0 is " + shape_of(w0.value()) + ", expected " + shape_of(m, m));
  }
  DiffSelfRepresentation out;
  ad::Var w = w0;
  out.objective_trace.push_back(objective(z.value(), w.value(), schedule.lambda));
  for (std::size_t k = 0; k < schedule.gammas.size(); ++k) {
    const ad::Var r = schedule.preconditioners.empty() ? ad::Var{} : schedule.preconditioners[k];
    w = prox_step(z, w, schedule.gammas[k], schedule.lambda, r, schedule.zero_diagonal);
    out.objective_trace.push_back(objective(z.value(), w.value(), schedule.lambda));
  }
  out.w_final = w;
  out.z_hat = z * w;
  return out;
}

}  // namespace proxbundle::prox
