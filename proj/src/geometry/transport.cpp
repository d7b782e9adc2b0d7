#include "proxbundle/geometry/transport.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace proxbundle::geometry {

Matrix euclidean_cost(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows()) {
    throw DimensionError("euclidean_cost: point dimensions differ (" + shape_of(x) + " vs " +
                         shape_of(y) + ")");
  }
  Matrix c(x.cols(), y.cols());
  for (Index i = 0; i < x.cols(); ++i)
    for (Index j = 0; j < y.cols(); ++j) c(i, j) = (x.col(i) - y.col(j)).norm();
  return c;
}

namespace {

// Spanning-tree basis over P row nodes and Q column nodes (column j is node P + j).
class TransportSimplex {
 public:
  TransportSimplex(const Matrix& cost, const Vector& a, const Vector& b)
      : c_(cost), p_(cost.rows()), q_(cost.cols()), flow_(Matrix::Zero(p_, q_)),
        basic_(p_, q_) {
    basic_.setConstant(false);
    northwest_corner(a, b);
    tol_ = 1e-11 * std::max(1.0, c_.cwiseAbs().maxCoeff());
  }

  TransportPlan solve() {
    Index degenerate_streak = 0;
    Index pivots = 0;
    for (;;) {
      compute_potentials();
      const bool bland = degenerate_streak > p_ + q_;
      Index ei = -1, ej = -1;
      double best = -tol_;
      for (Index i = 0; i < p_ && !(bland && ei >= 0); ++i) {
        for (Index j = 0; j < q_; ++j) {
          if (basic_(i, j)) continue;
          const double r = c_(i, j) - u_[static_cast<std::size_t>(i)] - v_[static_cast<std::size_t>(j)];
          if (r < best) {
            best = r;
            ei = i;
            ej = j;
            if (bland) break;
          }
        }
      }
      if (ei < 0) break;
      const double theta = pivot(ei, ej);
      degenerate_streak = theta == 0.0 ? degenerate_streak + 1 : 0;
      ++pivots;
    }
    TransportPlan out;
    out.plan = flow_;
    out.cost = (flow_.array() * c_.array()).sum();
    out.pivots = pivots;
    return out;
  }

 private:
  void northwest_corner(const Vector& a, const Vector& b) {
    std::vector<double> supply(a.data(), a.data() + p_), demand(b.data(), b.data() + q_);
    Index i = 0, j = 0;
    while (i < p_ && j < q_) {
      const double x = std::min(supply[static_cast<std::size_t>(i)], demand[static_cast<std::size_t>(j)]);
      flow_(i, j) = x;
      basic_(i, j) = true;
      supply[static_cast<std::size_t>(i)] -= x;
      demand[static_cast<std::size_t>(j)] -= x;
      if (i == p_ - 1) {
        ++j;
      } else if (j == q_ - 1) {
        ++i;
      } else if (supply[static_cast<std::size_t>(i)] <= demand[static_cast<std::size_t>(j)]) {
        ++i;
      } else {
        ++j;
      }
    }
  }

  std::vector<std::vector<Index>> adjacency() const {
    std::vector<std::vector<Index>> adj(static_cast<std::size_t>(p_ + q_));
    for (Index i = 0; i < p_; ++i)
      for (Index j = 0; j < q_; ++j)
        if (basic_(i, j)) {
          adj[static_cast<std::size_t>(i)].push_back(p_ + j);
          adj[static_cast<std::size_t>(p_ + j)].push_back(i);
        }
    return adj;
  }

  void compute_potentials() {
    const auto adj = adjacency();
    std::vector<double> pot(static_cast<std::size_t>(p_ + q_), 0.0);
    std::vector<char> seen(static_cast<std::size_t>(p_ + q_), 0);
    std::vector<Index> stack{0};
    seen[0] = 1;
    while (!stack.empty()) {
      const Index n = stack.back();
      stack.pop_back();
      for (Index m : adj[static_cast<std::size_t>(n)]) {
        if (seen[static_cast<std::size_t>(m)]) continue;
        seen[static_cast<std::size_t>(m)] = 1;
        // u_i + v_j = C_ij
        const double cij = n < p_ ? c_(n, m - p_) : c_(m, n - p_);
        pot[static_cast<std::size_t>(m)] = cij - pot[static_cast<std::size_t>(n)];
        stack.push_back(m);
      }
    }
    u_.assign(pot.begin(), pot.begin() + p_);
    v_.assign(pot.begin() + p_, pot.end());
  }

  // Adds (ei, ej) to the basis, pushes θ around the cycle it closes and drops one cell.
  double pivot(Index ei, Index ej) {
    const auto adj = adjacency();
    std::vector<Index> parent(static_cast<std::size_t>(p_ + q_), -1);
    std::vector<Index> stack{ei};
    parent[static_cast<std::size_t>(ei)] = ei;
    while (!stack.empty()) {
      const Index n = stack.back();
      stack.pop_back();
      for (Index m : adj[static_cast<std::size_t>(n)]) {
        if (parent[static_cast<std::size_t>(m)] >= 0) continue;
        parent[static_cast<std::size_t>(m)] = n;
        stack.push_back(m);
      }
    }
    // Walk from column node ej back to row node ei; cells alternate −, +, −, ...
    std::vector<std::pair<Index, Index>> minus, plus;
    Index node = p_ + ej;
    bool sign_minus = true;
    while (node != ei) {
      const Index up = parent[static_cast<std::size_t>(node)];
      const auto cell = node < p_ ? std::pair{node, up - p_} : std::pair{up, node - p_};
      (sign_minus ? minus : plus).push_back(cell);
      sign_minus = !sign_minus;
      node = up;
    }
    double theta = std::numeric_limits<double>::infinity();
    std::pair<Index, Index> leaving{-1, -1};
    for (const auto& [i, j] : minus) {
      const double f = flow_(i, j);
      if (f < theta || (f == theta && i * q_ + j < leaving.first * q_ + leaving.second)) {
        theta = f;
        leaving = {i, j};
      }
    }
    flow_(ei, ej) = theta;
    basic_(ei, ej) = true;
    for (const auto& [i, j] : plus) flow_(i, j) += theta;
    for (const auto& [i, j] : minus) flow_(i, j) -= theta;
    flow_(leaving.first, leaving.second) = 0.0;
    basic_(leaving.first, leaving.second) = false;
    return theta;
  }

  const Matrix& c_;
  Index p_, q_;
  Matrix flow_;
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> basic_;
  std::vector<double> u_, v_;
  double tol_ = 0.0;
};

void check_weights(const Vector& w, Index n, const char* name) {
  if (w.size() != n) {
    throw DimensionError(std::string("transport: ") + name + " has " + std::to_string(w.size()) +
                         " weights for " + std::to_string(n) + " points");
  }
  for (Index i = 0; i < n; ++i)
    if (!(w(i) >= 0.0) || !std::isfinite(w(i))) {
      throw UsageError(std::string("transport: ") + name + " weights must be finite and nonnegative");
    }
}

}  // namespace

TransportPlan solve_transport(const Matrix& cost, const Vector& a, const Vector& b) {
  if (cost.rows() == 0 || cost.cols() == 0) throw UsageError("transport: empty point set");
  check_weights(a, cost.rows(), "source");
  check_weights(b, cost.cols(), "target");
  const double sa = a.sum(), sb = b.sum();
  if (!(sa > 0.0) || std::abs(sa - sb) > 1e-12 * std::max(sa, sb)) {
    throw UsageError("transport: weight totals differ (" + std::to_string(sa) + " vs " +
                     std::to_string(sb) + ")");
  }
  if (!all_finite(cost)) throw UsageError("transport: non-finite cost");
  return TransportSimplex(cost, a, b).solve();
}

TransportPlan wasserstein1(const Matrix& x, const Matrix& y, const Vector& a, const Vector& b) {
  if (x.cols() == 0 || y.cols() == 0) throw UsageError("wasserstein1: empty point set");
  const Vector wa = a.size() ? a : Vector::Constant(x.cols(), 1.0 / static_cast<double>(x.cols()));
  const Vector wb = b.size() ? b : Vector::Constant(y.cols(), 1.0 / static_cast<double>(y.cols()));
  return solve_transport(euclidean_cost(x, y), wa, wb);
}

}  // namespace proxbundle::geometry
