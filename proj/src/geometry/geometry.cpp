#include "proxbundle/geometry/geometry.hpp"

#include "proxbundle/core/parallel.hpp"

#include "json.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace proxbundle::geometry {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

Matrix class_distance_matrix(const LabeledFeatures& lf) {
  lf.validate();
  const int c = lf.num_classes();
  if (c < 2) throw UsageError("class_distance_matrix: need at least 2 classes, got " + std::to_string(c));
  std::vector<Matrix> members;
  for (int k = 0; k < c; ++k) {
    members.push_back(lf.columns_of(k));
    if (members.back().cols() == 0) {
      throw UsageError("class_distance_matrix: class " + std::to_string(k) + " has no samples");
    }
  }
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < c; ++i)
    for (int j = i + 1; j < c; ++j) pairs.emplace_back(i, j);
  Matrix a = Matrix::Zero(c, c);
  parallel_for(pairs.size(), [&](std::size_t k) {
    const auto [i, j] = pairs[k];
    const double w = wasserstein1(members[static_cast<std::size_t>(i)], members[static_cast<std::size_t>(j)]).cost;
    a(i, j) = w;
    a(j, i) = w;
  });
  return a;
}

std::vector<double> intra_class_distances(const LabeledFeatures& lf) {
  lf.validate();
  std::vector<double> out;
  for (int k = 0; k < lf.num_classes(); ++k) {
    const Matrix x = lf.columns_of(k);
    double total = 0.0;
    Index pairs = 0;
    for (Index i = 0; i < x.cols(); ++i)
      for (Index j = i + 1; j < x.cols(); ++j, ++pairs) total += (x.col(i) - x.col(j)).norm();
    out.push_back(pairs ? total / static_cast<double>(pairs) : 0.0);
  }
  return out;
}

double mean_off_diagonal(const Matrix& a) {
  if (a.rows() != a.cols() || a.rows() < 2) throw DimensionError("mean_off_diagonal: " + shape_of(a));
  const double n = static_cast<double>(a.rows());
  return (a.sum() - a.trace()) / (n * (n - 1));
}

SeparabilityReport separability_report(const LabeledFeatures& pre, const LabeledFeatures& post) {
  pre.validate();
  post.validate();
  if (pre.labels != post.labels) throw UsageError("separability_report: pre and post labels differ");
  SeparabilityReport r;
  r.intra_pre = intra_class_distances(pre);
  r.intra_post = intra_class_distances(post);
  const double c = static_cast<double>(r.intra_pre.size());
  for (std::size_t k = 0; k < r.intra_pre.size(); ++k) {
    r.intra_delta.push_back(r.intra_post[k] - r.intra_pre[k]);
    r.mean_intra_pre += r.intra_pre[k] / c;
    r.mean_intra_post += r.intra_post[k] / c;
  }
  r.mean_intra_delta = r.mean_intra_post - r.mean_intra_pre;
  r.distances_pre = class_distance_matrix(pre);
  r.distances_post = class_distance_matrix(post);
  r.inter_pre = mean_off_diagonal(r.distances_pre);
  r.inter_post = mean_off_diagonal(r.distances_post);
  r.inter_delta = r.inter_post - r.inter_pre;
  return r;
}

std::string SeparabilityReport::to_json() const {
  auto rows = [](const Matrix& a) {
    std::vector<std::vector<double>> out(static_cast<std::size_t>(a.rows()));
    for (Index i = 0; i < a.rows(); ++i)
      for (Index j = 0; j < a.cols(); ++j) out[static_cast<std::size_t>(i)].push_back(a(i, j));
    return out;
  };
  nlohmann::ordered_json doc;
  doc["intra_class_pre"] = intra_pre;
  doc["intra_class_post"] = intra_post;
  doc["intra_class_delta"] = intra_delta;
  doc["mean_intra_pre"] = mean_intra_pre;
  doc["mean_intra_post"] = mean_intra_post;
  doc["mean_intra_delta"] = mean_intra_delta;
  doc["mean_inter_pre"] = inter_pre;
  doc["mean_inter_post"] = inter_post;
  doc["mean_inter_delta"] = inter_delta;
  doc["distances_pre"] = rows(distances_pre);
  doc["distances_post"] = rows(distances_post);
  return doc.dump(2) + "\n";
}

std::string matrix_csv(const Matrix& a, const std::vector<std::string>& header) {
  std::ostringstream out;
  for (std::size_t k = 0; k < header.size(); ++k) out << (k ? "," : "") << header[k];
  if (!header.empty()) out << "\n";
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < a.cols(); ++j) out << (j ? "," : "") << fmt(a(i, j));
    out << "\n";
  }
  return out.str();
}

// -- t-SNE ---------------------------------------------------------------------------------

namespace {

// p_{·|i} for precision beta over squared distances d (entry i ignored). Returns 2^H.
double conditional_row(const Vector& d, Index self, double beta, Vector& p) {
  double dmin = INFINITY;
  for (Index j = 0; j < d.size(); ++j)
    if (j != self) dmin = std::min(dmin, d(j));
  double z = 0.0;
  for (Index j = 0; j < d.size(); ++j) {
    p(j) = j == self ? 0.0 : std::exp(-beta * (d(j) - dmin));
    z += p(j);
  }
  double h = 0.0;
  for (Index j = 0; j < d.size(); ++j) {
    p(j) /= z;
    if (p(j) > 0.0) h -= p(j) * std::log2(p(j));
  }
  return std::exp2(h);
}

}  // namespace

Affinities tsne_affinities(const Matrix& features, double perplexity) {
  const Index m = features.cols();
  if (m < 2) throw UsageError("tsne: need at least 2 points");
  Matrix sq(m, m);
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < m; ++j) sq(i, j) = (features.col(i) - features.col(j)).squaredNorm();

  Affinities out;
  Matrix cond(m, m);
  Vector row(m);
  for (Index i = 0; i < m; ++i) {
    const Vector d = sq.row(i).transpose();
    double beta = 1.0, lo = 0.0, hi = INFINITY;
    double perp = conditional_row(d, i, beta, row);
    for (int it = 0; it < 200 && std::abs(perp - perplexity) > kPerplexityTolerance; ++it) {
      if (perp > perplexity) {
        lo = beta;
        beta = std::isinf(hi) ? 2.0 * beta : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
      perp = conditional_row(d, i, beta, row);
    }
    if (std::abs(perp - perplexity) > kPerplexityTolerance) out.converged = false;
    out.perplexity.push_back(perp);
    out.beta.push_back(beta);
    cond.row(i) = row.transpose();
  }
  out.p = (cond + cond.transpose()) / (2.0 * static_cast<double>(m));
  return out;
}

Matrix tsne_q(const Matrix& y) {
  const Index m = y.rows();
  Matrix q(m, m);
  double z = 0.0;
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < m; ++j) {
      q(i, j) = i == j ? 0.0 : 1.0 / (1.0 + (y.row(i) - y.row(j)).squaredNorm());
      z += q(i, j);
    }
  return q / z;
}

double kl_divergence(const Matrix& p, const Matrix& q) {
  require_same_shape(p, q, "kl_divergence");
  double kl = 0.0;
  for (Index i = 0; i < p.rows(); ++i)
    for (Index j = 0; j < p.cols(); ++j)
      if (p(i, j) > 0.0) kl += p(i, j) * std::log(p(i, j) / q(i, j));
  return kl;
}

TsneResult tsne_embed(const Matrix& features, const TsneConfig& cfg) {
  const Index m = features.cols();
  if (m > 2000) throw UsageError("tsne: exact t-SNE is limited to 2000 points, got " + std::to_string(m));
  if (!(cfg.perplexity > 0.0) || cfg.perplexity >= static_cast<double>(m - 1)) {
    throw UsageError("tsne: perplexity " + fmt(cfg.perplexity) + " must lie in (0, m - 1) for m = " +
                     std::to_string(m));
  }
  if (!(cfg.learning_rate > 0.0) || cfg.iterations < 0) {
    throw UsageError("tsne: learning rate must be positive and iterations non-negative");
  }
  TsneResult out;
  out.affinities = tsne_affinities(features, cfg.perplexity);
  const Matrix& p = out.affinities.p;

  Rng rng(cfg.seed);
  Matrix y = rng.normal_matrix(m, 2, cfg.init_stddev);
  Matrix velocity = Matrix::Zero(m, 2);
  Matrix grad(m, 2);
  Matrix num(m, m);
  for (Index t = 0; t < cfg.iterations; ++t) {
    const double alpha = t < cfg.exaggeration_iterations ? cfg.exaggeration : 1.0;
    const double mu = t < cfg.momentum_switch ? cfg.momentum_initial : cfg.momentum_final;
    double z = 0.0;
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < m; ++j) {
        num(i, j) = i == j ? 0.0 : 1.0 / (1.0 + (y.row(i) - y.row(j)).squaredNorm());
        z += num(i, j);
      }
    // ∂KL/∂y_i = 4 Σ_j (p_ij − q_ij)(1 + ‖y_i − y_j‖²)⁻¹ (y_i − y_j)
    grad.setZero();
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < m; ++j) {
        if (i == j) continue;
        const double w = (alpha * p(i, j) - num(i, j) / z) * num(i, j);
        grad.row(i) += 4.0 * w * (y.row(i) - y.row(j));
      }
    velocity = mu * velocity - cfg.learning_rate * grad;
    y += velocity;
    y.rowwise() -= y.colwise().mean();
    out.kl.push_back(kl_divergence(p, tsne_q(y)));
  }
  out.embedding = y;
  return out;
}

}  // namespace proxbundle::geometry
