#pragma once

#include "proxbundle/data/dataset.hpp"
#include "proxbundle/geometry/transport.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace proxbundle::geometry {

using data::LabeledFeatures;

/// c × c matrix of W₁ distances between the per-class empirical distributions (uniform
/// weights). Symmetric with a zero diagonal by construction. Pairs run in parallel.
Matrix class_distance_matrix(const LabeledFeatures& lf);

/// Mean Euclidean distance over unordered pairs within each class (0 for singletons).
std::vector<double> intra_class_distances(const LabeledFeatures& lf);

/// Mean of the off-diagonal entries.
double mean_off_diagonal(const Matrix& a);

struct SeparabilityReport {
  std::vector<double> intra_pre, intra_post, intra_delta;
  double mean_intra_pre = 0.0, mean_intra_post = 0.0, mean_intra_delta = 0.0;
  double inter_pre = 0.0, inter_post = 0.0, inter_delta = 0.0;
  Matrix distances_pre, distances_post;

  std::string to_json() const;
};

/// Labels must match exactly; feature dimensions may differ.
SeparabilityReport separability_report(const LabeledFeatures& pre, const LabeledFeatures& post);

/// Comma-separated rows, full double precision.
std::string matrix_csv(const Matrix& a, const std::vector<std::string>& header = {});

// -- t-SNE ---------------------------------------------------------------------------------

struct TsneConfig {
  double perplexity = 15.0;
  Index iterations = 500;
  double learning_rate = 5.0;
  double exaggeration = 4.0;
  Index exaggeration_iterations = 50;
  double momentum_initial = 0.5;
  double momentum_final = 0.8;
  Index momentum_switch = 100;
  double init_stddev = 1e-4;
  std::uint64_t seed = 0;
};

struct Affinities {
  Matrix p;                         // symmetric joint probabilities, sums to 1
  std::vector<double> perplexity;   // achieved 2^H per point
  std::vector<double> beta;         // precision 1/(2σ_i²) per point
  bool converged = true;            // every point within 1e-5 of the target
};

inline constexpr double kPerplexityTolerance = 1e-5;

/// Conditional p_{j|i} with per-point bisection on the Gaussian precision, then
/// p_ij = (p_{j|i} + p_{i|j}) / 2m. Columns of `features` are points.
Affinities tsne_affinities(const Matrix& features, double perplexity);

/// Student-t joint probabilities of an m × 2 embedding (zero diagonal).
Matrix tsne_q(const Matrix& y);

/// Σ p log(p / q) over entries with p > 0.
double kl_divergence(const Matrix& p, const Matrix& q);

struct TsneResult {
  Matrix embedding;         // m × 2
  std::vector<double> kl;   // KL(P‖Q) after every iteration, un-exaggerated P
  Affinities affinities;
};

/// Exact O(m²) t-SNE. Throws UsageError unless 0 < perplexity < m − 1 and m ≤ 2000.
TsneResult tsne_embed(const Matrix& features, const TsneConfig& cfg = {});

}  // namespace proxbundle::geometry
