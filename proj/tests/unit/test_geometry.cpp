#include "doctest.h"

#include "proxbundle/core/random.hpp"
#include "proxbundle/geometry/geometry.hpp"

#include "../support/reference_lp.hpp"

#include <cmath>

using namespace proxbundle;
using namespace proxbundle::geometry;

namespace {

Vector uniform(Index n) { return Vector::Constant(n, 1.0 / static_cast<double>(n)); }

Vector random_weights(Rng& rng, Index n) {
  Vector w(n);
  for (Index i = 0; i < n; ++i) w(i) = rng.uniform(0.1, 1.0);
  return w / w.sum();
}

double marginal_error(const TransportPlan& t, const Vector& a, const Vector& b) {
  return std::max((t.plan.rowwise().sum() - a).cwiseAbs().maxCoeff(),
                  (t.plan.colwise().sum().transpose() - b).cwiseAbs().maxCoeff());
}

Matrix rotation(Rng& rng, Index d) {
  Eigen::HouseholderQR<Matrix> qr(rng.normal_matrix(d, d));
  return qr.householderQ();
}

// Three Gaussian blobs in `d` dimensions, `n` points each, class-major.
data::LabeledFeatures blobs(Rng& rng, Index d, Index n, double spread) {
  data::LabeledFeatures lf;
  lf.features.resize(d, 3 * n);
  for (int c = 0; c < 3; ++c) {
    const Vector centre = 3.0 * rng.normal_matrix(d, 1);
    for (Index j = 0; j < n; ++j) {
      lf.features.col(c * n + j) = centre + spread * rng.normal_matrix(d, 1);
      lf.labels.push_back(c);
    }
  }
  return lf;
}

}  // namespace

TEST_CASE("wasserstein1: small examples") {
  Rng rng(1);
  const Matrix x = rng.normal_matrix(3, 6);
  CHECK(wasserstein1(x, x).cost <= 1e-15);

  Matrix p(2, 1), q(2, 1);
  p << 0, 0;
  q << 3, 4;
  const TransportPlan t = wasserstein1(p, q);
  CHECK(t.cost == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(t.plan(0, 0) == 1.0);

  CHECK_THROWS_AS(wasserstein1(Matrix(2, 0), q), UsageError);
  CHECK_THROWS_AS(wasserstein1(x, Matrix(4, 2)), DimensionError);
  CHECK_THROWS_AS(wasserstein1(x, x, uniform(6), Vector::Constant(6, 0.5)), UsageError);
  CHECK_THROWS_AS(wasserstein1(x, x, uniform(5), uniform(6)), DimensionError);
}

TEST_CASE("wasserstein1: vertex enumeration on random 3x4 instances") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix x = rng.normal_matrix(2, 3), y = rng.normal_matrix(2, 4);
    const Vector a = trial % 2 ? uniform(3) : random_weights(rng, 3);
    const Vector b = trial % 2 ? uniform(4) : random_weights(rng, 4);
    const TransportPlan t = wasserstein1(x, y, a, b);
    const Matrix c = euclidean_cost(x, y);
    CHECK(std::abs(t.cost - reference::transport_vertex_enumeration(c, a, b)) <= 1e-9);
    CHECK(std::abs(t.cost - reference::transport_lp(c, a, b)) <= 1e-9);
    CHECK(marginal_error(t, a, b) <= 1e-9);
    CHECK(t.plan.minCoeff() >= 0.0);
    CHECK(std::abs(t.cost - (t.plan.array() * c.array()).sum()) <= 1e-15);
  }
}

TEST_CASE("wasserstein1: dense LP oracle up to 5x5") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const Index p = 1 + static_cast<Index>(rng.below(5)), q = 1 + static_cast<Index>(rng.below(5));
    const Index d = 1 + static_cast<Index>(rng.below(4));
    const Matrix x = rng.normal_matrix(d, p), y = rng.normal_matrix(d, q);
    const bool weighted = trial % 3 == 0;
    const Vector a = weighted ? random_weights(rng, p) : uniform(p);
    const Vector b = weighted ? random_weights(rng, q) : uniform(q);
    const TransportPlan t = wasserstein1(x, y, a, b);
    CHECK(std::abs(t.cost - reference::transport_lp(euclidean_cost(x, y), a, b)) <= 1e-9);
    CHECK(marginal_error(t, a, b) <= 1e-9);
  }
}

TEST_CASE("wasserstein1: uniform square instances equal the best assignment") {
  Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const Index n = 2 + static_cast<Index>(rng.below(5));
    const Matrix x = rng.normal_matrix(3, n), y = rng.normal_matrix(3, n);
    CHECK(std::abs(wasserstein1(x, y).cost - reference::assignment_brute_force(euclidean_cost(x, y))) <= 1e-9);
  }
}

TEST_CASE("wasserstein1: degenerate ties") {
  // every cost equal, duplicated points, integer-weighted grids
  const Matrix same = Matrix::Zero(2, 4);
  Matrix ring(2, 4);
  ring << 1, 0, -1, 0, 0, 1, 0, -1;
  CHECK(std::abs(wasserstein1(same, ring).cost - 1.0) <= 1e-12);
  Matrix dup(2, 6);
  dup << 0, 0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1;
  Matrix grid(2, 3);
  grid << 0, 1, 0.5, 0, 1, 0.5;
  const TransportPlan t = wasserstein1(dup, grid);
  CHECK(std::abs(t.cost - reference::transport_lp(euclidean_cost(dup, grid), uniform(6), uniform(3))) <= 1e-9);
  CHECK(marginal_error(t, uniform(6), uniform(3)) <= 1e-9);
}

TEST_CASE("wasserstein1: metric properties and rotation invariance") {
  Rng rng(6);
  for (int trial = 0; trial < 40; ++trial) {
    const Index d = 3;
    const Matrix x = rng.normal_matrix(d, 2 + static_cast<Index>(rng.below(6)));
    const Matrix y = rng.normal_matrix(d, 2 + static_cast<Index>(rng.below(6)));
    const Matrix z = rng.normal_matrix(d, 2 + static_cast<Index>(rng.below(6)));
    const double xy = wasserstein1(x, y).cost, yx = wasserstein1(y, x).cost;
    const double xz = wasserstein1(x, z).cost, zy = wasserstein1(z, y).cost;
    CHECK(std::abs(xy - yx) <= 1e-9);
    CHECK(xy <= xz + zy + 1e-7);
    const Matrix r = rotation(rng, d);
    CHECK(std::abs(wasserstein1(r * x, r * y).cost - xy) <= 1e-9);
  }
}

TEST_CASE("class_distance_matrix") {
  Rng rng(7);
  SUBCASE("coinciding classes") {
    const Matrix x = rng.normal_matrix(4, 5);
    data::LabeledFeatures lf{Matrix(4, 10), {0, 0, 0, 0, 0, 1, 1, 1, 1, 1}};
    lf.features << x, x;
    const Matrix a = class_distance_matrix(lf);
    CHECK(a(0, 1) <= 1e-15);
    CHECK(a(1, 0) == a(0, 1));
  }
  SUBCASE("translation bound and equality") {
    const Matrix x = rng.normal_matrix(3, 6);
    const Vector shift = rng.normal_matrix(3, 1);
    data::LabeledFeatures same{Matrix(3, 12), {}};
    same.features << x, x.colwise() + shift;
    for (int k = 0; k < 12; ++k) same.labels.push_back(k < 6 ? 0 : 1);
    CHECK(std::abs(class_distance_matrix(same)(0, 1) - shift.norm()) <= 1e-9);

    const Matrix other = rng.normal_matrix(3, 6);
    data::LabeledFeatures before{Matrix(3, 12), same.labels}, after{Matrix(3, 12), same.labels};
    before.features << x, other;
    after.features << x, other.colwise() + shift;
    const double d0 = class_distance_matrix(before)(0, 1), d1 = class_distance_matrix(after)(0, 1);
    CHECK(std::abs(d1 - d0) <= shift.norm() + 1e-12);
  }
  SUBCASE("Gaussian classes against the LP per pair") {
    const data::LabeledFeatures lf = blobs(rng, 4, 7, 0.8);
    const Matrix a = class_distance_matrix(lf);
    for (int i = 0; i < 3; ++i) {
      CHECK(a(i, i) == 0.0);
      for (int j = 0; j < 3; ++j) {
        CHECK(a(i, j) == a(j, i));
        if (i == j) continue;
        const Matrix c = euclidean_cost(lf.columns_of(i), lf.columns_of(j));
        CHECK(std::abs(a(i, j) - reference::transport_lp(c, uniform(7), uniform(7))) <= 1e-9);
      }
    }
  }
  SUBCASE("errors") {
    data::LabeledFeatures one{rng.normal_matrix(2, 3), {0, 0, 0}};
    CHECK_THROWS_AS(class_distance_matrix(one), UsageError);
    data::LabeledFeatures gap{rng.normal_matrix(2, 3), {0, 2, 2}};
    CHECK_THROWS_WITH_AS(class_distance_matrix(gap), doctest::Contains("class 1"), UsageError);
    data::LabeledFeatures mismatch{rng.normal_matrix(2, 3), {0, 1}};
    CHECK_THROWS_AS(class_distance_matrix(mismatch), UsageError);
  }
}

TEST_CASE("separability_report") {
  Rng rng(8);
  const data::LabeledFeatures pre = blobs(rng, 5, 6, 1.0);
  SUBCASE("identical inputs give zero deltas") {
    const SeparabilityReport r = separability_report(pre, pre);
    CHECK(r.mean_intra_delta == 0.0);
    CHECK(r.inter_delta == 0.0);
    for (double d : r.intra_delta) CHECK(d == 0.0);
    CHECK(r.to_json().find("\"mean_inter_delta\": 0.0") != std::string::npos);
  }
  SUBCASE("contracting each class halves the intra-class mean") {
    data::LabeledFeatures post = pre;
    for (int c = 0; c < 3; ++c) {
      const Vector mean = pre.columns_of(c).rowwise().mean();
      for (Index j = 0; j < pre.size(); ++j)
        if (pre.labels[static_cast<std::size_t>(j)] == c)
          post.features.col(j) = mean + 0.5 * (pre.features.col(j) - mean);
    }
    const SeparabilityReport r = separability_report(pre, post);
    for (int c = 0; c < 3; ++c) {
      CHECK(std::abs(r.intra_post[static_cast<std::size_t>(c)] - 0.5 * r.intra_pre[static_cast<std::size_t>(c)]) <= 1e-12);
    }
    CHECK(std::abs(r.mean_intra_post - 0.5 * r.mean_intra_pre) <= 1e-12);
  }
  SUBCASE("mismatched labels") {
    data::LabeledFeatures post = pre;
    std::swap(post.labels.front(), post.labels.back());
    CHECK_THROWS_AS(separability_report(pre, post), UsageError);
  }
}

TEST_CASE("tsne: affinities") {
  Rng rng(9);
  SUBCASE("two points") {
    const Affinities a = tsne_affinities(rng.normal_matrix(3, 2), 0.5);
    CHECK(a.p(0, 1) == 0.5);
    CHECK(a.p(1, 0) == 0.5);
    CHECK_FALSE(a.converged);  // a single neighbour always has perplexity 1
  }
  SUBCASE("random cloud hits the perplexity target") {
    const Matrix x = rng.normal_matrix(6, 50);
    for (double perp : {5.0, 15.0, 30.0}) {
      const Affinities a = tsne_affinities(x, perp);
      CHECK(a.converged);
      // recompute 2^H of every conditional row from the returned precisions
      for (Index i = 0; i < 50; ++i) {
        std::vector<double> w;
        double z = 0.0;
        for (Index j = 0; j < 50; ++j) {
          if (j == i) continue;
          w.push_back(std::exp(-a.beta[static_cast<std::size_t>(i)] * (x.col(i) - x.col(j)).squaredNorm()));
          z += w.back();
        }
        double h = 0.0;
        for (double v : w)
          if (v > 0) h -= (v / z) * std::log2(v / z);
        CHECK(std::abs(std::exp2(h) - perp) <= 1e-5 * (1 + 1e-6 * perp));
      }
      CHECK((a.p - a.p.transpose()).cwiseAbs().maxCoeff() == 0.0);
      CHECK(a.p.minCoeff() >= 0.0);
      CHECK(std::abs(a.p.sum() - 1.0) <= 1e-12);
      CHECK(a.p.diagonal().cwiseAbs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("tsne: q normalization and KL") {
  Rng rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix y = rng.normal_matrix(20, 2, 3.0);
    const Matrix q = tsne_q(y);
    CHECK(std::abs(q.sum() - 1.0) <= 1e-12);
    CHECK(q.diagonal().cwiseAbs().maxCoeff() == 0.0);
    const Affinities a = tsne_affinities(rng.normal_matrix(4, 20), 5.0);
    CHECK(kl_divergence(a.p, q) >= 0.0);
    CHECK(kl_divergence(a.p, a.p) == doctest::Approx(0.0));
  }
}

TEST_CASE("tsne: embedding on a 50-point fixture") {
  Rng rng(11);
  const data::LabeledFeatures lf = blobs(rng, 8, 17, 1.0);
  const Matrix x = lf.features.leftCols(50);
  TsneConfig cfg;
  cfg.seed = 3;
  const TsneResult r = tsne_embed(x, cfg);
  REQUIRE(r.embedding.rows() == 50);
  REQUIRE(r.embedding.cols() == 2);
  REQUIRE(static_cast<Index>(r.kl.size()) == cfg.iterations);
  CHECK(r.affinities.converged);
  Index rises = 0;
  for (std::size_t t = 0; t < r.kl.size(); ++t) {
    CHECK(r.kl[t] >= 0.0);
    if (t > static_cast<std::size_t>(cfg.exaggeration_iterations) && r.kl[t] > r.kl[t - 1]) ++rises;
  }
  CHECK(rises == 0);
  MESSAGE("KL first/last: " << r.kl.front() << " / " << r.kl.back());
  CHECK(r.kl.back() < r.kl[static_cast<std::size_t>(cfg.exaggeration_iterations)]);

  CHECK_THROWS_AS(tsne_embed(x.leftCols(10), cfg), UsageError);
  TsneConfig again = cfg;
  CHECK(tsne_embed(x, again).embedding == r.embedding);
}

TEST_CASE("tsne: gradient agrees with finite differences of KL") {
  // One un-exaggerated, momentum-free step of size lr moves y by −lr·∇KL.
  Rng rng(12);
  const Matrix x = rng.normal_matrix(5, 12);
  TsneConfig cfg;
  cfg.perplexity = 4.0;
  cfg.iterations = 1;
  cfg.exaggeration_iterations = 0;
  cfg.momentum_initial = 0.0;
  cfg.learning_rate = 1e-3;
  cfg.init_stddev = 1.0;
  cfg.seed = 5;
  const Matrix p = tsne_affinities(x, cfg.perplexity).p;
  Rng init(cfg.seed);
  Matrix y0 = init.normal_matrix(12, 2, 1.0);
  const Matrix step = tsne_embed(x, cfg).embedding;
  Matrix numeric(12, 2);
  const double h = 1e-6;
  for (Index i = 0; i < 12; ++i)
    for (Index k = 0; k < 2; ++k) {
      Matrix up = y0, down = y0;
      up(i, k) += h;
      down(i, k) -= h;
      numeric(i, k) = (kl_divergence(p, tsne_q(up)) - kl_divergence(p, tsne_q(down))) / (2 * h);
    }
  Matrix expected = y0 - cfg.learning_rate * numeric;
  expected.rowwise() -= expected.colwise().mean();
  CHECK((step - expected).cwiseAbs().maxCoeff() <= 1e-9);
}
