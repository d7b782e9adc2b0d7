#include "doctest.h"

#include "proxbundle/core/file_io.hpp"
#include "proxbundle/data/dataset.hpp"
#include "proxbundle/data/idx.hpp"
#include "proxbundle/data/synthetic.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <set>

using namespace proxbundle;
using namespace proxbundle::data;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("proxbundle_test_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

Vector flatten(const Image& img) {
  return Eigen::Map<const Vector>(img.pixels.data(), static_cast<Index>(img.pixels.size()));
}

// Centroids from the train side, accuracy on `eval`.
double nearest_centroid_accuracy(const DatasetSplit& s, const std::vector<Index>& eval) {
  const int c = s.num_classes();
  std::vector<Vector> centroid(static_cast<std::size_t>(c));
  std::vector<int> count(static_cast<std::size_t>(c), 0);
  for (Index i : s.train) {
    const auto l = static_cast<std::size_t>(s.labels[static_cast<std::size_t>(i)]);
    const Vector x = flatten(s.images[static_cast<std::size_t>(i)]);
    if (count[l]++ == 0) centroid[l] = x;
    else centroid[l] += x;
  }
  for (int l = 0; l < c; ++l) centroid[static_cast<std::size_t>(l)] /= count[static_cast<std::size_t>(l)];
  int correct = 0;
  for (Index i : eval) {
    const Vector x = flatten(s.images[static_cast<std::size_t>(i)]);
    int best = 0;
    double best_d = INFINITY;
    for (int l = 0; l < c; ++l) {
      const double d = (x - centroid[static_cast<std::size_t>(l)]).squaredNorm();
      if (d < best_d) best_d = d, best = l;
    }
    correct += best == s.labels[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(correct) / static_cast<double>(eval.size());
}

std::vector<std::uint8_t> be32(std::uint32_t v) {
  return {static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16),
          static_cast<std::uint8_t>(v >> 8), static_cast<std::uint8_t>(v)};
}

std::vector<std::uint8_t> cat(std::initializer_list<std::vector<std::uint8_t>> parts) {
  std::vector<std::uint8_t> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

}  // namespace

TEST_CASE("gen_subspaces") {
  SUBCASE("noise-free rank-one classes are collinear") {
    SubspaceSpec spec;
    spec.subspace_dim = 1;
    spec.seed = 3;
    const SubspaceData s = gen_subspaces(spec);
    for (int c = 0; c < 3; ++c) {
      const Matrix x = s.data.columns_of(c);
      for (Index i = 0; i < x.cols(); ++i)
        for (Index j = 0; j < x.cols(); ++j) {
          const double cosine = x.col(i).dot(x.col(j)) / (x.col(i).norm() * x.col(j).norm());
          CHECK(std::abs(std::abs(cosine) - 1.0) <= 1e-10);
        }
    }
  }
  SUBCASE("seeded output is bitwise reproducible") {
    SubspaceSpec spec;
    spec.noise = 0.1;
    spec.seed = 99;
    const SubspaceData a = gen_subspaces(spec), b = gen_subspaces(spec);
    CHECK(bitwise_equal(a.data.features, b.data.features));
    CHECK(a.data.labels == b.data.labels);
    spec.seed = 100;
    CHECK_FALSE(bitwise_equal(a.data.features, gen_subspaces(spec).data.features));
  }
  SUBCASE("class sample matrices have rank r") {
    SubspaceSpec spec;
    spec.seed = 5;
    const SubspaceData s = gen_subspaces(spec);
    REQUIRE(s.data.size() == 60);
    for (int c = 0; c < 3; ++c) {
      const Matrix x = s.data.columns_of(c);
      Eigen::SelfAdjointEigenSolver<Matrix> eig(x * x.transpose());
      const Vector ev = eig.eigenvalues();
      const double top = ev.maxCoeff();
      int rank = 0;
      for (Index k = 0; k < ev.size(); ++k) rank += ev(k) > 1e-8 * top;
      CHECK(rank == 2);
      const Matrix& b = s.bases[static_cast<std::size_t>(c)];
      CHECK((b.transpose() * b - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() <= 1e-10);
    }
  }
  SUBCASE("noisy samples stay near their subspace") {
    SubspaceSpec spec;
    spec.noise = 0.05;
    spec.samples_per_class = 400;
    spec.seed = 6;
    const SubspaceData s = gen_subspaces(spec);
    const double bound = 3.0 * spec.noise * std::sqrt(20.0);
    int inside = 0;
    for (Index j = 0; j < s.data.size(); ++j) {
      const Matrix& b = s.bases[static_cast<std::size_t>(s.data.labels[static_cast<std::size_t>(j)])];
      const Vector x = s.data.features.col(j);
      inside += (x - b * (b.transpose() * x)).norm() <= bound;
    }
    CHECK(static_cast<double>(inside) >= 0.99 * static_cast<double>(s.data.size()));
  }
  SUBCASE("invalid specs") {
    SubspaceSpec spec;
    spec.subspace_dim = 20;
    CHECK_THROWS_AS(gen_subspaces(spec), UsageError);
    spec.subspace_dim = 25;
    CHECK_THROWS_AS(gen_subspaces(spec), UsageError);
  }
}

TEST_CASE("gen_images") {
  SUBCASE("patterns are pairwise distinct at zero shift") {
    for (int a = 0; a < kPatternCount; ++a)
      for (int b = a + 1; b < kPatternCount; ++b) {
        const Vector x = flatten(render_pattern(static_cast<Pattern>(a), 16, 16));
        const Vector y = flatten(render_pattern(static_cast<Pattern>(b), 16, 16));
        CHECK((x - y).norm() > 1.0);
      }
  }
  SUBCASE("zero noise: nearest centroid is perfect") {
    SyntheticImageSpec spec;
    spec.noise = 0.0;
    spec.classes = kPatternCount;
    spec.seed = 1;
    const DatasetSplit s = gen_images(spec);
    CHECK_NOTHROW(s.validate());
    CHECK(nearest_centroid_accuracy(s, s.test) == 1.0);
    CHECK(nearest_centroid_accuracy(s, s.train) == 1.0);
  }
  SUBCASE("80/20 stratified split, seeded") {
    SyntheticImageSpec spec;
    spec.seed = 2;
    const DatasetSplit a = gen_images(spec), b = gen_images(spec);
    CHECK(a.test.size() == 36);
    CHECK(a.train.size() == 144);
    CHECK(a.train == b.train);
    CHECK(a.test == b.test);
    bool same = true;
    for (std::size_t i = 0; i < a.images.size(); ++i) same = same && a.images[i].pixels == b.images[i].pixels;
    CHECK(same);
    spec.seed = 3;
    CHECK(gen_images(spec).images[0].pixels != a.images[0].pixels);
  }
  SUBCASE("noise 0.5 nearest-centroid baseline") {
    SyntheticImageSpec spec;
    spec.noise = 0.5;
    spec.seed = 4;
    const DatasetSplit s = gen_images(spec);
    const double acc = nearest_centroid_accuracy(s, s.test);
    MESSAGE("nearest-centroid test accuracy at noise 0.5: " << acc);
    CHECK(acc > 1.0 / 3.0);
  }
  SUBCASE("invalid specs") {
    SyntheticImageSpec spec;
    spec.classes = kPatternCount + 1;
    CHECK_THROWS_AS(gen_images(spec), UsageError);
    spec.classes = 2;
    spec.samples_per_class = 1;
    CHECK_THROWS_AS(gen_images(spec), UsageError);
  }
}

TEST_CASE("idx decoding") {
  const auto images = cat({be32(0x803), be32(2), be32(2), be32(2), {0, 255, 51, 102, 1, 2, 3, 4}});
  const auto labels = cat({be32(0x801), be32(2), {7, 3}});
  SUBCASE("hand-crafted fixture") {
    const auto imgs = idx::decode_images(images);
    REQUIRE(imgs.size() == 2);
    CHECK(imgs[0].height == 2);
    CHECK(imgs[0].width == 2);
    CHECK(imgs[0].at(0, 0) == 0.0);
    CHECK(imgs[0].at(0, 1) == 1.0);
    CHECK(imgs[0].at(1, 0) == 0.2);
    CHECK(imgs[0].at(1, 1) == 0.4);
    CHECK(imgs[1].at(1, 1) == 4.0 / 255.0);
    CHECK(idx::decode_labels(labels) == std::vector<int>{7, 3});
  }
  SUBCASE("errors name the offset") {
    auto bad = labels;
    bad[3] = 0x03;
    CHECK_THROWS_WITH_AS(idx::decode_labels(bad), doctest::Contains("offset 0"), FormatError);
    CHECK_THROWS_AS(idx::decode_labels(images), FormatError);
    auto shortened = images;
    shortened.pop_back();
    CHECK_THROWS_WITH_AS(idx::decode_images(shortened), doctest::Contains("offset 23"), FormatError);
    CHECK_THROWS_WITH_AS(idx::decode_images({0, 0, 8}), doctest::Contains("offset 0"), FormatError);
    CHECK_THROWS_WITH_AS(idx::decode_images(cat({be32(0x803), be32(1)})), doctest::Contains("offset 8"),
                         FormatError);
    auto trailing = labels;
    trailing.push_back(0);
    CHECK_THROWS_WITH_AS(idx::decode_labels(trailing), doctest::Contains("offset 10"), FormatError);
  }
  SUBCASE("count mismatch between files") {
    const fs::path dir = scratch_dir("mismatch");
    io::write_bytes(dir / "img", images);
    io::write_bytes(dir / "lbl", cat({be32(0x801), be32(3), {0, 1, 1}}));
    CHECK_THROWS_WITH_AS(idx::load_idx(dir / "img", dir / "lbl"), doctest::Contains("offset"), FormatError);
    CHECK_THROWS_AS(idx::load_idx(dir / "img", dir / "missing"), FormatError);
  }
}

TEST_CASE("idx round trip of a random dataset is bit-identical") {
  Rng rng(8);
  std::vector<Image> images;
  std::vector<int> labels;
  for (int i = 0; i < 30; ++i) {
    Image img(5, 7);
    for (double& px : img.pixels) px = static_cast<double>(rng.below(256)) / 255.0;
    images.push_back(img);
    labels.push_back(i % 3);
  }
  const fs::path dir = scratch_dir("roundtrip");
  idx::write_idx(dir / "img", dir / "lbl", images, labels);
  const DatasetSplit s = idx::load_idx(dir / "img", dir / "lbl", 0.2, 4);
  REQUIRE(s.images.size() == images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    CHECK(std::memcmp(s.images[i].pixels.data(), images[i].pixels.data(),
                      images[i].pixels.size() * sizeof(double)) == 0);
  }
  CHECK(s.labels == labels);
  CHECK_NOTHROW(s.validate());
  CHECK(idx::encode_images(s.images) == io::read_bytes(dir / "img"));
}

TEST_CASE("batches") {
  std::vector<Index> idx(23);
  std::iota(idx.begin(), idx.end(), 100);
  SUBCASE("batch size at least m gives one batch") {
    Rng rng(1);
    const auto b = batches(idx, 23, rng, true);
    REQUIRE(b.size() == 1);
    CHECK(std::set<Index>(b[0].begin(), b[0].end()) == std::set<Index>(idx.begin(), idx.end()));
    Rng rng2(1);
    CHECK(batches(idx, 1000, rng2, false).size() == 1);
  }
  SUBCASE("same seed, same order; union covers each sample once") {
    Rng a(5), b(5), c(6);
    const auto x = batches(idx, 4, a, false), y = batches(idx, 4, b, false), z = batches(idx, 4, c, false);
    CHECK(x == y);
    CHECK(x != z);
    std::vector<Index> all;
    for (const auto& batch : x) all.insert(all.end(), batch.begin(), batch.end());
    std::sort(all.begin(), all.end());
    CHECK(all == idx);
    CHECK(x.size() == 6);
    CHECK(x.back().size() == 3);
  }
  SUBCASE("trailing singleton merge") {
    const auto plain = chunk(std::span<const Index>(idx).first(21), 5, false);
    CHECK(plain.size() == 5);
    CHECK(plain.back().size() == 1);
    const auto merged = chunk(std::span<const Index>(idx).first(21), 5, true);
    REQUIRE(merged.size() == 4);
    CHECK(merged.back().size() == 6);
    CHECK(merged.back().back() == 120);
    CHECK(chunk(std::span<const Index>(idx).first(1), 5, true).size() == 1);
    CHECK_THROWS_AS(chunk(idx, 0, false), UsageError);
  }
  SUBCASE("hash depends on order and content") {
    const std::vector<Index> a{1, 2, 3}, b{1, 3, 2}, c{1, 2, 3};
    CHECK(batch_hash(a) == batch_hash(c));
    CHECK(batch_hash(a) != batch_hash(b));
  }
}

TEST_CASE("stratified_split") {
  DatasetSplit s;
  for (int i = 0; i < 10; ++i) {
    s.images.emplace_back(2, 2);
    s.labels.push_back(i < 7 ? 0 : 1);
  }
  stratified_split(s, 0.2, 1);
  CHECK(s.test.size() == 2);  // round(1.4) + round(0.6)
  CHECK_NOTHROW(s.validate());
  s.labels[9] = 2;
  CHECK_THROWS_AS(stratified_split(s, 0.2, 1), UsageError);
  CHECK_THROWS_AS(stratified_split(s, 1.0, 1), UsageError);
}

TEST_CASE("feature and label export") {
  const fs::path dir = scratch_dir("export");
  Rng rng(9);
  LabeledFeatures lf{rng.normal_matrix(4, 5), {0, 1, 1, 2, 0}};
  export_features(lf, dir / "f.pxb1", dir / "l.json");
  const LabeledFeatures back = import_features(dir / "f.pxb1", dir / "l.json");
  CHECK(bitwise_equal(back.features, lf.features));
  CHECK(back.labels == lf.labels);
  CHECK(back.num_classes() == 3);
  CHECK(lf.columns_of(1).cols() == 2);

  io::write_text(dir / "bare.json", "[2, 0, 1]");
  CHECK(read_labels_json(dir / "bare.json") == std::vector<int>{2, 0, 1});
  io::write_text(dir / "bad.json", "{\"labels\": [0, -1]}");
  CHECK_THROWS_WITH_AS(read_labels_json(dir / "bad.json"), doctest::Contains("labels[1]"), FormatError);
  io::write_text(dir / "short.json", "[0, 1]");
  CHECK_THROWS_AS(import_features(dir / "f.pxb1", dir / "short.json"), FormatError);
  CHECK_THROWS_AS(read_labels_json(dir / "nope.json"), FormatError);
}
