#include "proxbundle/data/synthetic.hpp"

#include <cmath>
#include <string>

namespace proxbundle::data {

void SubspaceSpec::validate() const {
  if (ambient_dim < 1 || subspace_dim < 1 || classes < 1 || samples_per_class < 1) {
    throw UsageError("subspace spec: dimensions and counts must be positive");
  }
  if (subspace_dim >= ambient_dim) {
    throw UsageError("subspace spec: subspace dim " + std::to_string(subspace_dim) +
                     " must be below ambient dim " + std::to_string(ambient_dim));
  }
  if (!(noise >= 0.0)) throw UsageError("subspace spec: noise must be >= 0");
}

SubspaceData gen_subspaces(const SubspaceSpec& spec) {
  spec.validate();
  const Index d = spec.ambient_dim, r = spec.subspace_dim, n = spec.samples_per_class;
  Rng root(spec.seed);
  SubspaceData out;
  out.data.features.resize(d, n * spec.classes);
  out.data.labels.reserve(static_cast<std::size_t>(n * spec.classes));
  for (int c = 0; c < spec.classes; ++c) {
    Rng rng = root.split(static_cast<std::uint64_t>(c));
    Eigen::HouseholderQR<Matrix> qr(rng.normal_matrix(d, r));
    const Matrix basis = qr.householderQ() * Matrix::Identity(d, r);
    for (Index j = 0; j < n; ++j) {
      Vector alpha(r);
      do {
        for (Index k = 0; k < r; ++k) alpha(k) = rng.normal();
      } while (alpha.norm() == 0.0);
      alpha /= alpha.norm();
      Vector x = basis * alpha;
      if (spec.noise > 0.0)
        for (Index k = 0; k < d; ++k) x(k) += spec.noise * rng.normal();
      out.data.features.col(c * n + j) = x;
      out.data.labels.push_back(c);
    }
    out.bases.push_back(basis);
  }
  return out;
}

void SyntheticImageSpec::validate() const {
  if (height < 4 || width < 4) throw UsageError("image spec: images must be at least 4x4");
  if (classes < 1 || classes > kPatternCount) {
    throw UsageError("image spec: classes must lie in [1, " + std::to_string(kPatternCount) + "]");
  }
  if (samples_per_class < 2) throw UsageError("image spec: need at least 2 samples per class");
  if (!(noise >= 0.0)) throw UsageError("image spec: noise must be >= 0");
  if (max_shift < 0) throw UsageError("image spec: max_shift must be >= 0");
}

Image render_pattern(Pattern p, Index height, Index width, Index dy, Index dx) {
  Image img(height, width);
  const double cy = 0.5 * static_cast<double>(height - 1) + static_cast<double>(dy);
  const double cx = 0.5 * static_cast<double>(width - 1) + static_cast<double>(dx);
  const double scale = 0.25 * static_cast<double>(std::min(height, width));
  for (Index r = 0; r < height; ++r) {
    for (Index c = 0; c < width; ++c) {
      const double y = static_cast<double>(r) - cy;
      const double x = static_cast<double>(c) - cx;
      double v = 0.0;
      switch (p) {
        case Pattern::HorizontalBars:
          v = (r % 4) < 2 ? 1.0 : 0.0;
          break;
        case Pattern::VerticalBars:
          v = (c % 4) < 2 ? 1.0 : 0.0;
          break;
        case Pattern::Cross:
          v = (std::abs(y) <= 1.0 || std::abs(x) <= 1.0) ? 1.0 : 0.0;
          break;
        case Pattern::Blob:
          v = std::exp(-(x * x + y * y) / (2.0 * scale * scale));
          break;
        case Pattern::Diagonal:
          v = ((r + c) % 6) < 2 ? 1.0 : 0.0;
          break;
        case Pattern::Ring: {
          const double rad = std::sqrt(x * x + y * y);
          v = std::abs(rad - 1.4 * scale) <= 1.0 ? 1.0 : 0.0;
          break;
        }
      }
      img.at(r, c) = v;
    }
  }
  return img;
}

DatasetSplit gen_images(const SyntheticImageSpec& spec) {
  spec.validate();
  Rng root(spec.seed);
  Rng render = root.split(0);
  DatasetSplit out;
  for (int c = 0; c < spec.classes; ++c) {
    for (Index j = 0; j < spec.samples_per_class; ++j) {
      const auto span = static_cast<std::uint64_t>(2 * spec.max_shift + 1);
      const Index dy = static_cast<Index>(render.below(span)) - spec.max_shift;
      const Index dx = static_cast<Index>(render.below(span)) - spec.max_shift;
      Image img = render_pattern(static_cast<Pattern>(c), spec.height, spec.width, dy, dx);
      if (spec.noise > 0.0)
        for (double& px : img.pixels) px += spec.noise * render.normal();
      out.images.push_back(std::move(img));
      out.labels.push_back(c);
    }
  }
  stratified_split(out, spec.test_fraction, root.next_u64());
  return out;
}

}  // namespace proxbundle::data
