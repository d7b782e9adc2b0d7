#pragma once

#include "proxbundle/data/dataset.hpp"

#include <cstdint>
#include <vector>

namespace proxbundle::data {

struct SubspaceSpec {
  Index ambient_dim = 20;
  Index subspace_dim = 2;
  int classes = 3;
  Index samples_per_class = 20;
  double noise = 0.0;
  std::uint64_t seed = 0;

  /// r ≥ d, non-positive counts or negative noise → UsageError.
  void validate() const;
};

struct SubspaceData {
  LabeledFeatures data;       // class-major column order
  std::vector<Matrix> bases;  // d × r orthonormal basis per class
};

/// Sample j of class c is B_c·α + σ·ε with α uniform on the unit sphere of ℝ^r and ε
/// standard normal in ℝ^d.
SubspaceData gen_subspaces(const SubspaceSpec& spec);

enum class Pattern { HorizontalBars, Cross, Blob, VerticalBars, Diagonal, Ring };
inline constexpr int kPatternCount = 6;

struct SyntheticImageSpec {
  Index height = 16;
  Index width = 16;
  int classes = 3;
  Index samples_per_class = 60;
  double noise = 0.5;
  Index max_shift = 1;  // per-sample pattern translation in [-max_shift, max_shift]
  double test_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Noise-free rendering of a class pattern. Cross, blob and ring are translated by (dy, dx);
/// the periodic stripe patterns ignore the shift, since a phase shift would blur their class
/// mean into a flat field.
Image render_pattern(Pattern p, Index height, Index width, Index dy = 0, Index dx = 0);

/// Class c draws pattern c. Pixels are the rendered pattern plus N(0, noise²).
DatasetSplit gen_images(const SyntheticImageSpec& spec);

}  // namespace proxbundle::data
