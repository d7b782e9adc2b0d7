#pragma once

#include "proxbundle/core/image.hpp"
#include "proxbundle/core/matrix.hpp"
#include "proxbundle/core/random.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace proxbundle::data {

/// Feature columns with one integer class label per column.
struct LabeledFeatures {
  Matrix features;  // d × m
  std::vector<int> labels;

  Index size() const { return features.cols(); }
  int num_classes() const;
  /// Throws UsageError if the label count disagrees with m or a label is negative.
  void validate() const;
  /// d × m_c matrix of the columns carrying `label`.
  Matrix columns_of(int label) const;
};

/// Images with labels and a disjoint train/test partition of their indices.
struct DatasetSplit {
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<Index> train;
  std::vector<Index> test;

  int num_classes() const;
  /// Partitions disjoint and covering; every class present in both.
  void validate() const;
};

/// Stratified seeded split: per class, round(test_fraction · n_c) samples (at least one,
/// at most n_c − 1) go to the test side. Each class needs ≥ 2 samples.
void stratified_split(DatasetSplit& split, double test_fraction, std::uint64_t seed);

/// Shuffles `indices` with `rng` and cuts them into batches of `batch_size`. With
/// `merge_singleton`, a trailing batch of size 1 is folded into the previous one.
std::vector<std::vector<Index>> batches(std::span<const Index> indices, Index batch_size, Rng& rng,
                                        bool merge_singleton);

/// Same cut without shuffling.
std::vector<std::vector<Index>> chunk(std::span<const Index> indices, Index batch_size,
                                      bool merge_singleton);

/// FNV-1a over the index values; used to log and compare data order across runs.
std::uint64_t batch_hash(std::span<const Index> batch);

/// `{"labels": [...], "num_classes": c}`. The reader also accepts a bare array.
void write_labels_json(const std::filesystem::path& path, std::span<const int> labels);
std::vector<int> read_labels_json(const std::filesystem::path& path);

/// PXB1 features plus a JSON label file.
void export_features(const LabeledFeatures& lf, const std::filesystem::path& features_path,
                     const std::filesystem::path& labels_path);
LabeledFeatures import_features(const std::filesystem::path& features_path,
                                const std::filesystem::path& labels_path);

}  // namespace proxbundle::data
