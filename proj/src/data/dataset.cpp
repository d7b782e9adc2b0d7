#include "proxbundle/data/dataset.hpp"

#include "proxbundle/core/file_io.hpp"
#include "proxbundle/core/pxb1.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>

namespace proxbundle::data {

namespace {

int max_label(std::span<const int> labels) {
  return labels.empty() ? -1 : *std::max_element(labels.begin(), labels.end());
}

}  // namespace

int LabeledFeatures::num_classes() const { return max_label(labels) + 1; }

void LabeledFeatures::validate() const {
  if (static_cast<Index>(labels.size()) != features.cols()) {
    throw UsageError(std::to_string(labels.size()) + " labels for " +
                     std::to_string(features.cols()) + " feature columns");
  }
  for (int l : labels)
    if (l < 0) throw UsageError("negative label " + std::to_string(l));
}

Matrix LabeledFeatures::columns_of(int label) const {
  std::vector<Index> cols;
  for (std::size_t j = 0; j < labels.size(); ++j)
    if (labels[j] == label) cols.push_back(static_cast<Index>(j));
  Matrix out(features.rows(), static_cast<Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) out.col(static_cast<Index>(k)) = features.col(cols[k]);
  return out;
}

int DatasetSplit::num_classes() const { return max_label(labels) + 1; }

void DatasetSplit::validate() const {
  const Index n = static_cast<Index>(images.size());
  if (static_cast<Index>(labels.size()) != n) {
    throw UsageError(std::to_string(labels.size()) + " labels for " + std::to_string(n) + " images");
  }
  std::vector<int> seen(static_cast<std::size_t>(n), 0);
  for (const auto* part : {&train, &test}) {
    for (Index i : *part) {
      if (i < 0 || i >= n) throw UsageError("split index " + std::to_string(i) + " out of range");
      if (seen[static_cast<std::size_t>(i)]++) {
        throw UsageError("split index " + std::to_string(i) + " appears twice");
      }
    }
  }
  for (Index i = 0; i < n; ++i)
    if (!seen[static_cast<std::size_t>(i)]) throw UsageError("sample " + std::to_string(i) + " in no partition");
  std::set<int> train_classes, test_classes;
  for (Index i : train) train_classes.insert(labels[static_cast<std::size_t>(i)]);
  for (Index i : test) test_classes.insert(labels[static_cast<std::size_t>(i)]);
  if (train_classes != test_classes) throw UsageError("train and test partitions cover different classes");
}

void stratified_split(DatasetSplit& split, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw UsageError("test fraction must lie in (0, 1), got " + std::to_string(test_fraction));
  }
  std::map<int, std::vector<Index>> by_class;
  for (std::size_t i = 0; i < split.labels.size(); ++i) {
    by_class[split.labels[i]].push_back(static_cast<Index>(i));
  }
  Rng rng(seed);
  split.train.clear();
  split.test.clear();
  for (auto& [label, members] : by_class) {
    const Index n = static_cast<Index>(members.size());
    if (n < 2) throw UsageError("class " + std::to_string(label) + " has fewer than 2 samples");
    const Index n_test =
        std::clamp<Index>(std::llround(test_fraction * static_cast<double>(n)), 1, n - 1);
    const auto perm = rng.permutation(members.size());
    for (Index k = 0; k < n; ++k) {
      const Index idx = members[perm[static_cast<std::size_t>(k)]];
      (k < n_test ? split.test : split.train).push_back(idx);
    }
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
}

std::vector<std::vector<Index>> chunk(std::span<const Index> indices, Index batch_size,
                                      bool merge_singleton) {
  if (batch_size < 1) throw UsageError("batch size must be >= 1");
  std::vector<std::vector<Index>> out;
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(indices.size(), start + static_cast<std::size_t>(batch_size));
    out.emplace_back(indices.begin() + static_cast<std::ptrdiff_t>(start),
                     indices.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (merge_singleton && out.size() >= 2 && out.back().size() < 2) {
    out[out.size() - 2].insert(out[out.size() - 2].end(), out.back().begin(), out.back().end());
    out.pop_back();
  }
  return out;
}

std::vector<std::vector<Index>> batches(std::span<const Index> indices, Index batch_size, Rng& rng,
                                        bool merge_singleton) {
  std::vector<Index> order(indices.begin(), indices.end());
  const auto perm = rng.permutation(order.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = indices[perm[k]];
  return chunk(order, batch_size, merge_singleton);
}

std::uint64_t batch_hash(std::span<const Index> batch) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (Index i : batch) {
    auto v = static_cast<std::uint64_t>(i);
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

void write_labels_json(const std::filesystem::path& path, std::span<const int> labels) {
  nlohmann::json doc;
  doc["labels"] = std::vector<int>(labels.begin(), labels.end());
  doc["num_classes"] = max_label(labels) + 1;
  io::write_text(path, doc.dump() + "\n");
}

std::vector<int> read_labels_json(const std::filesystem::path& path) {
  const std::string text = io::read_text(path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  const nlohmann::json* arr = &doc;
  if (doc.is_object()) {
    if (!doc.contains("labels")) throw FormatError(path.string() + ": missing field 'labels'");
    arr = &doc["labels"];
  }
  if (!arr->is_array()) throw FormatError(path.string() + ": 'labels' must be an array");
  std::vector<int> out;
  for (std::size_t i = 0; i < arr->size(); ++i) {
    const auto& v = (*arr)[i];
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      throw FormatError(path.string() + ": labels[" + std::to_string(i) +
                        "] is not a non-negative integer");
    }
    out.push_back(v.get<int>());
  }
  return out;
}

void export_features(const LabeledFeatures& lf, const std::filesystem::path& features_path,
                     const std::filesystem::path& labels_path) {
  lf.validate();
  pxb1::write(features_path, lf.features);
  write_labels_json(labels_path, lf.labels);
}

LabeledFeatures import_features(const std::filesystem::path& features_path,
                                const std::filesystem::path& labels_path) {
  LabeledFeatures lf{pxb1::read(features_path), read_labels_json(labels_path)};
  if (static_cast<Index>(lf.labels.size()) != lf.features.cols()) {
    throw FormatError(labels_path.string() + ": " + std::to_string(lf.labels.size()) +
                      " labels for " + std::to_string(lf.features.cols()) + " feature columns");
  }
  return lf;
}

}  // namespace proxbundle::data
