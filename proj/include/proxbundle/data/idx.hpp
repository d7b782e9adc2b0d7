#pragma once

#include "proxbundle/data/dataset.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace proxbundle::data::idx {

inline constexpr std::uint32_t kImagesMagic = 0x00000803;  // ubyte, rank 3
inline constexpr std::uint32_t kLabelsMagic = 0x00000801;  // ubyte, rank 1

/// Pixels are scaled to [0, 1] by /255. Errors are FormatErrors naming the byte offset.
std::vector<Image> decode_images(const std::vector<std::uint8_t>& bytes);
std::vector<int> decode_labels(const std::vector<std::uint8_t>& bytes);

/// Pixels are quantized with round(255·clamp(p, 0, 1)); labels must fit in a byte.
std::vector<std::uint8_t> encode_images(const std::vector<Image>& images);
std::vector<std::uint8_t> encode_labels(const std::vector<int>& labels);

/// Reads both files and splits them with stratified_split.
DatasetSplit load_idx(const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path, double test_fraction = 0.2,
                      std::uint64_t seed = 0);

void write_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
               const std::vector<Image>& images, const std::vector<int>& labels);

}  // namespace proxbundle::data::idx
