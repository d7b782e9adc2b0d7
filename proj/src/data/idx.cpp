#include "proxbundle/data/idx.hpp"

#include "proxbundle/core/file_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

namespace proxbundle::data::idx {

namespace {

std::uint32_t read_be32(const std::vector<std::uint8_t>& in, std::size_t offset, const char* what) {
  if (offset + 4 > in.size()) {
    throw FormatError(std::string("idx: truncated ") + what + " at byte offset " +
                      std::to_string(offset) + " (file has " + std::to_string(in.size()) + " bytes)");
  }
  return (std::uint32_t{in[offset]} << 24) | (std::uint32_t{in[offset + 1]} << 16) |
         (std::uint32_t{in[offset + 2]} << 8) | std::uint32_t{in[offset + 3]};
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void expect_magic(const std::vector<std::uint8_t>& in, std::uint32_t expected, const char* kind) {
  const std::uint32_t magic = read_be32(in, 0, "magic");
  if (magic != expected) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "idx %s: bad magic 0x%08x at byte offset 0 (expected 0x%08x)",
                  kind, magic, expected);
    throw FormatError(buf);
  }
}

void expect_payload(const std::vector<std::uint8_t>& in, std::size_t header, std::size_t payload,
                    const char* kind) {
  if (in.size() < header + payload) {
    throw FormatError(std::string("idx ") + kind + ": truncated payload at byte offset " +
                      std::to_string(in.size()) + " (expected " + std::to_string(header + payload) +
                      " bytes)");
  }
  if (in.size() > header + payload) {
    throw FormatError(std::string("idx ") + kind + ": trailing bytes at byte offset " +
                      std::to_string(header + payload));
  }
}

}  // namespace

std::vector<Image> decode_images(const std::vector<std::uint8_t>& bytes) {
  expect_magic(bytes, kImagesMagic, "images");
  const std::size_t n = read_be32(bytes, 4, "image count");
  const Index rows = read_be32(bytes, 8, "row count");
  const Index cols = read_be32(bytes, 12, "column count");
  const std::size_t per = static_cast<std::size_t>(rows * cols);
  expect_payload(bytes, 16, n * per, "images");
  std::vector<Image> out;
  out.reserve(n);
  std::size_t at = 16;
  for (std::size_t i = 0; i < n; ++i) {
    Image img(rows, cols);
    for (double& px : img.pixels) px = static_cast<double>(bytes[at++]) / 255.0;
    out.push_back(std::move(img));
  }
  return out;
}

std::vector<int> decode_labels(const std::vector<std::uint8_t>& bytes) {
  expect_magic(bytes, kLabelsMagic, "labels");
  const std::size_t n = read_be32(bytes, 4, "label count");
  expect_payload(bytes, 8, n, "labels");
  return {bytes.begin() + 8, bytes.end()};
}

std::vector<std::uint8_t> encode_images(const std::vector<Image>& images) {
  std::vector<std::uint8_t> out;
  put_be32(out, kImagesMagic);
  put_be32(out, static_cast<std::uint32_t>(images.size()));
  const Index rows = images.empty() ? 0 : images.front().height;
  const Index cols = images.empty() ? 0 : images.front().width;
  put_be32(out, static_cast<std::uint32_t>(rows));
  put_be32(out, static_cast<std::uint32_t>(cols));
  for (const Image& img : images) {
    if (img.height != rows || img.width != cols || img.channels != 1) {
      throw UsageError("idx: images must share one single-channel size");
    }
    for (double px : img.pixels) {
      out.push_back(static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(px, 0.0, 1.0))));
    }
  }
  return out;
}

std::vector<std::uint8_t> encode_labels(const std::vector<int>& labels) {
  std::vector<std::uint8_t> out;
  put_be32(out, kLabelsMagic);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) {
    if (l < 0 || l > 255) throw UsageError("idx: label " + std::to_string(l) + " does not fit a byte");
    out.push_back(static_cast<std::uint8_t>(l));
  }
  return out;
}

DatasetSplit load_idx(const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path, double test_fraction,
                      std::uint64_t seed) {
  DatasetSplit split;
  try {
    split.images = decode_images(io::read_bytes(images_path));
  } catch (const FormatError& e) {
    throw FormatError(images_path.string() + ": " + e.what());
  }
  try {
    split.labels = decode_labels(io::read_bytes(labels_path));
  } catch (const FormatError& e) {
    throw FormatError(labels_path.string() + ": " + e.what());
  }
  if (split.images.size() != split.labels.size()) {
    throw FormatError("idx: " + std::to_string(split.images.size()) + " images but " +
                      std::to_string(split.labels.size()) + " labels (count at byte offset 4)");
  }
  stratified_split(split, test_fraction, seed);
  return split;
}

void write_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
               const std::vector<Image>& images, const std::vector<int>& labels) {
  if (images.size() != labels.size()) throw UsageError("idx: image and label counts differ");
  io::write_bytes(images_path, encode_images(images));
  io::write_bytes(labels_path, encode_labels(labels));
}

}  // namespace proxbundle::data::idx
