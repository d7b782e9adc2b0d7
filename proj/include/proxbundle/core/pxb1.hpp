#pragma once

#include "proxbundle/core/matrix.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace proxbundle::pxb1 {

// Layout: "PXB1" | u32 dtype (1 = f64) | u32 rank | rank × u64 dims | row-major payload.
// All integers and payload values little-endian.

inline constexpr std::uint32_t kDtypeF64 = 1;

struct Tensor {
  std::vector<std::uint64_t> dims;
  std::vector<double> data;  // row-major
};

std::vector<std::uint8_t> encode(const Tensor& t);
std::vector<std::uint8_t> encode(const Matrix& m);

/// Throws FormatError on wrong magic, unsupported dtype, or truncation.
Tensor decode(const std::vector<std::uint8_t>& bytes);

/// Accepts rank 1 (read as a column) and rank 2.
Matrix to_matrix(const Tensor& t);

void write(const std::filesystem::path& path, const Matrix& m);
void write(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);
Matrix read(const std::filesystem::path& path);

}  // namespace proxbundle::pxb1
