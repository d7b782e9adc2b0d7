#include "proxbundle/core/pxb1.hpp"

#include "proxbundle/core/file_io.hpp"

#include <bit>
#include <cstring>

namespace proxbundle::pxb1 {

namespace {

constexpr std::uint8_t kMagic[4] = {0x50, 0x58, 0x42, 0x31};

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xffu));
  }
}

template <typename T>
T get_le(const std::vector<std::uint8_t>& in, std::size_t& offset, const char* what) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  if (in.size() < offset + sizeof(U)) {
    throw FormatError(std::string("PXB1: truncated ") + what + " at byte offset " +
                      std::to_string(offset));
  }
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bits |= static_cast<U>(in[offset + i]) << (8 * i);
  }
  offset += sizeof(U);
  return std::bit_cast<T>(bits);
}

}  // namespace

std::vector<std::uint8_t> encode(const Tensor& t) {
  std::uint64_t count = 1;
  for (auto d : t.dims) count *= d;
  if (count != t.data.size()) {
    throw DimensionError("PXB1 encode: dims describe " + std::to_string(count) +
                         " values, payload has " + std::to_string(t.data.size()));
  }
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  out.reserve(12 + 8 * t.dims.size() + 8 * t.data.size());
  put_le<std::uint32_t>(out, kDtypeF64);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
  for (auto d : t.dims) put_le<std::uint64_t>(out, d);
  for (double v : t.data) put_le<double>(out, v);
  return out;
}

std::vector<std::uint8_t> encode(const Matrix& m) {
  Tensor t;
  t.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  t.data.reserve(static_cast<std::size_t>(m.size()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) t.data.push_back(m(i, j));
  return encode(t);
}

Tensor decode(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("PXB1: bad magic at byte offset 0");
  }
  std::size_t offset = 4;
  const auto dtype = get_le<std::uint32_t>(bytes, offset, "dtype");
  if (dtype != kDtypeF64) {
    throw FormatError("PXB1: unsupported dtype " + std::to_string(dtype) + " at byte offset 4");
  }
  const auto rank = get_le<std::uint32_t>(bytes, offset, "rank");
  Tensor t;
  std::uint64_t count = 1;
  for (std::uint32_t r = 0; r < rank; ++r) {
    t.dims.push_back(get_le<std::uint64_t>(bytes, offset, "dims"));
    count *= t.dims.back();
  }
  const std::size_t remaining = bytes.size() - offset;
  if (count > remaining / 8) {
    throw FormatError("PXB1: truncated payload at byte offset " + std::to_string(offset) +
                      ": need " + std::to_string(count * 8) + " bytes, have " +
                      std::to_string(remaining));
  }
  t.data.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) t.data.push_back(get_le<double>(bytes, offset, "payload"));
  return t;
}

Matrix to_matrix(const Tensor& t) {
  if (t.dims.empty() || t.dims.size() > 2) {
    throw FormatError("PXB1: expected rank 1 or 2, got rank " + std::to_string(t.dims.size()));
  }
  const auto rows = static_cast<Index>(t.dims[0]);
  const auto cols = t.dims.size() == 2 ? static_cast<Index>(t.dims[1]) : Index{1};
  Matrix m(rows, cols);
  std::size_t k = 0;
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = t.data[k++];
  return m;
}

void write(const std::filesystem::path& path, const Matrix& m) { io::write_bytes(path, encode(m)); }

void write(const std::filesystem::path& path, const Tensor& t) { io::write_bytes(path, encode(t)); }

Tensor read_tensor(const std::filesystem::path& path) { return decode(io::read_bytes(path)); }

Matrix read(const std::filesystem::path& path) { return to_matrix(read_tensor(path)); }

}  // namespace proxbundle::pxb1
