#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "safe/tensor.hpp"

namespace safe::io {

// On-disk layout of a SAFT container (all integers little-endian):
//   "SAFT" | version:u8 | dtype:u8 | ndim:u8 | ndim x u32 shape | payload
// The payload is row-major, little-endian, with no padding.
enum class DType : std::uint8_t {
  Float32 = 1,
  Float64 = 2,
  Complex64 = 3,
  UInt8 = 4,
  Int32 = 5,
};

inline constexpr std::uint8_t kFormatVersion = 1;

std::size_t dtype_width(DType dtype);
bool is_valid_dtype(std::uint8_t code);

/// Untyped tensor as stored in a container: shape, dtype and raw payload bytes.
struct RawTensor {
  DType dtype = DType::Float32;
  std::vector<std::uint32_t> shape;
  std::vector<std::byte> payload;

  std::size_t element_count() const;

  bool operator==(const RawTensor&) const = default;

  static RawTensor from_float32(std::vector<std::uint32_t> shape,
                                std::span<const float> values);
  static RawTensor from_float64(std::vector<std::uint32_t> shape,
                                std::span<const double> values);
  static RawTensor from_complex64(std::vector<std::uint32_t> shape,
                                  std::span<const std::complex<float>> values);
  static RawTensor from_uint8(std::vector<std::uint32_t> shape,
                              std::span<const std::uint8_t> values);
  static RawTensor from_int32(std::vector<std::uint32_t> shape,
                              std::span<const std::int32_t> values);

  /// Real dtypes widened to double; complex is rejected.
  std::vector<double> to_float64() const;
  std::vector<float> to_float32() const;
  std::vector<std::complex<float>> to_complex64() const;
  std::vector<std::uint8_t> to_uint8() const;
  std::vector<std::int32_t> to_int32() const;
};

std::vector<std::byte> encode(const RawTensor& tensor);
RawTensor decode(std::span<const std::byte> bytes);

/// Creates missing parent directories.
void write_tensor(const std::filesystem::path& path, const RawTensor& tensor);
RawTensor read_tensor(const std::filesystem::path& path);

// Convenience bridges to the numeric Tensor type.
RawTensor to_raw(const Tensor& t, DType dtype = DType::Float64);
Tensor to_tensor(const RawTensor& raw);

void write_tensor(const std::filesystem::path& path, const Tensor& t,
                  DType dtype = DType::Float64);
Tensor read_numeric(const std::filesystem::path& path);

}  // namespace safe::io
