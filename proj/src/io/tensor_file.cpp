#include "safe/io/tensor_file.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "safe/error.hpp"

namespace safe::io {
namespace {

constexpr char kMagic[4] = {'S', 'A', 'F', 'T'};
constexpr std::size_t kFixedHeader = 7;

template <typename U>
void put_le(std::vector<std::byte>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<std::byte>((value >> (8 * i)) & 0xFF));
  }
}

template <typename U>
U get_le(const std::byte* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    v |= static_cast<U>(std::to_integer<U>(p[i])) << (8 * i);
  }
  return v;
}

// Scalars are serialized through their unsigned bit pattern so the byte
// order is fixed regardless of the host.
template <typename T>
void encode_scalars(std::span<const T> values, std::vector<std::byte>& out) {
  out.reserve(out.size() + values.size() * sizeof(T));
  for (T v : values) {
    if constexpr (sizeof(T) == 1) {
      out.push_back(static_cast<std::byte>(v));
    } else if constexpr (sizeof(T) == 4) {
      put_le(out, std::bit_cast<std::uint32_t>(v));
    } else {
      put_le(out, std::bit_cast<std::uint64_t>(v));
    }
  }
}

template <typename T>
std::vector<T> decode_scalars(const std::vector<std::byte>& payload) {
  std::vector<T> out(payload.size() / sizeof(T));
  const std::byte* p = payload.data();
  for (std::size_t i = 0; i < out.size(); ++i, p += sizeof(T)) {
    if constexpr (sizeof(T) == 1) {
      out[i] = static_cast<T>(std::to_integer<std::uint8_t>(*p));
    } else if constexpr (sizeof(T) == 4) {
      out[i] = std::bit_cast<T>(get_le<std::uint32_t>(p));
    } else {
      out[i] = std::bit_cast<T>(get_le<std::uint64_t>(p));
    }
  }
  return out;
}

void check_shape(const std::vector<std::uint32_t>& shape) {
  require(!shape.empty() && shape.size() <= 4,
          "tensor rank must be in [1,4], got " + std::to_string(shape.size()));
}

template <typename T>
RawTensor make(DType dtype, std::vector<std::uint32_t> shape, std::span<const T> values,
               std::size_t per_element = 1) {
  check_shape(shape);
  RawTensor t;
  t.dtype = dtype;
  t.shape = std::move(shape);
  require(values.size() == t.element_count() * per_element,
          "value count does not match shape", ErrorKind::ShapeMismatch);
  encode_scalars(values, t.payload);
  return t;
}

void expect(const RawTensor& t, DType dtype) {
  require(t.dtype == dtype,
          "tensor dtype " + std::to_string(static_cast<int>(t.dtype)) +
              " does not match requested " + std::to_string(static_cast<int>(dtype)),
          ErrorKind::TypeMismatch);
}

}  // namespace

std::size_t dtype_width(DType dtype) {
  switch (dtype) {
    case DType::Float32: return 4;
    case DType::Float64: return 8;
    case DType::Complex64: return 8;
    case DType::UInt8: return 1;
    case DType::Int32: return 4;
  }
  fail(ErrorKind::UnknownDtype, "unsupported dtype");
}

bool is_valid_dtype(std::uint8_t code) { return code >= 1 && code <= 5; }

std::size_t RawTensor::element_count() const {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

RawTensor RawTensor::from_float32(std::vector<std::uint32_t> shape,
                                  std::span<const float> values) {
  return make(DType::Float32, std::move(shape), values);
}

RawTensor RawTensor::from_float64(std::vector<std::uint32_t> shape,
                                  std::span<const double> values) {
  return make(DType::Float64, std::move(shape), values);
}

RawTensor RawTensor::from_complex64(std::vector<std::uint32_t> shape,
                                    std::span<const std::complex<float>> values) {
  std::span<const float> interleaved(reinterpret_cast<const float*>(values.data()),
                                     values.size() * 2);
  return make(DType::Complex64, std::move(shape), interleaved, 2);
}

RawTensor RawTensor::from_uint8(std::vector<std::uint32_t> shape,
                                std::span<const std::uint8_t> values) {
  return make(DType::UInt8, std::move(shape), values);
}

RawTensor RawTensor::from_int32(std::vector<std::uint32_t> shape,
                                std::span<const std::int32_t> values) {
  return make(DType::Int32, std::move(shape), values);
}

std::vector<double> RawTensor::to_float64() const {
  switch (dtype) {
    case DType::Float64: return decode_scalars<double>(payload);
    case DType::Float32: {
      auto f = decode_scalars<float>(payload);
      return {f.begin(), f.end()};
    }
    case DType::UInt8: {
      auto u = decode_scalars<std::uint8_t>(payload);
      return {u.begin(), u.end()};
    }
    case DType::Int32: {
      auto u = decode_scalars<std::int32_t>(payload);
      return {u.begin(), u.end()};
    }
    case DType::Complex64: break;
  }
  fail(ErrorKind::TypeMismatch, "complex tensor cannot be read as real values");
}

std::vector<float> RawTensor::to_float32() const {
  if (dtype == DType::Float32) return decode_scalars<float>(payload);
  auto d = to_float64();
  return {d.begin(), d.end()};
}

std::vector<std::complex<float>> RawTensor::to_complex64() const {
  expect(*this, DType::Complex64);
  auto f = decode_scalars<float>(payload);
  std::vector<std::complex<float>> out(f.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {f[2 * i], f[2 * i + 1]};
  return out;
}

std::vector<std::uint8_t> RawTensor::to_uint8() const {
  expect(*this, DType::UInt8);
  return decode_scalars<std::uint8_t>(payload);
}

std::vector<std::int32_t> RawTensor::to_int32() const {
  if (dtype == DType::UInt8) {
    auto u = decode_scalars<std::uint8_t>(payload);
    return {u.begin(), u.end()};
  }
  expect(*this, DType::Int32);
  return decode_scalars<std::int32_t>(payload);
}

std::vector<std::byte> encode(const RawTensor& tensor) {
  check_shape(tensor.shape);
  require(tensor.payload.size() == tensor.element_count() * dtype_width(tensor.dtype),
          "payload size does not match shape", ErrorKind::ShapeMismatch);
  std::vector<std::byte> out;
  out.reserve(kFixedHeader + 4 * tensor.shape.size() + tensor.payload.size());
  for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
  out.push_back(static_cast<std::byte>(kFormatVersion));
  out.push_back(static_cast<std::byte>(tensor.dtype));
  out.push_back(static_cast<std::byte>(tensor.shape.size()));
  for (auto s : tensor.shape) put_le(out, s);
  out.insert(out.end(), tensor.payload.begin(), tensor.payload.end());
  return out;
}

RawTensor decode(std::span<const std::byte> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    fail(ErrorKind::BadMagic, "not a SAFT container (bad magic)");
  }
  if (bytes.size() < kFixedHeader) fail(ErrorKind::Truncated, "truncated SAFT header");
  const auto version = std::to_integer<std::uint8_t>(bytes[4]);
  require(version == kFormatVersion,
          "unsupported SAFT version " + std::to_string(version), ErrorKind::Data);
  const auto code = std::to_integer<std::uint8_t>(bytes[5]);
  if (!is_valid_dtype(code)) {
    fail(ErrorKind::UnknownDtype, "unknown dtype code " + std::to_string(code));
  }
  const auto ndim = std::to_integer<std::uint8_t>(bytes[6]);
  require(ndim >= 1 && ndim <= 4, "SAFT rank must be in [1,4]", ErrorKind::Data);
  if (bytes.size() < kFixedHeader + 4u * ndim) fail(ErrorKind::Truncated, "truncated SAFT shape");

  RawTensor t;
  t.dtype = static_cast<DType>(code);
  for (std::size_t i = 0; i < ndim; ++i) {
    t.shape.push_back(get_le<std::uint32_t>(bytes.data() + kFixedHeader + 4 * i));
  }
  const std::size_t offset = kFixedHeader + 4u * ndim;
  const std::size_t expected = t.element_count() * dtype_width(t.dtype);
  if (bytes.size() - offset < expected) {
    fail(ErrorKind::Truncated, "SAFT payload truncated: expected " + std::to_string(expected) +
                                   " bytes, found " + std::to_string(bytes.size() - offset));
  }
  require(bytes.size() - offset == expected, "trailing bytes after SAFT payload",
          ErrorKind::Data);
  t.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end());
  return t;
}

void write_tensor(const std::filesystem::path& path, const RawTensor& tensor) {
  const auto bytes = encode(tensor);
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::Io, "write failed: " + path.string());
}

RawTensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open for reading: " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode({reinterpret_cast<const std::byte*>(buf.data()), buf.size()});
}

RawTensor to_raw(const Tensor& t, DType dtype) {
  std::vector<std::uint32_t> shape(t.shape().begin(), t.shape().end());
  switch (dtype) {
    case DType::Float64: return RawTensor::from_float64(shape, t.values());
    case DType::Float32: {
      std::vector<float> f(t.values().begin(), t.values().end());
      return RawTensor::from_float32(shape, f);
    }
    case DType::UInt8: {
      std::vector<std::uint8_t> u(t.size());
      for (std::size_t i = 0; i < t.size(); ++i) u[i] = static_cast<std::uint8_t>(t[i]);
      return RawTensor::from_uint8(shape, u);
    }
    case DType::Int32: {
      std::vector<std::int32_t> u(t.size());
      for (std::size_t i = 0; i < t.size(); ++i) u[i] = static_cast<std::int32_t>(t[i]);
      return RawTensor::from_int32(shape, u);
    }
    case DType::Complex64: break;
  }
  fail(ErrorKind::TypeMismatch, "real tensor cannot be stored as complex64");
}

Tensor to_tensor(const RawTensor& raw) {
  return Tensor(Shape(raw.shape.begin(), raw.shape.end()), raw.to_float64());
}

void write_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype) {
  write_tensor(path, to_raw(t, dtype));
}

Tensor read_numeric(const std::filesystem::path& path) { return to_tensor(read_tensor(path)); }

}  // namespace safe::io
