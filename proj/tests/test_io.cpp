#include <gtest/gtest.h>

#include <bit>
#include <cstring>
#include <fstream>

#include "safe/io/config.hpp"
#include "safe/io/seed.hpp"
#include "safe/io/tensor_file.hpp"
#include "test_support.hpp"

namespace safe {
namespace {

using testing::TempDir;
using testing::error_kind_of;

std::vector<std::byte> file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::vector<char> c((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> out(c.size());
  std::memcpy(out.data(), c.data(), c.size());
  return out;
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::byte>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

TEST(TensorFile, ZeroFloat32Layout) {
  TempDir dir;
  const std::vector<float> zeros(4, 0.0f);
  io::write_tensor(dir / "z.saft", io::RawTensor::from_float32({2, 2}, zeros));
  const auto bytes = file_bytes(dir / "z.saft");
  ASSERT_EQ(bytes.size(), 4u + 3u + 8u + 16u);
  EXPECT_EQ(std::memcmp(bytes.data(), "SAFT", 4), 0);
  EXPECT_EQ(bytes[4], std::byte{1});
  EXPECT_EQ(bytes[5], std::byte{1});
  EXPECT_EQ(bytes[6], std::byte{2});
  EXPECT_EQ(bytes[7], std::byte{2});
  EXPECT_EQ(bytes[11], std::byte{2});
  for (std::size_t i = 15; i < bytes.size(); ++i) EXPECT_EQ(bytes[i], std::byte{0});

  const auto back = io::read_tensor(dir / "z.saft");
  EXPECT_EQ(back.dtype, io::DType::Float32);
  EXPECT_EQ(back.shape, (std::vector<std::uint32_t>{2, 2}));
  EXPECT_EQ(back.to_float32(), zeros);
}

TEST(TensorFile, Complex64PayloadIsInterleavedLittleEndian) {
  const std::vector<std::complex<float>> v{{1.0f, -1.0f}};
  const auto bytes = io::encode(io::RawTensor::from_complex64({1, 1}, v));
  const auto payload = std::span(bytes).last(8);
  const auto re = std::bit_cast<std::uint32_t>(1.0f), im = std::bit_cast<std::uint32_t>(-1.0f);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(payload[static_cast<std::size_t>(i)], std::byte((re >> (8 * i)) & 0xff));
    EXPECT_EQ(payload[static_cast<std::size_t>(4 + i)], std::byte((im >> (8 * i)) & 0xff));
  }
}

TEST(TensorFile, RoundTripIsBitExactForAllDtypes) {
  TempDir dir;
  SeedStream seed(11);
  for (int trial = 0; trial < 100; ++trial) {
    SeedStream rng = seed.derive("trial", static_cast<std::uint64_t>(trial));
    const std::vector<std::uint32_t> shape{3, 4, 5};
    io::RawTensor t;
    switch (trial % 5) {
      case 0: {
        std::vector<float> v(60);
        for (auto& x : v) x = static_cast<float>(rng.normal());
        t = io::RawTensor::from_float32(shape, v);
        break;
      }
      case 1: {
        std::vector<double> v(60);
        for (auto& x : v) x = rng.normal() * 1e10;
        t = io::RawTensor::from_float64(shape, v);
        break;
      }
      case 2: {
        std::vector<std::complex<float>> v(60);
        for (auto& x : v) x = {static_cast<float>(rng.normal()), static_cast<float>(rng.normal())};
        t = io::RawTensor::from_complex64(shape, v);
        break;
      }
      case 3: {
        std::vector<std::uint8_t> v(60);
        for (auto& x : v) x = static_cast<std::uint8_t>(rng.below(256));
        t = io::RawTensor::from_uint8(shape, v);
        break;
      }
      default: {
        std::vector<std::int32_t> v(60);
        for (auto& x : v) x = static_cast<std::int32_t>(rng.next_u64());
        t = io::RawTensor::from_int32(shape, v);
        break;
      }
    }
    const auto path = dir / ("t" + std::to_string(trial) + ".saft");
    io::write_tensor(path, t);
    EXPECT_EQ(io::read_tensor(path), t) << "trial " << trial;
  }
}

TEST(TensorFile, NumericBridgeRoundTrip) {
  TempDir dir;
  SeedStream rng(3);
  const Tensor t = testing::random_tensor({3, 4, 5}, rng);
  io::write_tensor(dir / "t.saft", t);
  EXPECT_EQ(io::read_numeric(dir / "t.saft"), t);
}

TEST(TensorFile, DistinctErrorKinds) {
  TempDir dir;
  const auto good = io::encode(io::RawTensor::from_float32({2, 2}, std::vector<float>(4, 0.0f)));

  auto bad_magic = good;
  std::memcpy(bad_magic.data(), "XXXX", 4);
  write_bytes(dir / "magic.saft", bad_magic);
  EXPECT_EQ(error_kind_of([&] { io::read_tensor(dir / "magic.saft"); }), ErrorKind::BadMagic);

  auto truncated = good;
  truncated.resize(truncated.size() - 3);
  write_bytes(dir / "short.saft", truncated);
  EXPECT_EQ(error_kind_of([&] { io::read_tensor(dir / "short.saft"); }), ErrorKind::Truncated);

  auto unknown = good;
  unknown[5] = std::byte{9};
  write_bytes(dir / "dtype.saft", unknown);
  EXPECT_EQ(error_kind_of([&] { io::read_tensor(dir / "dtype.saft"); }), ErrorKind::UnknownDtype);

  EXPECT_EQ(error_kind_of([&] { io::read_tensor(dir / "missing.saft"); }), ErrorKind::Io);
}

TEST(TensorFile, RejectsEmptyShapeAndUnwritablePath) {
  EXPECT_THROW(io::RawTensor::from_float32({}, std::vector<float>{}), Error);
  TempDir dir;
  write_bytes(dir / "file", {});
  const auto one = io::RawTensor::from_uint8({1}, std::vector<std::uint8_t>{1});
  EXPECT_EQ(error_kind_of([&] { io::write_tensor(dir / "file" / "y.saft", one); }), ErrorKind::Io);
}

TEST(TensorFile, WriteCreatesParentDirectories) {
  TempDir dir;
  const auto one = io::RawTensor::from_uint8({1}, std::vector<std::uint8_t>{1});
  io::write_tensor(dir / "a" / "b" / "y.saft", one);
  EXPECT_EQ(io::read_tensor(dir / "a" / "b" / "y.saft"), one);
}

TEST(Config, ParsesValueAndDefaults) {
  const auto cfg = io::parse_config("train.batch_size=64");
  EXPECT_EQ(cfg.get_int("train.batch_size"), 64);
  EXPECT_EQ(io::parse_config(""), io::RunConfig{});
  EXPECT_EQ(io::RunConfig{}.get_int("encoder.token_size"), 8);
  EXPECT_DOUBLE_EQ(io::RunConfig{}.get_real("objective.tau_teacher"), 0.04);
}

TEST(Config, ErrorsAndOverrides) {
  EXPECT_EQ(error_kind_of([] { io::parse_config("train.batch_size=abc"); }), ErrorKind::TypeMismatch);
  EXPECT_EQ(error_kind_of([] { io::parse_config("train.no_such_key=1"); }), ErrorKind::Config);
  EXPECT_EQ(error_kind_of([] { io::parse_config("just some words"); }), ErrorKind::Config);
  const auto cfg = io::parse_config("# comment\n train.epochs = 3 \n\ntrain.epochs=7\naugment.recenter=true\n");
  EXPECT_EQ(cfg.get_int("train.epochs"), 7);
  EXPECT_TRUE(cfg.get_bool("augment.recenter"));
}

TEST(Config, EveryKeyHasADefaultAndTextRoundTrips) {
  io::RunConfig cfg;
  for (const auto& spec : io::RunConfig::schema()) EXPECT_TRUE(cfg.has_key(spec.key)) << spec.key;
  cfg.set("train.lr", "0.000123456789");
  cfg.set("probe.method", "linear");
  EXPECT_EQ(io::parse_config(cfg.to_text()), cfg);
}

TEST(SeedStream, DerivationIsPureAndDeterministic) {
  const SeedStream root(42);
  SeedStream a = root.derive("view", 3), b = root.derive("view", 3);
  for (int i = 0; i < 32; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  SeedStream c = root.derive("view", 3);
  EXPECT_EQ(c.position(), 0u);
}

TEST(SeedStream, DistinctPathsDiffer) {
  const SeedStream root(7);
  const std::vector<SeedStream> streams{root.derive("a"), root.derive("b"), root.derive("a", 1),
                                        root.derive("a").derive("a"), SeedStream(8).derive("a")};
  for (std::size_t i = 0; i < streams.size(); ++i)
    for (std::size_t j = i + 1; j < streams.size(); ++j) {
      SeedStream x = streams[i], y = streams[j];
      bool differs = false;
      for (int k = 0; k < 16; ++k) differs |= x.next_u64() != y.next_u64();
      EXPECT_TRUE(differs) << i << " vs " << j;
    }
}

TEST(SeedStream, UniformAndNormalMoments) {
  SeedStream rng(5);
  const int n = 200000;
  double su = 0.0, sn = 0.0, sn2 = 0.0;
  for (int i = 0; i < n; ++i) {
    su += rng.uniform();
    const double g = rng.normal();
    sn += g;
    sn2 += g * g;
  }
  EXPECT_NEAR(su / n, 0.5, 4 * std::sqrt(1.0 / 12 / n));
  EXPECT_NEAR(sn / n, 0.0, 4 / std::sqrt(n));
  EXPECT_NEAR(sn2 / n, 1.0, 4 * std::sqrt(2.0 / n));
  for (int i = 0; i < 1000; ++i) EXPECT_LT(rng.below(7), 7u);
}

}  // namespace
}  // namespace safe
