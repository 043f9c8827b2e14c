#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>

#include "safe/augment/augment.hpp"
#include "safe/pretrain/pretrain.hpp"
#include "spectral.hpp"
#include "test_support.hpp"

namespace safe {
namespace {

using cd = std::complex<double>;
using spectral::dft2;
using spectral::in_band;
using spectral::white_noise;

augment::TrainingSample sample_patch(std::uint64_t seed) {
  SeedStream rng(seed);
  const auto spec = pretrain::class_scene(seed % 3, 100, 1, rng);
  const auto scene = sar::synthesize_scene(spec, rng.derive("speckle"));
  return pretrain::make_sample(scene.image, sar::BoxcarDespeckler(5));
}

TEST(Shift, ZeroBoundsAreIdentity) {
  SeedStream rng(1);
  const Tensor x = testing::random_tensor({8, 8, 1}, rng, 0.0, 1.0);
  EXPECT_EQ(augment::amplitude_shift(x, {0.0, 0.0}, rng), x);
}

TEST(Shift, ConstantPatchShiftsUniformly) {
  const Tensor y = augment::shift_by(Tensor({4, 4, 1}, 0.5), 0.2);
  for (double v : y.values()) EXPECT_NEAR(v, 0.7, 1e-15);
}

TEST(Shift, OneDrawPerViewAndClipped) {
  SeedStream rng(2);
  const Tensor x = testing::random_tensor({16, 16, 1}, rng, 0.0, 1.0);
  const Tensor y = augment::amplitude_shift(x, {0.0, 0.3}, rng);
  double b = -1.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_GE(y[i], 0.0);
    EXPECT_LE(y[i], 1.0);
    if (y[i] < 1.0) {
      if (b < 0.0) b = y[i] - x[i];
      EXPECT_NEAR(y[i] - x[i], b, 1e-12);
    }
  }
}

TEST(Shift, MeanOfDrawsMatchesUniformLaw) {
  SeedStream rng(3);
  const Tensor zero({1}, 0.0);
  const int n = 10000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += augment::amplitude_shift(zero, {0.0, 0.3}, rng)[0];
  const double se = 0.3 / std::sqrt(12.0) / std::sqrt(double(n));
  EXPECT_LT(std::abs(sum / n - 0.15), 3.0 * se);
}

TEST(Shift, RejectsLargeBounds) {
  SeedStream rng(1);
  EXPECT_THROW(augment::amplitude_shift(Tensor({1}), {0.0, 0.6}, rng), Error);
  EXPECT_THROW(augment::amplitude_shift(Tensor({1}), {0.2, 0.1}, rng), Error);
}

TEST(Crop, FullSizeIsIdentityAndTooLargeFails) {
  SeedStream rng(4);
  const Tensor x = testing::random_tensor({10, 10, 2}, rng);
  EXPECT_EQ(augment::random_crop(x, 10, rng), x);
  EXPECT_THROW(augment::random_crop(x, 11, rng), Error);
}

TEST(Crop, OffsetsAreUniform) {
  SeedStream rng(5);
  const Tensor x({100, 100, 1});
  const std::size_t cells = 37 * 37;
  const int draws = 10000;
  std::vector<int> counts(cells, 0);
  for (int i = 0; i < draws; ++i) {
    augment::CropOffset at;
    augment::random_crop(x, 64, rng, &at);
    ASSERT_LE(at.row, 36u);
    ASSERT_LE(at.col, 36u);
    ++counts[at.row * 37 + at.col];
  }
  const double expected = double(draws) / double(cells);
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  // 1368 degrees of freedom: mean 1368, sd about 52.3; reject beyond 4 sd.
  EXPECT_LT(chi2, 1368.0 + 4.0 * 52.3);
}

TEST(Crop, DeterministicAndContiguous) {
  SeedStream rng(6);
  const Tensor x = testing::random_tensor({20, 30, 1}, rng);
  SeedStream a(9), b(9);
  augment::CropOffset at;
  const Tensor ca = augment::random_crop(x, 7, a, &at);
  EXPECT_EQ(ca, augment::random_crop(x, 7, b));
  for (std::size_t y = 0; y < 7; ++y)
    for (std::size_t c = 0; c < 7; ++c) EXPECT_EQ(ca[y * 7 + c], x[(at.row + y) * 30 + at.col + c]);
}

TEST(SubAperture, FullBandIsIdentity) {
  const auto s = sample_patch(1);
  const auto out = augment::subaperture_decompose(s.slc, {1.0, 1.0, false});
  ASSERT_EQ(out.samples.size(), s.slc.samples.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < out.samples.size(); ++i) worst = std::max(worst, double(std::abs(out.samples[i] - s.slc.samples[i])));
  EXPECT_LT(worst, 1e-5);
}

TEST(SubAperture, ReducesHundredToThirtyTwo) {
  const auto out = augment::subaperture_decompose(sample_patch(2).slc, {0.32, 0.32, false});
  EXPECT_EQ(out.height, 32u);
  EXPECT_EQ(out.width, 32u);
  EXPECT_NEAR(out.range_resolution_m, 1.0 / 0.32, 1e-12);
}

TEST(SubAperture, EnergyMatchesKeptSpectrum) {
  SeedStream rng(7);
  const auto in = white_noise(100, 100, rng);
  const auto out = augment::subaperture_plane(in, {0.5, 0.5, false});
  ASSERT_EQ(out.height, 50u);
  const auto X = dft2(in);
  double kept = 0.0, total = 0.0;
  std::size_t bins = 0;
  for (std::size_t u = 0; u < 100; ++u)
    for (std::size_t v = 0; v < 100; ++v) {
      const double e = std::norm(X[u * 100 + v]);
      total += e;
      if (in_band(u, 100, 50) && in_band(v, 100, 50)) {
        kept += e;
        ++bins;
      }
    }
  EXPECT_EQ(bins, 2500u);
  double e_in = 0.0, e_out = 0.0;
  for (auto z : in.data) e_in += std::norm(z);
  for (auto z : out.data) e_out += std::norm(z);
  EXPECT_LT(testing::rel_error(e_in, total / 1e4), 1e-6);
  EXPECT_LT(testing::rel_error(e_out / e_in, kept / total), 1e-6);
}

TEST(SubAperture, IsLinear) {
  SeedStream rng(8);
  auto x = white_noise(64, 48, rng), y = white_noise(64, 48, rng);
  augment::ComplexPlane<float> xf{64, 48, {}}, yf{64, 48, {}}, mix{64, 48, {}};
  const float alpha = 0.7f, beta = -1.3f;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    xf.data.emplace_back(x.data[i]);
    yf.data.emplace_back(y.data[i]);
    mix.data.push_back(alpha * xf.data[i] + beta * yf.data[i]);
  }
  const augment::SubApertureParams p{0.4, 0.6, false};
  const auto ox = augment::subaperture_plane(xf, p), oy = augment::subaperture_plane(yf, p);
  const auto om = augment::subaperture_plane(mix, p);
  double err = 0.0, norm = 0.0;
  for (std::size_t i = 0; i < om.data.size(); ++i) {
    err += std::norm(om.data[i] - (alpha * ox.data[i] + beta * oy.data[i]));
    norm += std::norm(om.data[i]);
  }
  EXPECT_LT(std::sqrt(err / norm), 1e-5);
}

TEST(SubAperture, RecenteringFollowsSpectralCentroid) {
  // A pure tone 10 range bins off centre lies outside a 16-bin band unless
  // the band is moved onto the spectral centroid.
  augment::ComplexPlane<double> tone{64, 64, std::vector<cd>(64 * 64)};
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) tone.data[y * 64 + x] = std::polar(1.0, 2.0 * std::numbers::pi * 10.0 * double(x) / 64.0);
  const auto plain = augment::subaperture_plane(tone, {0.25, 0.25, false});
  const auto rec = augment::subaperture_plane(tone, {0.25, 0.25, true});
  double e_in = 0.0, e_plain = 0.0, e_rec = 0.0;
  for (auto z : tone.data) e_in += std::norm(z);
  for (auto z : plain.data) e_plain += std::norm(z);
  for (auto z : rec.data) e_rec += std::norm(z);
  EXPECT_LT(e_plain, 1e-12 * e_in);
  EXPECT_NEAR(e_rec, e_in, 1e-9 * e_in);
}

TEST(SubAperture, RejectsBadRho) {
  SeedStream rng(1);
  const auto in = white_noise(20, 20, rng);
  EXPECT_THROW(augment::subaperture_plane(in, {0.0, 0.5, false}), Error);
  EXPECT_THROW(augment::subaperture_plane(in, {1.5, 0.5, false}), Error);
  EXPECT_THROW(augment::subaperture_plane(in, {0.1, 0.5, false}), Error);
}

TEST(SourceBin, CentredBandLayout) {
  EXPECT_EQ(augment::source_bin(0, 4, 10, 0), 0u);
  EXPECT_EQ(augment::source_bin(1, 4, 10, 0), 1u);
  EXPECT_EQ(augment::source_bin(2, 4, 10, 0), 8u);
  EXPECT_EQ(augment::source_bin(3, 4, 10, 0), 9u);
  EXPECT_EQ(augment::source_bin(0, 4, 10, 3), 3u);
  EXPECT_EQ(augment::source_bin(2, 4, 10, 1), 9u);
}

TEST(Views, DefaultPolicyShapes) {
  const auto s = sample_patch(3);
  const auto b = augment::make_views(s, augment::ViewPolicy{}, SeedStream(1));
  EXPECT_EQ(b.teacher_view.shape(), (Shape{64, 64, 1}));
  ASSERT_EQ(b.student_views.size(), 5u);
  const std::size_t sizes[] = {64, 64, 32, 32, 32};
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(b.student_views[i].shape(), (Shape{sizes[i], sizes[i], 1}));
    for (double v : b.student_views[i].values()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
}

TEST(Views, QSubZeroUsesSpatialCrops) {
  augment::ViewPolicy p;
  p.q_sub = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto b = augment::make_views(sample_patch(4), p, SeedStream(seed));
    for (bool sub : b.subaperture_view) EXPECT_FALSE(sub);
  }
}

TEST(Views, QSubOneComposesSubAperture) {
  const auto s = sample_patch(5);
  augment::ViewPolicy p;
  p.q_sub = 1.0;
  const SeedStream seed(42);
  const auto b = augment::make_views(s, p, seed);
  const Tensor direct = sar::normalize_amplitude(sar::amplitude(augment::subaperture_decompose(s.slc, p.subaperture)), s.norm);
  for (std::size_t j = 0; j < p.n_local; ++j) {
    EXPECT_TRUE(b.subaperture_view[p.n_global + j]);
    SeedStream rng = seed.derive("local", j);
    rng.uniform();
    EXPECT_EQ(b.student_views[p.n_global + j], augment::amplitude_shift(direct, p.shift, rng));
  }
  p.shift = {0.0, 0.0};
  const auto unshifted = augment::make_views(s, p, seed);
  EXPECT_EQ(unshifted.student_views.back(), direct);
}

TEST(Views, TeacherIsDespeckledCrop) {
  const auto s = sample_patch(6);
  const SeedStream seed(3);
  const auto b = augment::make_views(s, augment::ViewPolicy{}, seed);
  SeedStream rng = seed.derive("teacher");
  EXPECT_EQ(b.teacher_view, augment::random_crop(sar::normalize_amplitude(s.despeckled, s.norm), 64, rng));
}

TEST(Views, DeterministicPerSeed) {
  const auto s = sample_patch(7);
  const auto a = augment::make_views(s, augment::ViewPolicy{}, SeedStream(8));
  const auto b = augment::make_views(s, augment::ViewPolicy{}, SeedStream(8));
  const auto c = augment::make_views(s, augment::ViewPolicy{}, SeedStream(9));
  EXPECT_EQ(a.student_views, b.student_views);
  EXPECT_EQ(a.teacher_view, b.teacher_view);
  EXPECT_NE(a.student_views, c.student_views);
}

TEST(Views, MissingDespeckledTwinIsDataError) {
  auto s = sample_patch(8);
  s.despeckled = Tensor();
  EXPECT_EQ(testing::error_kind_of([&] { augment::make_views(s, augment::ViewPolicy{}, SeedStream(1)); }),
            ErrorKind::Data);
}

}  // namespace
}  // namespace safe
