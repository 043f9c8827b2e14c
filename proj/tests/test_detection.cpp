#include <gtest/gtest.h>

#include "safe/detection/detection.hpp"
#include "safe/sar/sar.hpp"
#include "test_support.hpp"

namespace safe {
namespace {

probe::FeatureExtractor tiny_extractor() {
  const encoder::EncoderConfig cfg{8, 16, 2, 2, 2, 1};
  return probe::FeatureExtractor(encoder::EncoderModel{encoder::Encoder(cfg), encoder::init_encoder(cfg, SeedStream(5))});
}

Tensor crop(const Tensor& img, std::size_t r0, std::size_t c0, std::size_t size) {
  Tensor out({size, size, img.dim(2)});
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x)
      for (std::size_t c = 0; c < img.dim(2); ++c)
        out[(y * size + x) * img.dim(2) + c] = img[((r0 + y) * img.dim(1) + c0 + x) * img.dim(2) + c];
  return out;
}

TEST(Cosine, Examples) {
  const Tensor a({3}, std::vector<double>{1, 2, -1}), b({3}, std::vector<double>{2, -1, 0});
  EXPECT_NEAR(detection::cosine_similarity(a, a), 1.0, 1e-15);
  EXPECT_NEAR(detection::cosine_similarity(a, b), 0.0, 1e-15);
  Tensor neg = a;
  for (auto& v : neg.storage()) v = -v;
  EXPECT_NEAR(detection::cosine_similarity(a, neg), -1.0, 1e-15);
  EXPECT_EQ(testing::error_kind_of([&] { detection::cosine_similarity(a, Tensor({3})); }), ErrorKind::Numerical);
}

TEST(Cosine, SymmetricAndScaleInvariant) {
  SeedStream rng(1);
  for (int i = 0; i < 50; ++i) {
    const Tensor a = testing::random_tensor({7}, rng), b = testing::random_tensor({7}, rng);
    Tensor b3 = b;
    for (auto& v : b3.storage()) v *= 3.7;
    const double c = detection::cosine_similarity(a, b);
    EXPECT_EQ(c, detection::cosine_similarity(b, a));
    EXPECT_NEAR(c, detection::cosine_similarity(a, b3), 1e-14);
    EXPECT_GE(c, -1.0);
    EXPECT_LE(c, 1.0);
  }
}

TEST(Threshold, ClampedAndMonotone) {
  SeedStream rng(2);
  Tensor scores = testing::random_tensor({6, 7}, rng);
  scores[10] = 1.0;
  const auto above = detection::threshold_scores(scores, 1.5);
  EXPECT_EQ(above.threshold, 1.0);
  for (std::size_t i = 0; i < scores.size(); ++i) EXPECT_EQ(above.mask[i], i == 10 ? 1 : 0);
  std::vector<std::uint8_t> prev(scores.size(), 1);
  for (double t : {-1.0, -0.5, 0.0, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0}) {
    const auto m = detection::threshold_scores(scores, t);
    for (std::size_t i = 0; i < scores.size(); ++i) {
      EXPECT_LE(m.mask[i], prev[i]);
      EXPECT_EQ(m.mask[i] == 1, scores[i] >= m.threshold);
    }
    prev = m.mask;
  }
}

TEST(Detect, SelfMatchIsRetained) {
  const auto fx = tiny_extractor();
  SeedStream rng(3);
  const Tensor img = testing::random_tensor({64, 64, 1}, rng, 0, 1);
  const std::size_t P = 16, S = 8;
  const std::size_t cell_r = 3, cell_c = 4;
  const auto r0 = sar::padded_origin(cell_r, P, S), c0 = sar::padded_origin(cell_c, P, S);
  const Tensor ref = crop(img, static_cast<std::size_t>(r0), static_cast<std::size_t>(c0), P);
  const auto map = detection::detect_pattern(fx, img, ref, 0.8, P, S);
  EXPECT_EQ(map.rows, 8u);
  EXPECT_EQ(map.cols, 8u);
  EXPECT_NEAR(map.scores(cell_r, cell_c), 1.0, 1e-12);
  EXPECT_EQ(map.mask[cell_r * map.cols + cell_c], 1);
}

TEST(Detect, DeterministicAndReferenceTooSmall) {
  const auto fx = tiny_extractor();
  SeedStream rng(4);
  const Tensor img = testing::random_tensor({48, 48, 1}, rng, 0, 1);
  const Tensor ref = crop(img, 8, 8, 16);
  const auto a = detection::detect_pattern(fx, img, ref, 0.5, 16, 8);
  const auto b = detection::detect_pattern(fx, img, ref, 0.5, 16, 8);
  EXPECT_EQ(a.scores, b.scores);
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_EQ(testing::error_kind_of([&] { detection::detect_pattern(fx, img, crop(img, 0, 0, 8), 0.8, 16, 8); }),
            ErrorKind::ShapeMismatch);
}

TEST(Detect, LargerReferenceIsCentreCropped) {
  const auto fx = tiny_extractor();
  SeedStream rng(5);
  const Tensor img = testing::random_tensor({48, 48, 1}, rng, 0, 1);
  const auto a = detection::detect_pattern(fx, img, crop(img, 10, 10, 24), 0.8, 16, 8);
  const auto b = detection::detect_pattern(fx, img, crop(img, 14, 14, 16), 0.8, 16, 8);
  EXPECT_EQ(a.scores, b.scores);
}

}  // namespace
}  // namespace safe
