#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "safe/probe/probe.hpp"
#include "safe/tensor.hpp"

namespace safe::detection {

/// <a,b> / sqrt(<a,a><b,b>); throws for a zero vector.
double cosine_similarity(const Tensor& a, const Tensor& b);

struct DetectionMap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Tensor scores;                    // {rows, cols}, in [-1, 1]
  std::vector<std::uint8_t> mask;   // 1 where score >= threshold
  double threshold = 0.8;           // after clamping to <= 1
};

/// Keeps cells whose score is >= threshold; the threshold is clamped to 1.
DetectionMap threshold_scores(const Tensor& scores, double threshold);

/// Cosine similarity of every cell of a padded P x P, stride-S feature grid
/// over `image` to the features of `reference` (centre-cropped to P).
DetectionMap detect_pattern(const probe::FeatureExtractor& extractor, const Tensor& image, const Tensor& reference,
                            double threshold, std::size_t patch, std::size_t stride);

}  // namespace safe::detection
