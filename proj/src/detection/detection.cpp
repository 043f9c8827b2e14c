#include "safe/detection/detection.hpp"

#include <algorithm>
#include <cmath>

#include "safe/error.hpp"

namespace safe::detection {

namespace {

double cosine(const double* a, const double* b, std::size_t n) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  require(aa > 0.0 && bb > 0.0, "cosine similarity of a zero vector", ErrorKind::Numerical);
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

}  // namespace

double cosine_similarity(const Tensor& a, const Tensor& b) {
  require(a.size() == b.size() && a.size() > 0, "cosine similarity needs equal-length vectors",
          ErrorKind::ShapeMismatch);
  return cosine(a.data(), b.data(), a.size());
}

DetectionMap threshold_scores(const Tensor& scores, double threshold) {
  require(scores.ndim() == 2, "score grid must be {rows, cols}", ErrorKind::ShapeMismatch);
  DetectionMap m;
  m.rows = scores.dim(0);
  m.cols = scores.dim(1);
  m.scores = scores;
  m.threshold = std::min(threshold, 1.0);
  m.mask.resize(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) m.mask[i] = scores[i] >= m.threshold ? 1 : 0;
  return m;
}

DetectionMap detect_pattern(const probe::FeatureExtractor& extractor, const Tensor& image, const Tensor& reference,
                            double threshold, std::size_t patch, std::size_t stride) {
  require(reference.ndim() == 3 && image.ndim() == 3 && reference.dim(2) == image.dim(2),
          "reference and image must be {h,w,C} with equal channels", ErrorKind::ShapeMismatch);
  require(reference.dim(0) >= patch && reference.dim(1) >= patch,
          "reference " + shape_string(reference.shape()) + " is smaller than the patch size " + std::to_string(patch),
          ErrorKind::ShapeMismatch);
  const Tensor ref = probe::center_patches({reference}, patch).front();
  const Tensor zref = extractor.features(ref);
  const auto grid = probe::feature_map(extractor, image, patch, stride);
  Tensor scores({grid.rows, grid.cols});
  const std::size_t d = grid.dim();
  for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = cosine(grid.values.data() + i * d, zref.data(), d);
  return threshold_scores(scores, threshold);
}

}  // namespace safe::detection
