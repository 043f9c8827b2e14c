#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "safe/encoder/encoder.hpp"
#include "safe/io/seed.hpp"
#include "safe/objective/objective.hpp"
#include "safe/tensor.hpp"

namespace safe::probe {

/// N feature rows with optional integer labels.
struct FeatureMatrix {
  Tensor rows;  // {N, d}
  std::vector<int> labels;

  std::size_t size() const { return rows.ndim() == 2 ? rows.rows() : 0; }
  std::size_t dim() const { return rows.ndim() == 2 ? rows.cols() : 0; }
};

/// Which representation feeds the probes: encoder output z, projection h,
/// or prototype scores s.
enum class FeatureKind { Z, H, S };
FeatureKind parse_feature_kind(const std::string& name);

/// Frozen feature extractor built from a checkpoint.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(encoder::EncoderModel model);
  /// h and s need the projection head and prototypes stored by pretraining.
  static FeatureExtractor load(const std::filesystem::path& checkpoint, FeatureKind kind = FeatureKind::Z);

  const encoder::EncoderModel& model() const { return model_; }
  FeatureKind kind() const { return kind_; }
  std::size_t token_size() const { return model_.encoder.config().token_size; }

  Tensor features(const Tensor& image) const;

 private:
  encoder::EncoderModel model_;
  FeatureKind kind_ = FeatureKind::Z;
  objective::HeadConfig head_cfg_;
  nn::ParamTable head_;
  Tensor prototypes_;
};

/// One row per patch, mask_p = 0. Each patch is encoded on its own, so the
/// result does not depend on how the list is batched.
FeatureMatrix extract_features(const FeatureExtractor& extractor, const std::vector<Tensor>& patches,
                               const std::vector<int>& labels = {});

/// Cosine k-NN with majority vote; tied votes go to the tied label whose
/// member ranks nearest. Zero-norm rows have similarity 0 to everything.
std::vector<int> knn_classify(const FeatureMatrix& train, const FeatureMatrix& query, std::size_t k);

struct LinearProbeConfig {
  std::size_t epochs = 300;
  double lr = 3e-3;
};

/// Multinomial logistic regression on mean-centred features, trained
/// full-batch with Adam from zero weights.
struct LinearProbe {
  Tensor weight;  // {d, classes}
  Tensor bias;    // {classes}
  std::vector<double> mean;  // training feature mean, subtracted before the map
  std::vector<int> classes;  // label of each output column

  std::vector<int> predict(const FeatureMatrix& x) const;
};

LinearProbe linear_probe_train(const FeatureMatrix& train, const LinearProbeConfig& cfg = {});

double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth);

enum class ProbeMethod { Knn, Linear };
ProbeMethod parse_probe_method(const std::string& name);

struct FewShotConfig {
  std::size_t labels_per_class = 5;
  std::size_t trials = 10;
  ProbeMethod method = ProbeMethod::Knn;
  std::size_t k = 1;
  LinearProbeConfig linear;
};

struct FewShotReport {
  std::size_t labels_per_class = 0;
  std::size_t trials = 0;
  std::vector<double> accuracies;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation over trials
};

/// Per trial, draws L labelled rows per class without replacement and
/// scores the remainder (or `test` when given).
FewShotReport fewshot_eval(const FeatureMatrix& features, const FewShotConfig& cfg, const SeedStream& seed,
                           const FeatureMatrix* test = nullptr);

/// Dense features over a padded patch grid.
struct FeatureGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t patch = 0;
  std::size_t stride = 0;
  Tensor values;  // {rows*cols, d}, raster order

  std::size_t dim() const { return values.cols(); }
};

FeatureGrid feature_map(const FeatureExtractor& extractor, const Tensor& image, std::size_t patch,
                        std::size_t stride);

enum class Reducer { Pca, External };
Reducer parse_reducer(const std::string& name);

/// Grid -> {rows, cols, 3}. PCA projects on the three leading components
/// (ordered by explained variance, sign fixed so each axis' largest entry is
/// positive) and min-max scales each channel; missing components stay 0.
/// External writes the grid as float32 {rows, cols, d}, runs `command`
/// and expects float32 {rows, cols, 3} back.
Tensor reduce_to_rgb(const FeatureGrid& grid, Reducer method, const std::string& command = "");

/// Centre crops of each dataset patch's normalized amplitude.
std::vector<Tensor> center_patches(const std::vector<Tensor>& images, std::size_t size);

}  // namespace safe::probe
