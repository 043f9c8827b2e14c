#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "safe/io/config.hpp"
#include "safe/io/seed.hpp"
#include "safe/nn/autograd.hpp"
#include "safe/nn/params.hpp"
#include "safe/probe/probe.hpp"
#include "safe/sar/sar.hpp"
#include "safe/tensor.hpp"

namespace safe::segmentation {

inline constexpr std::size_t kScales = 3;

/// Three feature maps {d_f, H/S, W/S}, one per patch size, at a common stride.
struct MultiScaleFeatures {
  std::array<Tensor, kScales> maps;
  std::size_t height = 0;  // source image size
  std::size_t width = 0;

  void validate() const;
};

/// FeatureGrid {cells, d} -> map {d, rows, cols}.
Tensor grid_to_map(const probe::FeatureGrid& grid);

MultiScaleFeatures multiscale_features(const probe::FeatureExtractor& extractor, const Tensor& image,
                                       const std::array<std::size_t, kScales>& patches, std::size_t stride);

struct SegConfig {
  std::size_t in_dim = 192;
  std::size_t reduce_dim = 64;
  std::size_t classes = 3;

  void validate() const;
};

/// Per scale s: scale<s>.reduce (1x1), scale<s>.refine (3x3), scale<s>.up0..2
/// (2x2 stride-2 transposed), scale<s>.score (1x1 to one channel);
/// then final (3x3 to `classes`).
nn::ParamTable init_seg_head(const SegConfig& cfg, const SeedStream& seed);

/// One scale branch: {d_f,h,w} -> {d_r,8h,8w}.
nn::Var branch_forward(nn::Tape& t, nn::Var map, const nn::ParamTable& params, const std::vector<nn::Var>& vars,
                       std::size_t scale);

/// Per-location softmax over per-scale 1x1 scores, then the weighted sum.
nn::Var attention_aggregate(nn::Tape& t, std::span<const nn::Var> maps, std::span<const nn::Var> score_weights,
                            std::span<const nn::Var> score_biases);

/// Logits {classes, H, W} at the source image size.
nn::Var seg_forward(nn::Tape& t, const MultiScaleFeatures& feats, const nn::ParamTable& params,
                    const std::vector<nn::Var>& vars);
Tensor seg_forward(const MultiScaleFeatures& feats, const nn::ParamTable& params);

/// Per-pixel argmax of logits {K,H,W}.
std::vector<int> predict_labels(const Tensor& logits);

/// Rows are ground truth, columns are predictions.
struct ConfusionMatrix {
  std::size_t n = 0;
  std::vector<std::int64_t> counts;  // row-major n x n

  std::int64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * n + pred]; }
  std::int64_t total() const;
};

ConfusionMatrix confusion_matrix(std::span<const int> pred, std::span<const int> gt, std::size_t n);

struct SegMetrics {
  double oa = 0.0;
  double aa = 0.0;
  double kappa = 0.0;
  double miou = 0.0;
};

/// AA and mIoU average over classes present in the prediction or the truth.
SegMetrics seg_metrics(const ConfusionMatrix& x);

struct SegSample {
  MultiScaleFeatures features;
  std::vector<int> labels;  // H*W
};

struct SegTrainConfig {
  std::size_t epochs = 100;
  double lr = 3.125e-5;
  std::size_t decay_epoch1 = 40;
  std::size_t decay_epoch2 = 80;
  double weight_decay = 0.01;
  double train_fraction = 0.75;

  static SegTrainConfig from_config(const io::RunConfig& config);
};

/// Learning rate for an epoch: lr, x0.1 from decay_epoch1, x0.01 from decay_epoch2.
double seg_lr(const SegTrainConfig& cfg, std::size_t epoch);

struct SegTrainResult {
  nn::ParamTable params;
  std::vector<std::size_t> train_index;
  std::vector<std::size_t> val_index;
  std::vector<double> epoch_loss;
  SegMetrics validation;  // on val_index (or on the training set when empty)
};

/// Seeded split by train_fraction, AdamW with per-pixel cross-entropy, one
/// scene per step. The encoder is frozen: features are precomputed.
SegTrainResult seg_train(const std::vector<SegSample>& data, const SegConfig& head, const SegTrainConfig& cfg,
                         const SeedStream& seed);

SegMetrics evaluate(const std::vector<SegSample>& data, const std::vector<std::size_t>& index,
                    const nn::ParamTable& params, std::size_t classes);

/// Labelled scenes. On disk: images.saft (complex64 N x H x W x C) and
/// labels.saft (uint8 N x H x W).
struct SegScene {
  sar::SlcImage image;
  std::vector<int> labels;  // H*W
};

void save_seg_dataset(const std::filesystem::path& dir, const std::vector<SegScene>& scenes);
std::vector<SegScene> load_seg_dataset(const std::filesystem::path& dir);

/// Three-class scene: dark flat background (0), a furrowed band bounded by
/// a random slanted edge (1) and a point-scatterer quadrilateral (2).
sar::SceneSpec random_partition_spec(std::size_t size, SeedStream& rng);
std::vector<SegScene> synthesize_seg_dataset(std::size_t count, std::size_t size, const SeedStream& seed);

/// Normalized amplitude of a scene with its own percentile bounds.
Tensor normalized_scene(const sar::SlcImage& image);

}  // namespace safe::segmentation
