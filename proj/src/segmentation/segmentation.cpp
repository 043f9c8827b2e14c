#include "safe/segmentation/segmentation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "safe/error.hpp"
#include "safe/io/tensor_file.hpp"
#include "safe/nn/ops.hpp"

namespace safe::segmentation {

void MultiScaleFeatures::validate() const {
  for (const auto& m : maps) {
    require(m.ndim() == 3, "feature maps must be {d, rows, cols}", ErrorKind::ShapeMismatch);
    require(m.dim(1) == maps[0].dim(1) && m.dim(2) == maps[0].dim(2) && m.dim(0) == maps[0].dim(0),
            "multi-scale feature maps differ in shape: " + shape_string(m.shape()) + " vs " +
                shape_string(maps[0].shape()),
            ErrorKind::ShapeMismatch);
  }
  require(height > 0 && width > 0, "multi-scale features need the source image size", ErrorKind::ShapeMismatch);
}

Tensor grid_to_map(const probe::FeatureGrid& grid) {
  const std::size_t d = grid.dim(), cells = grid.rows * grid.cols;
  Tensor m({d, grid.rows, grid.cols});
  for (std::size_t i = 0; i < cells; ++i)
    for (std::size_t c = 0; c < d; ++c) m[c * cells + i] = grid.values(i, c);
  return m;
}

MultiScaleFeatures multiscale_features(const probe::FeatureExtractor& extractor, const Tensor& image,
                                       const std::array<std::size_t, kScales>& patches, std::size_t stride) {
  MultiScaleFeatures f;
  f.height = image.dim(0);
  f.width = image.dim(1);
  for (std::size_t s = 0; s < kScales; ++s) f.maps[s] = grid_to_map(probe::feature_map(extractor, image, patches[s], stride));
  f.validate();
  return f;
}

void SegConfig::validate() const {
  require(in_dim >= 1 && reduce_dim >= 1, "segmentation head dimensions must be positive", ErrorKind::Config);
  require(classes >= 2 && classes <= 256, "segmentation needs 2 to 256 classes", ErrorKind::Config);
}

nn::ParamTable init_seg_head(const SegConfig& cfg, const SeedStream& seed) {
  cfg.validate();
  SeedStream rng = seed.derive("seg-head");
  const std::size_t d = cfg.in_dim, r = cfg.reduce_dim;
  nn::ParamTable p;
  for (std::size_t s = 0; s < kScales; ++s) {
    const std::string pre = "scale" + std::to_string(s) + ".";
    p.add(pre + "reduce.weight", nn::uniform_fan_in({r, d}, d, rng));
    p.add(pre + "reduce.bias", Tensor({r}));
    p.add(pre + "refine.weight", nn::uniform_fan_in({r, r * 9}, r * 9, rng));
    p.add(pre + "refine.bias", Tensor({r}));
    for (std::size_t u = 0; u < 3; ++u) {
      p.add(pre + "up" + std::to_string(u) + ".weight", nn::uniform_fan_in({r, r * 4}, r, rng));
      p.add(pre + "up" + std::to_string(u) + ".bias", Tensor({r}));
    }
    p.add(pre + "score.weight", nn::uniform_fan_in({1, r}, r, rng));
    p.add(pre + "score.bias", Tensor({1}));
  }
  p.add("final.weight", nn::uniform_fan_in({cfg.classes, r * 9}, r * 9, rng));
  p.add("final.bias", Tensor({cfg.classes}));
  return p;
}

namespace {

nn::Var var(const nn::ParamTable& params, const std::vector<nn::Var>& vars, const std::string& name) {
  return vars[params.index(name)];
}

}  // namespace

nn::Var branch_forward(nn::Tape& t, nn::Var map, const nn::ParamTable& params, const std::vector<nn::Var>& vars,
                       std::size_t scale) {
  const std::string pre = "scale" + std::to_string(scale) + ".";
  nn::Var x = nn::relu(t, nn::conv1x1(t, map, var(params, vars, pre + "reduce.weight"), var(params, vars, pre + "reduce.bias")));
  x = nn::relu(t, nn::conv3x3(t, x, var(params, vars, pre + "refine.weight"), var(params, vars, pre + "refine.bias")));
  for (std::size_t u = 0; u < 3; ++u) {
    const std::string up = pre + "up" + std::to_string(u) + ".";
    x = nn::relu(t, nn::conv_transpose2x2(t, x, var(params, vars, up + "weight"), var(params, vars, up + "bias")));
  }
  return x;
}

nn::Var attention_aggregate(nn::Tape& t, std::span<const nn::Var> maps, std::span<const nn::Var> score_weights,
                            std::span<const nn::Var> score_biases) {
  require(maps.size() == score_weights.size() && maps.size() == score_biases.size() && !maps.empty(),
          "attention aggregation needs one score conv per map", ErrorKind::ShapeMismatch);
  for (const auto& m : maps)
    require(t.value(m).shape() == t.value(maps[0]).shape(), "attention aggregation maps differ in shape",
            ErrorKind::ShapeMismatch);
  std::vector<nn::Var> scores;
  for (std::size_t s = 0; s < maps.size(); ++s) scores.push_back(nn::conv1x1(t, maps[s], score_weights[s], score_biases[s]));
  return nn::softmax_mix(t, scores, maps);
}

nn::Var seg_forward(nn::Tape& t, const MultiScaleFeatures& feats, const nn::ParamTable& params,
                    const std::vector<nn::Var>& vars) {
  feats.validate();
  std::vector<nn::Var> maps, sw, sb;
  for (std::size_t s = 0; s < kScales; ++s) {
    maps.push_back(branch_forward(t, t.constant(feats.maps[s]), params, vars, s));
    const std::string pre = "scale" + std::to_string(s) + ".score.";
    sw.push_back(var(params, vars, pre + "weight"));
    sb.push_back(var(params, vars, pre + "bias"));
  }
  nn::Var fused = attention_aggregate(t, maps, sw, sb);
  nn::Var logits = nn::conv3x3(t, fused, var(params, vars, "final.weight"), var(params, vars, "final.bias"));
  return nn::bilinear_resize(t, logits, feats.height, feats.width);
}

Tensor seg_forward(const MultiScaleFeatures& feats, const nn::ParamTable& params) {
  nn::Tape t;
  const auto vars = nn::bind(t, params);
  return t.value(seg_forward(t, feats, params, vars));
}

std::vector<int> predict_labels(const Tensor& logits) {
  require(logits.ndim() == 3, "logits must be {K,H,W}", ErrorKind::ShapeMismatch);
  const std::size_t k = logits.dim(0), hw = logits.dim(1) * logits.dim(2);
  std::vector<int> out(hw, 0);
  for (std::size_t i = 0; i < hw; ++i) {
    double best = logits[i];
    for (std::size_t c = 1; c < k; ++c)
      if (logits[c * hw + i] > best) {
        best = logits[c * hw + i];
        out[i] = static_cast<int>(c);
      }
  }
  return out;
}

std::int64_t ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), std::int64_t{0}); }

ConfusionMatrix confusion_matrix(std::span<const int> pred, std::span<const int> gt, std::size_t n) {
  require(pred.size() == gt.size(), "prediction and ground truth differ in size", ErrorKind::ShapeMismatch);
  require(n >= 1, "confusion matrix needs at least one class");
  ConfusionMatrix x{n, std::vector<std::int64_t>(n * n, 0)};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    require(pred[i] >= 0 && gt[i] >= 0 && static_cast<std::size_t>(pred[i]) < n && static_cast<std::size_t>(gt[i]) < n,
            "label out of range at pixel " + std::to_string(i), ErrorKind::Data);
    ++x.counts[static_cast<std::size_t>(gt[i]) * n + static_cast<std::size_t>(pred[i])];
  }
  return x;
}

SegMetrics seg_metrics(const ConfusionMatrix& x) {
  const std::int64_t total = x.total();
  require(total > 0, "confusion matrix is empty", ErrorKind::Data);
  const std::size_t n = x.n;
  std::vector<double> row(n, 0.0), col(n, 0.0);
  double diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    diag += static_cast<double>(x.at(i, i));
    for (std::size_t j = 0; j < n; ++j) {
      row[i] += static_cast<double>(x.at(i, j));
      col[j] += static_cast<double>(x.at(i, j));
    }
  }
  const double N = static_cast<double>(total);
  SegMetrics m;
  m.oa = diag / N;
  double pe = 0.0;
  for (std::size_t i = 0; i < n; ++i) pe += row[i] * col[i];
  pe /= N * N;
  m.kappa = pe < 1.0 ? (m.oa - pe) / (1.0 - pe) : 1.0;
  std::size_t present = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (row[i] == 0.0 && col[i] == 0.0) continue;
    ++present;
    const double xii = static_cast<double>(x.at(i, i));
    m.aa += row[i] > 0.0 ? xii / row[i] : 0.0;
    m.miou += xii / (row[i] + col[i] - xii);
  }
  m.aa /= static_cast<double>(present);
  m.miou /= static_cast<double>(present);
  return m;
}

SegTrainConfig SegTrainConfig::from_config(const io::RunConfig& config) {
  SegTrainConfig c;
  c.epochs = static_cast<std::size_t>(config.get_int("seg.epochs"));
  c.lr = config.get_real("seg.lr");
  c.decay_epoch1 = static_cast<std::size_t>(config.get_int("seg.decay_epoch1"));
  c.decay_epoch2 = static_cast<std::size_t>(config.get_int("seg.decay_epoch2"));
  c.weight_decay = config.get_real("seg.weight_decay");
  c.train_fraction = config.get_real("seg.train_fraction");
  require(c.train_fraction > 0.0 && c.train_fraction <= 1.0, "seg.train_fraction must lie in (0,1]", ErrorKind::Config);
  return c;
}

double seg_lr(const SegTrainConfig& cfg, std::size_t epoch) {
  double lr = cfg.lr;
  if (epoch >= cfg.decay_epoch1) lr *= 0.1;
  if (epoch >= cfg.decay_epoch2) lr *= 0.1;
  return lr;
}

SegMetrics evaluate(const std::vector<SegSample>& data, const std::vector<std::size_t>& index,
                    const nn::ParamTable& params, std::size_t classes) {
  require(!index.empty(), "nothing to evaluate", ErrorKind::Data);
  ConfusionMatrix total{classes, std::vector<std::int64_t>(classes * classes, 0)};
  for (std::size_t i : index) {
    const auto pred = predict_labels(seg_forward(data[i].features, params));
    const auto x = confusion_matrix(pred, data[i].labels, classes);
    for (std::size_t j = 0; j < x.counts.size(); ++j) total.counts[j] += x.counts[j];
  }
  return seg_metrics(total);
}

SegTrainResult seg_train(const std::vector<SegSample>& data, const SegConfig& head, const SegTrainConfig& cfg,
                         const SeedStream& seed) {
  require(!data.empty(), "segmentation dataset is empty", ErrorKind::Data);
  for (const auto& s : data) {
    s.features.validate();
    require(s.labels.size() == s.features.height * s.features.width, "label map does not match the image size",
            ErrorKind::ShapeMismatch);
    for (int l : s.labels)
      require(l >= 0 && static_cast<std::size_t>(l) < head.classes, "label " + std::to_string(l) + " out of range",
              ErrorKind::Data);
  }
  SegTrainResult res;
  res.params = init_seg_head(head, seed);

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  SeedStream split_rng = seed.derive("seg-split");
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[split_rng.below(i)]);
  std::size_t n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(data.size())));
  n_train = std::clamp<std::size_t>(n_train, 1, data.size());
  res.train_index.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  res.val_index.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(res.train_index.begin(), res.train_index.end());
  std::sort(res.val_index.begin(), res.val_index.end());

  nn::AdamW adam;
  adam.init(res.params);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> idx = res.train_index;
    SeedStream rng = seed.derive("seg-epoch", epoch);
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    const double lr = seg_lr(cfg, epoch);
    double loss = 0.0;
    for (std::size_t i : idx) {
      nn::ParamTable grads = res.params.zeros_like();
      nn::Tape t;
      const auto vars = nn::bind(t, res.params, &grads);
      const auto logits = seg_forward(t, data[i].features, res.params, vars);
      const auto l = nn::pixel_cross_entropy(t, logits, data[i].labels);
      loss += t.value(l)[0];
      t.backward(l);
      adam.step(res.params, grads, lr, cfg.weight_decay);
    }
    res.epoch_loss.push_back(loss / static_cast<double>(idx.size()));
  }
  res.validation = evaluate(data, res.val_index.empty() ? res.train_index : res.val_index, res.params, head.classes);
  return res;
}

}  // namespace safe::segmentation

namespace safe::segmentation {

void save_seg_dataset(const std::filesystem::path& dir, const std::vector<SegScene>& scenes) {
  require(!scenes.empty(), "segmentation dataset is empty", ErrorKind::Data);
  const auto& f = scenes.front().image;
  std::vector<std::complex<float>> z;
  std::vector<std::uint8_t> labels;
  for (const auto& s : scenes) {
    require(s.image.height == f.height && s.image.width == f.width && s.image.channels == f.channels,
            "segmentation scenes differ in shape", ErrorKind::ShapeMismatch);
    require(s.labels.size() == f.height * f.width, "label map does not match the scene", ErrorKind::ShapeMismatch);
    z.insert(z.end(), s.image.samples.begin(), s.image.samples.end());
    for (int l : s.labels) {
      require(l >= 0 && l < 256, "labels must fit in uint8", ErrorKind::Data);
      labels.push_back(static_cast<std::uint8_t>(l));
    }
  }
  const auto n = static_cast<std::uint32_t>(scenes.size()), h = static_cast<std::uint32_t>(f.height),
             w = static_cast<std::uint32_t>(f.width), c = static_cast<std::uint32_t>(f.channels);
  std::filesystem::create_directories(dir);
  io::write_tensor(dir / "images.saft", io::RawTensor::from_complex64({n, h, w, c}, z));
  io::write_tensor(dir / "labels.saft", io::RawTensor::from_uint8({n, h, w}, labels));
}

std::vector<SegScene> load_seg_dataset(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), "dataset " + dir.string() + " is not a directory", ErrorKind::Io);
  const auto images = io::read_tensor(dir / "images.saft");
  const auto labels = io::read_tensor(dir / "labels.saft");
  require(images.shape.size() == 4 && labels.shape.size() == 3 && images.shape[0] == labels.shape[0] &&
              images.shape[1] == labels.shape[1] && images.shape[2] == labels.shape[2],
          "segmentation dataset needs images N x H x W x C and labels N x H x W", ErrorKind::Data);
  const auto z = images.to_complex64();
  const auto l = labels.to_uint8();
  const std::size_t n = images.shape[0], h = images.shape[1], w = images.shape[2], c = images.shape[3];
  std::vector<SegScene> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = out[i];
    s.image.height = h;
    s.image.width = w;
    s.image.channels = c;
    s.image.samples.assign(z.begin() + static_cast<std::ptrdiff_t>(i * h * w * c),
                           z.begin() + static_cast<std::ptrdiff_t>((i + 1) * h * w * c));
    s.image.validate();
    s.labels.assign(l.begin() + static_cast<std::ptrdiff_t>(i * h * w), l.begin() + static_cast<std::ptrdiff_t>((i + 1) * h * w));
  }
  return out;
}

sar::SceneSpec random_partition_spec(std::size_t size, SeedStream& rng) {
  const double s = static_cast<double>(size);
  sar::SceneSpec spec;
  spec.height = spec.width = size;
  sar::Region bg;
  bg.polygon = {{0, 0}, {0, s}, {s, s}, {s, 0}};
  bg.reflectivity = 0.3;
  bg.label = 0;
  sar::Region band;
  const double top = rng.uniform(0.3, 0.6) * s, bottom = rng.uniform(0.3, 0.6) * s;
  band.polygon = {{0, top}, {0, s}, {s, s}, {s, bottom}};
  band.texture = sar::Texture::Furrowed;
  band.reflectivity = 1.0;
  band.period = rng.uniform(6.0, 12.0);
  band.angle_deg = rng.uniform(0.0, 180.0);
  band.label = 1;
  sar::Region field;
  const double r0 = rng.uniform(0.05, 0.45) * s, c0 = rng.uniform(0.05, 0.45) * s;
  const double hgt = rng.uniform(0.3, 0.45) * s, wid = rng.uniform(0.3, 0.45) * s;
  const double skew = rng.uniform(-0.1, 0.1) * s;
  field.polygon = {{r0, c0}, {r0 + skew, c0 + wid}, {r0 + hgt, c0 + wid - skew}, {r0 + hgt - skew, c0}};
  field.texture = sar::Texture::PointScattererField;
  field.reflectivity = 1.0;
  field.density = 0.04;
  field.contrast = 20.0;
  field.label = 2;
  spec.regions = {bg, band, field};
  return spec;
}

std::vector<SegScene> synthesize_seg_dataset(std::size_t count, std::size_t size, const SeedStream& seed) {
  require(count >= 1 && size >= 8, "segmentation dataset is too small");
  std::vector<SegScene> out(count);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(count); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    SeedStream rng = seed.derive("seg-scene", i);
    auto scene = sar::synthesize_scene(random_partition_spec(size, rng), rng.derive("speckle"));
    out[i].image = std::move(scene.image);
    out[i].labels.assign(scene.labels.begin(), scene.labels.end());
  }
  return out;
}

Tensor normalized_scene(const sar::SlcImage& image) {
  const Tensor amp = sar::amplitude(image);
  return sar::normalize_amplitude(amp, sar::percentile_params(amp));
}

}  // namespace safe::segmentation
