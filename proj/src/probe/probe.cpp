#include "safe/probe/probe.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "safe/error.hpp"
#include "safe/io/exchange.hpp"
#include "safe/kernels/kernels.hpp"
#include "safe/sar/sar.hpp"

namespace safe::probe {

FeatureKind parse_feature_kind(const std::string& name) {
  if (name == "z") return FeatureKind::Z;
  if (name == "h") return FeatureKind::H;
  if (name == "s") return FeatureKind::S;
  fail(ErrorKind::Config, "unknown feature kind '" + name + "' (expected z, h or s)");
}

ProbeMethod parse_probe_method(const std::string& name) {
  if (name == "knn") return ProbeMethod::Knn;
  if (name == "linear") return ProbeMethod::Linear;
  fail(ErrorKind::Config, "unknown probe method '" + name + "' (expected knn or linear)");
}

Reducer parse_reducer(const std::string& name) {
  if (name == "pca") return Reducer::Pca;
  if (name == "external") return Reducer::External;
  fail(ErrorKind::Config, "unknown reducer '" + name + "' (expected pca or external)");
}

FeatureExtractor::FeatureExtractor(encoder::EncoderModel model) : model_(std::move(model)) {}

FeatureExtractor FeatureExtractor::load(const std::filesystem::path& checkpoint, FeatureKind kind) {
  FeatureExtractor fx(encoder::load_encoder_checkpoint(checkpoint));
  fx.kind_ = kind;
  if (kind == FeatureKind::Z) return fx;
  const auto config = io::load_config(checkpoint / encoder::kConfigFile);
  fx.head_cfg_ = objective::HeadConfig::from_config(config);
  const auto all = nn::load_params(checkpoint, encoder::kStudentStem);
  for (std::size_t i = 0; i < all.count(); ++i)
    if (all.name(i).rfind("head.", 0) == 0) fx.head_.add(all.name(i), all[i]);
  require(fx.head_.count() == 2 * fx.head_cfg_.layers, "checkpoint has no projection head", ErrorKind::Data);
  if (kind == FeatureKind::S) {
    require(std::filesystem::exists(checkpoint / "prototypes.manifest.cfg"), "checkpoint has no prototype bank",
            ErrorKind::Data);
    fx.prototypes_ = nn::load_params(checkpoint, "prototypes").at("prototypes");
  }
  return fx;
}

Tensor FeatureExtractor::features(const Tensor& image) const {
  Tensor z = model_.encode(image);
  if (kind_ == FeatureKind::Z) return z;
  Tensor h = objective::project(z, head_, head_cfg_);
  if (kind_ == FeatureKind::H) return h;
  return objective::prototype_scores(h, prototypes_).reshaped({prototypes_.cols()});
}

FeatureMatrix extract_features(const FeatureExtractor& extractor, const std::vector<Tensor>& patches,
                               const std::vector<int>& labels) {
  require(!patches.empty(), "no patches to extract features from", ErrorKind::Data);
  require(labels.empty() || labels.size() == patches.size(), "label count differs from patch count",
          ErrorKind::ShapeMismatch);
  std::vector<Tensor> rows(patches.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(patches.size()); ++i)
    rows[static_cast<std::size_t>(i)] = extractor.features(patches[static_cast<std::size_t>(i)]);
  const std::size_t d = rows.front().size();
  FeatureMatrix out{Tensor({patches.size(), d}), labels};
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(rows[i].data(), d, out.rows.data() + i * d);
  return out;
}

namespace {

std::vector<double> row_norms(const Tensor& x) {
  std::vector<double> n(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) s += x(r, c) * x(r, c);
    n[r] = std::sqrt(s);
  }
  return n;
}

std::vector<int> sorted_classes(const std::vector<int>& labels) {
  std::vector<int> c = labels;
  std::sort(c.begin(), c.end());
  c.erase(std::unique(c.begin(), c.end()), c.end());
  return c;
}

}  // namespace

std::vector<int> knn_classify(const FeatureMatrix& train, const FeatureMatrix& query, std::size_t k) {
  require(train.size() > 0, "k-NN needs a nonempty training set", ErrorKind::Data);
  require(train.labels.size() == train.size(), "k-NN training rows need labels", ErrorKind::Data);
  require(k >= 1 && k <= train.size(), "k must lie in [1, training rows]");
  require(query.size() == 0 || query.dim() == train.dim(), "feature dimensions differ", ErrorKind::ShapeMismatch);
  const std::size_t nt = train.size(), nq = query.size(), d = train.dim();
  if (nq == 0) return {};
  Tensor dots({nq, nt});
  kernels::gemm(kernels::Op::N, kernels::Op::T, nq, nt, d, query.rows.data(), train.rows.data(), dots.data(), false);
  const auto tn = row_norms(train.rows), qn = row_norms(query.rows);
  std::vector<int> out(nq);
  for (std::size_t q = 0; q < nq; ++q) {
    std::vector<double> sim(nt);
    for (std::size_t t = 0; t < nt; ++t) {
      const double den = tn[t] * qn[q];
      sim[t] = den > 0.0 ? dots(q, t) / den : 0.0;
    }
    std::vector<std::size_t> idx(nt);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) { return sim[a] > sim[b] || (sim[a] == sim[b] && a < b); });
    std::map<int, std::size_t> votes;
    for (std::size_t i = 0; i < k; ++i) ++votes[train.labels[idx[i]]];
    std::size_t best = 0;
    for (const auto& [label, count] : votes) best = std::max(best, count);
    for (std::size_t i = 0; i < k; ++i) {
      if (votes[train.labels[idx[i]]] == best) {
        out[q] = train.labels[idx[i]];
        break;
      }
    }
  }
  return out;
}

std::vector<int> LinearProbe::predict(const FeatureMatrix& x) const {
  require(x.dim() == mean.size(), "feature dimension differs from the probe", ErrorKind::ShapeMismatch);
  const std::size_t d = mean.size(), c = classes.size();
  std::vector<int> out(x.size());
  std::vector<double> z(d);
  for (std::size_t r = 0; r < x.size(); ++r) {
    for (std::size_t j = 0; j < d; ++j) z[j] = x.rows(r, j) - mean[j];
    std::size_t best = 0;
    double best_v = -INFINITY;
    for (std::size_t k = 0; k < c; ++k) {
      double v = bias[k];
      for (std::size_t j = 0; j < d; ++j) v += z[j] * weight(j, k);
      if (v > best_v) {
        best_v = v;
        best = k;
      }
    }
    out[r] = classes[best];
  }
  return out;
}

LinearProbe linear_probe_train(const FeatureMatrix& train, const LinearProbeConfig& cfg) {
  require(train.size() > 0 && train.labels.size() == train.size(), "linear probe needs labelled rows",
          ErrorKind::Data);
  LinearProbe probe;
  probe.classes = sorted_classes(train.labels);
  require(probe.classes.size() >= 2, "linear probe needs at least two classes", ErrorKind::Data);
  const std::size_t n = train.size(), d = train.dim(), c = probe.classes.size();

  probe.mean.assign(d, 0.0);
  Tensor x({n, d});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) x(r, j) = train.rows(r, j) - probe.mean[j];
  std::vector<std::size_t> target(n);
  for (std::size_t r = 0; r < n; ++r)
    target[r] = static_cast<std::size_t>(
        std::lower_bound(probe.classes.begin(), probe.classes.end(), train.labels[r]) - probe.classes.begin());

  nn::ParamTable params;
  params.add("weight", Tensor({d, c}));
  params.add("bias", Tensor({c}));
  nn::AdamW adam;
  adam.init(params);
  Tensor logits({n, c});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    kernels::gemm(kernels::Op::N, kernels::Op::N, n, c, d, x.data(), params[0].data(), logits.data(), false);
    for (std::size_t r = 0; r < n; ++r) {
      double* row = logits.data() + r * c;
      double mx = -INFINITY;
      for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, row[k] += params[1][k]);
      double sum = 0.0;
      for (std::size_t k = 0; k < c; ++k) sum += row[k] = std::exp(row[k] - mx);
      for (std::size_t k = 0; k < c; ++k) row[k] = (row[k] / sum - (k == target[r] ? 1.0 : 0.0)) / static_cast<double>(n);
    }
    nn::ParamTable grads = params.zeros_like();
    kernels::gemm(kernels::Op::T, kernels::Op::N, d, c, n, x.data(), logits.data(), grads[0].data(), false);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t k = 0; k < c; ++k) grads[1][k] += logits(r, k);
    adam.step(params, grads, cfg.lr, 0.0);
  }
  probe.weight = params[0];
  probe.bias = params[1];
  return probe;
}

double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
  require(predicted.size() == truth.size() && !truth.empty(), "accuracy needs equal nonempty label lists",
          ErrorKind::ShapeMismatch);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

namespace {

FeatureMatrix select_rows(const FeatureMatrix& f, const std::vector<std::size_t>& idx) {
  FeatureMatrix out{Tensor({idx.size(), f.dim()}), {}};
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(f.rows.data() + idx[i] * f.dim(), f.dim(), out.rows.data() + i * f.dim());
    out.labels.push_back(f.labels[idx[i]]);
  }
  return out;
}

}  // namespace

FewShotReport fewshot_eval(const FeatureMatrix& features, const FewShotConfig& cfg, const SeedStream& seed,
                           const FeatureMatrix* test) {
  require(features.labels.size() == features.size() && features.size() > 0, "few-shot evaluation needs labels",
          ErrorKind::Data);
  require(cfg.labels_per_class >= 1 && cfg.trials >= 1, "labels per class and trials must be positive");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < features.size(); ++i) by_class[features.labels[i]].push_back(i);
  require(by_class.size() >= 2, "few-shot evaluation needs at least two classes", ErrorKind::Data);
  for (const auto& [label, rows] : by_class) {
    const bool enough = test ? rows.size() >= cfg.labels_per_class : rows.size() > cfg.labels_per_class;
    require(enough,
            "class " + std::to_string(label) + " has " + std::to_string(rows.size()) + " samples, too few for " +
                std::to_string(cfg.labels_per_class) + " labels per class",
            ErrorKind::Data);
  }
  if (test) require(test->labels.size() == test->size() && test->size() > 0, "test set needs labels", ErrorKind::Data);

  FewShotReport rep;
  rep.labels_per_class = cfg.labels_per_class;
  rep.trials = cfg.trials;
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    SeedStream rng = seed.derive("fewshot-trial", t);
    std::vector<std::size_t> train_idx, rest_idx;
    for (const auto& [label, rows] : by_class) {
      std::vector<std::size_t> r = rows;
      for (std::size_t i = 0; i < cfg.labels_per_class; ++i) std::swap(r[i], r[i + rng.below(r.size() - i)]);
      train_idx.insert(train_idx.end(), r.begin(), r.begin() + static_cast<std::ptrdiff_t>(cfg.labels_per_class));
      rest_idx.insert(rest_idx.end(), r.begin() + static_cast<std::ptrdiff_t>(cfg.labels_per_class), r.end());
    }
    std::sort(rest_idx.begin(), rest_idx.end());
    const FeatureMatrix train = select_rows(features, train_idx);
    const FeatureMatrix eval = test ? *test : select_rows(features, rest_idx);
    std::vector<int> pred;
    if (cfg.method == ProbeMethod::Knn)
      pred = knn_classify(train, eval, std::min(cfg.k, train.size()));
    else
      pred = linear_probe_train(train, cfg.linear).predict(eval);
    rep.accuracies.push_back(accuracy(pred, eval.labels));
  }
  rep.mean = std::accumulate(rep.accuracies.begin(), rep.accuracies.end(), 0.0) / static_cast<double>(cfg.trials);
  if (cfg.trials > 1) {
    double ss = 0.0;
    for (double a : rep.accuracies) ss += (a - rep.mean) * (a - rep.mean);
    rep.stddev = std::sqrt(ss / static_cast<double>(cfg.trials - 1));
  }
  return rep;
}

FeatureGrid feature_map(const FeatureExtractor& extractor, const Tensor& image, std::size_t patch,
                        std::size_t stride) {
  require(patch % extractor.token_size() == 0,
          "patch size " + std::to_string(patch) + " is not divisible by token size " +
              std::to_string(extractor.token_size()),
          ErrorKind::ShapeMismatch);
  const auto grid = sar::extract_patches(image, patch, stride, true);
  FeatureGrid out;
  out.rows = grid.rows;
  out.cols = grid.cols;
  out.patch = patch;
  out.stride = stride;
  out.values = extract_features(extractor, grid.patches).rows;
  return out;
}

Tensor reduce_to_rgb(const FeatureGrid& grid, Reducer method, const std::string& command) {
  const std::size_t n = grid.rows * grid.cols, d = grid.dim();
  require(n >= 3 && grid.values.rows() == n, "reduction needs a grid of at least 3 cells", ErrorKind::Data);
  if (method == Reducer::External) {
    std::vector<float> v(grid.values.values().begin(), grid.values.values().end());
    const auto raw = io::run_exchange(
        command, io::RawTensor::from_float32({static_cast<std::uint32_t>(grid.rows),
                                              static_cast<std::uint32_t>(grid.cols), static_cast<std::uint32_t>(d)},
                                             v));
    require(raw.shape == std::vector<std::uint32_t>{static_cast<std::uint32_t>(grid.rows),
                                                    static_cast<std::uint32_t>(grid.cols), 3u},
            "external reducer must return a rows x cols x 3 container", ErrorKind::External);
    return io::to_tensor(raw);
  }

  Eigen::MatrixXd x = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      grid.values.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  require(eig.info() == Eigen::Success, "eigendecomposition failed", ErrorKind::Numerical);
  const Eigen::VectorXd& vals = eig.eigenvalues();  // ascending
  const double top = vals.size() > 0 ? std::max(vals(vals.size() - 1), 0.0) : 0.0;

  Tensor rgb({grid.rows, grid.cols, 3});
  for (std::size_t ch = 0; ch < 3 && ch < d; ++ch) {
    const Eigen::Index col = static_cast<Eigen::Index>(d - 1 - ch);
    if (!(vals(col) > 1e-12 * top) || top <= 0.0) break;
    Eigen::VectorXd axis = eig.eigenvectors().col(col);
    Eigen::Index arg = 0;
    axis.cwiseAbs().maxCoeff(&arg);
    if (axis(arg) < 0) axis = -axis;
    const Eigen::VectorXd proj = x * axis;
    const double lo = proj.minCoeff(), hi = proj.maxCoeff();
    for (std::size_t i = 0; i < n; ++i)
      rgb[i * 3 + ch] = hi > lo ? (proj(static_cast<Eigen::Index>(i)) - lo) / (hi - lo) : 0.0;
  }
  return rgb;
}

std::vector<Tensor> center_patches(const std::vector<Tensor>& images, std::size_t size) {
  std::vector<Tensor> out;
  out.reserve(images.size());
  for (const auto& img : images) {
    require(img.ndim() == 3 && img.dim(0) >= size && img.dim(1) >= size,
            "image " + shape_string(img.shape()) + " is smaller than " + std::to_string(size), ErrorKind::ShapeMismatch);
    const std::size_t r0 = (img.dim(0) - size) / 2, c0 = (img.dim(1) - size) / 2, c = img.dim(2);
    Tensor p({size, size, c});
    for (std::size_t r = 0; r < size; ++r)
      std::copy_n(img.data() + ((r0 + r) * img.dim(1) + c0) * c, size * c, p.data() + r * size * c);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace safe::probe
