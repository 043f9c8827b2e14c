#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>

#include "safe/detection/detection.hpp"
#include "safe/error.hpp"
#include "safe/io/config.hpp"
#include "safe/io/exchange.hpp"
#include "safe/io/tensor_file.hpp"
#include "safe/pretrain/pretrain.hpp"
#include "safe/probe/probe.hpp"
#include "safe/sar/sar.hpp"
#include "safe/segmentation/segmentation.hpp"

namespace safe::cli {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

/// Options every subcommand shares: config file, --set overrides, seed.
struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<long> seed;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Run config file (key=value lines)");
    cmd->add_option("--set", sets, "Override a config key, key=value (repeatable)");
    cmd->add_option("--seed", seed, "Root seed");
  }

  /// Defaults, then the config file, then --set, then dedicated flags.
  io::RunConfig build(const std::vector<std::pair<std::string, std::string>>& flags = {}) const {
    io::RunConfig cfg = config_path.empty() ? io::RunConfig{} : io::load_config(config_path);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      require(eq != std::string::npos, "--set expects key=value, got '" + s + "'", ErrorKind::Config);
      cfg.set(s.substr(0, eq), s.substr(eq + 1));
    }
    for (const auto& [k, v] : flags) cfg.set(k, v);
    if (seed) cfg.set("seed", std::to_string(*seed));
    return cfg;
  }
};

template <typename T>
void flag(std::vector<std::pair<std::string, std::string>>& out, const std::string& key, const std::optional<T>& v) {
  if (!v) return;
  if constexpr (std::is_same_v<T, std::string>)
    out.emplace_back(key, *v);
  else if constexpr (std::is_floating_point_v<T>)
    out.emplace_back(key, fmt(*v));
  else
    out.emplace_back(key, std::to_string(*v));
}

Tensor load_normalized_image(const std::string& path, sar::NormalizationParams* params = nullptr) {
  const auto slc = sar::read_slc(path);
  const Tensor amp = sar::amplitude(slc);
  const auto p = sar::percentile_params(amp);
  if (params) *params = p;
  return sar::normalize_amplitude(amp, p);
}

std::string sibling(const std::string& path, const std::string& suffix) {
  fs::path p(path);
  return (p.parent_path() / (p.stem().string() + suffix)).string();
}

// ---- subcommands ---------------------------------------------------------

struct PretrainCmd {
  Common common;
  std::string data, out, resume;
  std::optional<long> max_steps, epochs;

  void attach(CLI::App* cmd) {
    common.attach(cmd);
    cmd->add_option("--data", data, "Dataset directory")->required();
    cmd->add_option("--out", out, "Output directory")->required();
    cmd->add_option("--resume", resume, "Checkpoint to continue from");
    cmd->add_option("--max-steps", max_steps, "Stop after this many optimisation steps");
    cmd->add_option("--epochs", epochs, "Training epochs");
  }

  int run(std::ostream& os) const {
    std::vector<std::pair<std::string, std::string>> f;
    flag(f, "train.max_steps", max_steps);
    flag(f, "train.epochs", epochs);
    const auto cfg = common.build(f);
    const auto data_set = pretrain::load_dataset(data);
    pretrain::PretrainOptions opt;
    opt.out = out;
    if (!resume.empty()) opt.resume = resume;
    opt.on_epoch = [&](const pretrain::EpochSummary& s) {
      os << "epoch=" << s.epoch << " loss=" << fmt(s.mean_loss) << " usage_entropy=" << fmt(s.usage_entropy) << "\n";
    };
    const auto res = pretrain::pretrain(cfg, data_set, opt);
    os << "steps=" << res.state.step << "\ncheckpoint=" << res.checkpoint.string() << "\n";
    return kOk;
  }
};

std::vector<Tensor> dataset_patches(const pretrain::Dataset& d, std::size_t size) {
  return probe::center_patches(pretrain::normalized_images(d), size);
}

struct ExtractCmd {
  Common common;
  std::string checkpoint, data, out, feature = "z";
  std::optional<long> size;

  void attach(CLI::App* cmd) {
    common.attach(cmd);
    cmd->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
    cmd->add_option("--data", data, "Dataset directory")->required();
    cmd->add_option("--out", out, "Feature container (float64 N x d)")->required();
    cmd->add_option("--feature", feature, "z, h or s");
    cmd->add_option("--size", size, "Centre-crop size fed to the encoder");
  }

  int run(std::ostream& os) const {
    const auto cfg = common.build();
    const auto fx = probe::FeatureExtractor::load(checkpoint, probe::parse_feature_kind(feature));
    const auto d = pretrain::load_dataset(data);
    const auto crop = static_cast<std::size_t>(size.value_or(cfg.get_int("augment.global_size")));
    const auto f = probe::extract_features(fx, dataset_patches(d, crop), d.labels);
    io::write_tensor(out, f.rows, io::DType::Float64);
    os << "rows=" << f.size() << "\ndim=" << f.dim() << "\nout=" << out << "\n";
    return kOk;
  }
};

struct ClassifyCmd {
  Common common;
  std::string checkpoint, train, test;
  std::optional<std::string> method, feature;
  std::optional<long> labels_per_class, trials, k, size;

  void attach(CLI::App* cmd) {
    common.attach(cmd);
    cmd->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
    cmd->add_option("--train", train, "Labelled dataset directory")->required();
    cmd->add_option("--test", test, "Separate labelled test dataset");
    cmd->add_option("--method", method, "knn or linear");
    cmd->add_option("--labels-per-class", labels_per_class, "Labelled samples per class");
    cmd->add_option("--trials", trials, "Number of random trials");
    cmd->add_option("--k", k, "Neighbours for k-NN");
    cmd->add_option("--feature", feature, "z, h or s");
    cmd->add_option("--size", size, "Centre-crop size fed to the encoder");
  }

  int run(std::ostream& os) const {
    std::vector<std::pair<std::string, std::string>> f;
    flag(f, "probe.method", method);
    flag(f, "probe.feature", feature);
    flag(f, "probe.labels_per_class", labels_per_class);
    flag(f, "probe.trials", trials);
    flag(f, "probe.k", k);
    const auto cfg = common.build(f);
    const auto fx =
        probe::FeatureExtractor::load(checkpoint, probe::parse_feature_kind(cfg.get_string("probe.feature")));
    const auto crop = static_cast<std::size_t>(size.value_or(cfg.get_int("augment.global_size")));
    const auto train_set = pretrain::load_dataset(train);
    require(!train_set.labels.empty(), "training dataset has no labels", ErrorKind::Data);

    probe::FewShotConfig fc;
    fc.labels_per_class = static_cast<std::size_t>(cfg.get_int("probe.labels_per_class"));
    fc.trials = static_cast<std::size_t>(cfg.get_int("probe.trials"));
    fc.method = probe::parse_probe_method(cfg.get_string("probe.method"));
    fc.k = static_cast<std::size_t>(cfg.get_int("probe.k"));
    fc.linear.epochs = static_cast<std::size_t>(cfg.get_int("probe.linear_epochs"));
    fc.linear.lr = cfg.get_real("probe.linear_lr");

    const auto feats = probe::extract_features(fx, dataset_patches(train_set, crop), train_set.labels);
    std::optional<probe::FeatureMatrix> test_feats;
    if (!test.empty()) {
      const auto test_set = pretrain::load_dataset(test);
      require(!test_set.labels.empty(), "test dataset has no labels", ErrorKind::Data);
      test_feats = probe::extract_features(fx, dataset_patches(test_set, crop), test_set.labels);
    }
    const auto rep = probe::fewshot_eval(feats, fc, SeedStream(static_cast<std::uint64_t>(cfg.get_int("seed"))),
                                         test_feats ? &*test_feats : nullptr);
    os << "method=" << cfg.get_string("probe.method") << "\nlabels_per_class=" << rep.labels_per_class
       << "\ntrials=" << rep.trials << "\nmean_accuracy=" << fmt(rep.mean) << "\nstd_accuracy=" << fmt(rep.stddev)
       << "\n";
    for (std::size_t t = 0; t < rep.accuracies.size(); ++t) os << "trial." << t << "=" << fmt(rep.accuracies[t]) << "\n";
    return kOk;
  }
};

std::vector<segmentation::SegSample> seg_samples(const probe::FeatureExtractor& fx,
                                                 const std::vector<segmentation::SegScene>& scenes,
                                                 const io::RunConfig& cfg) {
  const std::array<std::size_t, segmentation::kScales> patches{static_cast<std::size_t>(cfg.get_int("seg.patch_small")),
                                                               static_cast<std::size_t>(cfg.get_int("seg.patch_mid")),
                                                               static_cast<std::size_t>(cfg.get_int("seg.patch_large"))};
  const auto stride = static_cast<std::size_t>(cfg.get_int("seg.stride"));
  std::vector<segmentation::SegSample> out;
  for (const auto& s : scenes)
    out.push_back({segmentation::multiscale_features(fx, segmentation::normalized_scene(s.image), patches, stride),
                   s.labels});
  return out;
}

void print_metrics(std::ostream& os, const segmentation::SegMetrics& m) {
  os << "OA=" << fmt(m.oa) << "\nAA=" << fmt(m.aa) << "\nKappa=" << fmt(m.kappa) << "\nmIoU=" << fmt(m.miou) << "\n";
}

struct SegTrainCmd {
  Common common;
  std::string checkpoint, data, out;
  std::optional<long> epochs;
  std::optional<double> lr;

  void attach(CLI::App* cmd) {
    common.attach(cmd);
    cmd->add_option("--checkpoint", checkpoint, "Encoder checkpoint directory")->required();
    cmd->add_option("--data", data, "Segmentation dataset directory")->required();
    cmd->add_option("--out", out, "Output directory for the trained head")->required();
    cmd->add_option("--epochs", epochs, "Training epochs");
    cmd->add_option("--lr", lr, "Initial learning rate");
  }

  int run(std::ostream& os) const {
    std::vector<std::pair<std::string, std::string>> f;
    flag(f, "seg.epochs", epochs);
    flag(f, "seg.lr", lr);
    const auto cfg = common.build(f);
    const auto fx = probe::FeatureExtractor::load(checkpoint);
    const auto samples = seg_samples(fx, segmentation::load_seg_dataset(data), cfg);
    segmentation::SegConfig head;
    head.in_dim = fx.model().encoder.config().embed_dim;
    head.reduce_dim = static_cast<std::size_t>(cfg.get_int("seg.reduce_dim"));
    head.classes = static_cast<std::size_t>(cfg.get_int("seg.classes"));
    const auto res = segmentation::seg_train(samples, head, segmentation::SegTrainConfig::from_config(cfg),
                                             SeedStream(static_cast<std::uint64_t>(cfg.get_int("seed"))));
    io::replace_directory(out, [&](const fs::path& staging) {
      std::ofstream(staging / "config.cfg") << cfg.to_text();
      nn::save_params(staging, res.params, "seg");
    });
    for (std::size_t e = 0; e < res.epoch_loss.size(); ++e) os << "epoch." << e << ".loss=" << fmt(res.epoch_loss[e]) << "\n";
    os << "train_scenes=" << res.train_index.size() << "\nval_scenes=" << res.val_index.size() << "\n";
    print_metrics(os, res.validation);
    return kOk;
  }
};

struct SegEvalCmd {
  Common common;
  std::string checkpoint, head, data, out;

  void attach(CLI::App* cmd) {
    common.attach(cmd);
    cmd->add_option("--checkpoint", checkpoint, "Encoder checkpoint directory")->required();
    cmd->add_option("--head", head, "Trained head directory")->required();
    cmd->add_option("--data", data, "Segmentation dataset directory")->required();
    cmd->add_option("--out", out, "Predicted label maps (uint8 N x H x W)");
  }

  int run(std::ostream& os) const {
    const auto head_cfg = io::load_config(fs::path(head) / "config.cfg");
    const auto params = nn::load_params(head, "seg");
    const auto classes = static_cast<std::size_t>(head_cfg.get_int("seg.classes"));
    const auto fx = probe::FeatureExtractor::load(checkpoint);
    const auto scenes = segmentation::load_seg_dataset(data);
    const auto samples = seg_samples(fx, scenes, head_cfg);
    segmentation::ConfusionMatrix total{classes, std::vector<std::int64_t>(classes * classes, 0)};
    std::vector<std::uint8_t> preds;
    for (const auto& s : samples) {
      const auto pred = segmentation::predict_labels(segmentation::seg_forward(s.features, params));
      const auto x = segmentation::confusion_matrix(pred, s.labels, classes);
      for (std::size_t j = 0; j < x.counts.size(); ++j) total.counts[j] += x.counts[j];
      for (int p : pred) preds.push_back(static_cast<std::uint8_t>(p));
    }
    if (!out.empty()) {
      const auto& f = scenes.front().image;
      io::write_tensor(out, io::RawTensor::from_uint8({static_cast<std::uint32_t>(scenes.size()),
                                                       static_cast<std::uint32_t>(f.height),
                                                       static_cast<std::uint32_t>(f.width)},
                                                      preds));
    }
    print_metrics(os, segmentation::seg_metrics(total));
    return kOk;
  }
};

struct DetectCmd {
  Common common;
  std::string checkpoint, image, ref, ref_origin, out;
  std::optional<double> threshold;
  std::optional<long> patch, stride;

  void attach(CLI::App* cmd) {
    common.attach(cmd);
    cmd->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
    cmd->add_option("--image", image, "SLC container to search")->required();
    auto* r = cmd->add_option("--ref", ref, "Reference SLC patch container");
    auto* o = cmd->add_option("--ref-origin", ref_origin, "Cut the reference from the image at row,col");
    r->excludes(o);
    cmd->add_option("--threshold", threshold, "Cosine threshold");
    cmd->add_option("--patch", patch, "Patch size");
    cmd->add_option("--stride", stride, "Grid stride");
    cmd->add_option("--out", out, "Score container; the mask goes to <stem>.mask.saft")->required();
  }

  int run(std::ostream& os) const {
    std::vector<std::pair<std::string, std::string>> f;
    flag(f, "detect.threshold", threshold);
    flag(f, "detect.patch", patch);
    flag(f, "detect.stride", stride);
    const auto cfg = common.build(f);
    require(!ref.empty() || !ref_origin.empty(), "detect needs --ref or --ref-origin", ErrorKind::Config);
    const auto P = static_cast<std::size_t>(cfg.get_int("detect.patch"));
    sar::NormalizationParams norm;
    const Tensor img = load_normalized_image(image, &norm);
    Tensor reference;
    if (!ref.empty()) {
      reference = sar::normalize_amplitude(sar::amplitude(sar::read_slc(ref)), norm);
    } else {
      const auto comma = ref_origin.find(',');
      require(comma != std::string::npos, "--ref-origin expects row,col", ErrorKind::Config);
      const std::size_t r0 = std::stoul(ref_origin.substr(0, comma)), c0 = std::stoul(ref_origin.substr(comma + 1));
      require(r0 + P <= img.dim(0) && c0 + P <= img.dim(1), "reference window leaves the image", ErrorKind::Data);
      reference = Tensor({P, P, img.dim(2)});
      for (std::size_t r = 0; r < P; ++r)
        std::copy_n(img.data() + ((r0 + r) * img.dim(1) + c0) * img.dim(2), P * img.dim(2),
                    reference.data() + r * P * img.dim(2));
    }
    const auto fx = probe::FeatureExtractor::load(checkpoint);
    const auto map = detection::detect_pattern(fx, img, reference, cfg.get_real("detect.threshold"), P,
                                               static_cast<std::size_t>(cfg.get_int("detect.stride")));
    std::vector<float> scores(map.scores.values().begin(), map.scores.values().end());
    const std::vector<std::uint32_t> shape{static_cast<std::uint32_t>(map.rows), static_cast<std::uint32_t>(map.cols)};
    io::write_tensor(out, io::RawTensor::from_float32(shape, scores));
    const std::string mask_path = sibling(out, ".mask.saft");
    io::write_tensor(mask_path, io::RawTensor::from_uint8(shape, map.mask));
    const auto kept = std::count(map.mask.begin(), map.mask.end(), std::uint8_t{1});
    os << "grid=" << map.rows << "x" << map.cols << "\nthreshold=" << fmt(map.threshold) << "\nretained=" << kept
       << "\nscores=" << out << "\nmask=" << mask_path << "\n";
    return kOk;
  }
};

struct VisualizeCmd {
  Common common;
  std::string checkpoint, image, out;
  std::optional<std::string> reducer, command;
  std::optional<long> patch, stride;

  void attach(CLI::App* cmd) {
    common.attach(cmd);
    cmd->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
    cmd->add_option("--image", image, "SLC container")->required();
    cmd->add_option("--patch", patch, "Patch size");
    cmd->add_option("--stride", stride, "Grid stride");
    cmd->add_option("--reducer", reducer, "pca or external");
    cmd->add_option("--command", command, "External reducer command with {in} and {out}");
    cmd->add_option("--out", out, "RGB container (float32 rows x cols x 3)")->required();
  }

  int run(std::ostream& os) const {
    std::vector<std::pair<std::string, std::string>> f;
    flag(f, "visualize.patch", patch);
    flag(f, "visualize.stride", stride);
    flag(f, "visualize.reducer", reducer);
    flag(f, "visualize.command", command);
    const auto cfg = common.build(f);
    const auto fx = probe::FeatureExtractor::load(checkpoint);
    const auto grid = probe::feature_map(fx, load_normalized_image(image),
                                         static_cast<std::size_t>(cfg.get_int("visualize.patch")),
                                         static_cast<std::size_t>(cfg.get_int("visualize.stride")));
    const Tensor rgb = probe::reduce_to_rgb(grid, probe::parse_reducer(cfg.get_string("visualize.reducer")),
                                            cfg.get_string("visualize.command"));
    io::write_tensor(out, rgb, io::DType::Float32);
    os << "grid=" << grid.rows << "x" << grid.cols << "\nout=" << out << "\n";
    return kOk;
  }
};

struct SynthCmd {
  Common common;
  std::string kind = "scene", spec, out, labels;
  long per_class = 100, count = 16, size = 0;

  void attach(CLI::App* cmd) {
    common.attach(cmd);
    cmd->add_option("--kind", kind, "scene, textures or segmentation")
        ->check(CLI::IsMember({"scene", "textures", "segmentation"}));
    cmd->add_option("--spec", spec, "Scene spec file (kind=scene)");
    cmd->add_option("--labels", labels, "Label map output (kind=scene)");
    cmd->add_option("--per-class", per_class, "Patches per class (kind=textures)");
    cmd->add_option("--count", count, "Scenes (kind=segmentation)");
    cmd->add_option("--size", size, "Patch or scene size (textures: 100, segmentation: 256)");
    cmd->add_option("--out", out, "Output container or dataset directory")->required();
  }

  int run(std::ostream& os) const {
    const auto cfg = common.build();
    const SeedStream seed(static_cast<std::uint64_t>(cfg.get_int("seed")));
    if (kind == "scene") {
      require(!spec.empty(), "synth --kind scene needs --spec", ErrorKind::Config);
      const auto scene = sar::synthesize_scene(sar::parse_scene_spec(io::read_text_file(spec)), seed);
      sar::write_slc(out, scene.image);
      const std::string lbl = labels.empty() ? sibling(out, ".labels.saft") : labels;
      sar::write_labels(lbl, scene.labels, scene.image.height, scene.image.width);
      os << "image=" << out << "\nlabels=" << lbl << "\n";
    } else if (kind == "textures") {
      pretrain::SyntheticSpec s;
      require(per_class >= 1, "--per-class must be positive", ErrorKind::Config);
      s.per_class = static_cast<std::size_t>(per_class);
      if (size > 0) s.size = static_cast<std::size_t>(size);
      s.despeckle_window = static_cast<std::size_t>(cfg.get_int("despeckle.window"));
      pretrain::save_dataset(out, pretrain::synthesize_dataset(s, seed));
      os << "samples=" << s.per_class * s.classes << "\ndataset=" << out << "\n";
    } else {
      require(count >= 1, "--count must be positive", ErrorKind::Config);
      const auto n = static_cast<std::size_t>(count), sz = size > 0 ? static_cast<std::size_t>(size) : 256;
      segmentation::save_seg_dataset(out, segmentation::synthesize_seg_dataset(n, sz, seed));
      os << "scenes=" << n << "\ndataset=" << out << "\n";
    }
    return kOk;
  }
};

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument:
    case ErrorKind::Config:
    case ErrorKind::TypeMismatch:
      return kUsage;
    case ErrorKind::Numerical:
      return kNumerical;
    default:
      return kData;
  }
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Self-supervised SAR feature extraction toolkit", "safe"};
  app.require_subcommand(1);
  PretrainCmd pretrain_cmd;
  ExtractCmd extract_cmd;
  ClassifyCmd classify_cmd;
  SegTrainCmd seg_train_cmd;
  SegEvalCmd seg_eval_cmd;
  DetectCmd detect_cmd;
  VisualizeCmd visualize_cmd;
  SynthCmd synth_cmd;
  auto* c_pretrain = app.add_subcommand("pretrain", "Self-supervised pretraining");
  auto* c_extract = app.add_subcommand("extract", "Write feature vectors of a dataset");
  auto* c_classify = app.add_subcommand("classify", "Few-shot classification with frozen features");
  auto* c_seg_train = app.add_subcommand("segment-train", "Train the segmentation head");
  auto* c_seg_eval = app.add_subcommand("segment-eval", "Evaluate a segmentation head");
  auto* c_detect = app.add_subcommand("detect", "Reference-patch pattern detection");
  auto* c_visualize = app.add_subcommand("visualize", "Feature map reduced to RGB");
  auto* c_synth = app.add_subcommand("synth", "Synthetic scenes and datasets");
  pretrain_cmd.attach(c_pretrain);
  extract_cmd.attach(c_extract);
  classify_cmd.attach(c_classify);
  seg_train_cmd.attach(c_seg_train);
  seg_eval_cmd.attach(c_seg_eval);
  detect_cmd.attach(c_detect);
  visualize_cmd.attach(c_visualize);
  synth_cmd.attach(c_synth);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kUsage;
  }

  try {
    if (c_pretrain->parsed()) return pretrain_cmd.run(out);
    if (c_extract->parsed()) return extract_cmd.run(out);
    if (c_classify->parsed()) return classify_cmd.run(out);
    if (c_seg_train->parsed()) return seg_train_cmd.run(out);
    if (c_seg_eval->parsed()) return seg_eval_cmd.run(out);
    if (c_detect->parsed()) return detect_cmd.run(out);
    if (c_visualize->parsed()) return visualize_cmd.run(out);
    if (c_synth->parsed()) return synth_cmd.run(out);
  } catch (const Error& e) {
    err << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error (io): " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  }
  err << app.help();
  return kUsage;
}

}  // namespace safe::cli
