// Acceptance runner: one PASS/FAIL line per criterion.
// Usage: acceptance [criterion ...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "cli.hpp"
#include "oracles.hpp"
#include "safe/augment/augment.hpp"
#include "safe/detection/detection.hpp"
#include "safe/encoder/encoder.hpp"
#include "safe/io/exchange.hpp"
#include "safe/kernels/kernels.hpp"
#include "safe/objective/objective.hpp"
#include "safe/pretrain/pretrain.hpp"
#include "safe/probe/probe.hpp"
#include "safe/sar/sar.hpp"
#include "safe/segmentation/segmentation.hpp"
#include "spectral.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
namespace safe {
namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Scratch space for artifacts; SAFE_ACCEPTANCE_DIR keeps them around.
fs::path work_dir() {
  static const fs::path dir = [] {
    if (const char* env = std::getenv("SAFE_ACCEPTANCE_DIR")) {
      fs::create_directories(env);
      return fs::path(env);
    }
    return io::make_temp_dir("safe-acceptance");
  }();
  return dir;
}

io::RunConfig tiny_config() {
  return io::parse_config(
      "seed=0\n"
      "encoder.token_size=8\nencoder.embed_dim=64\nencoder.depth=2\nencoder.heads=2\nencoder.mlp_ratio=4\n"
      "head.layers=3\nhead.hidden=128\nhead.out_dim=64\nobjective.prototypes=256\n"
      "train.batch_size=64\ntrain.epochs=5\ntrain.warmup_epochs=1\ntrain.checkpoint_every=0\n");
}

// ---- 1 -------------------------------------------------------------------

void objective_gradients(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  SeedStream rng(101);
  const std::size_t b = 2, k = 3, n = 5, d = 7;
  const objective::ObjectiveParams params;
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor th = testing::random_tensor({b, d}, rng), sh = testing::random_tensor({b * (k - 1), d}, rng);
    const Tensor Q = testing::random_tensor({d, n}, rng);
    const auto res = objective::evaluate(th, sh, Q, params);
    const auto targets = oracle::teacher_targets(th, Q, params.tau_teacher);
    auto loss = [&](const Tensor& s, const Tensor& q) {
      return oracle::total_loss(targets, s, q, params.tau_student, params.lambda, params.entropy_sign);
    };
    worst = std::max(worst, testing::max_gradient_error([&](const Tensor& x) { return loss(x, Q); }, sh,
                                                        res.grad_student_h));
    worst = std::max(worst, testing::max_gradient_error([&](const Tensor& x) { return loss(sh, x); }, Q,
                                                        res.grad_prototypes));
  }
  const double t = seconds_since(t0);
  o.check(worst < 1e-4, "relative error >= 1e-4");
  o.check(t < 10.0, "runtime >= 10 s");
  o.detail << "max rel err " << worst << ", " << t << " s";
}

// ---- 2 -------------------------------------------------------------------

void loss_oracles(Outcome& o) {
  SeedStream rng(202);
  double ce_err = 0.0, r_err = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t b = 1 + rng.below(4), views = 1 + rng.below(5);
    const std::size_t n = 2 + rng.below(30), d = 2 + rng.below(10);
    const Tensor th = testing::random_tensor({b, d}, rng), sh = testing::random_tensor({b * views, d}, rng);
    const Tensor Q = testing::random_tensor({d, n}, rng);
    const objective::ObjectiveParams params;
    const auto res = objective::evaluate(th, sh, Q, params);
    const auto teacher = oracle::teacher_targets(th, Q, params.tau_teacher);
    std::vector<std::vector<std::vector<double>>> students(b);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < views; ++j)
        students[i].push_back(oracle::softmax(oracle::cosine_scores(sh, i * views + j, Q), params.tau_student));
    ce_err = std::max(ce_err, std::abs(res.cross_entropy - oracle::cross_entropy(teacher, students)));
    r_err = std::max(r_err, std::abs(res.mean_entropy - oracle::mean_entropy(students)));
  }
  o.check(ce_err <= 1e-9, "L_ce");
  o.check(r_err <= 1e-9, "R");
  o.detail << "max |dL_ce| " << ce_err << ", max |dR| " << r_err;
}

// ---- 3 -------------------------------------------------------------------

void metric_oracles(Outcome& o) {
  SeedStream rng(303);
  double worst = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t n = 2 + rng.below(6);
    segmentation::ConfusionMatrix x{n, std::vector<std::int64_t>(n * n)};
    std::vector<std::vector<std::int64_t>> nested(n, std::vector<std::int64_t>(n));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const auto v = rng.uniform() < 0.15 ? 0 : static_cast<std::int64_t>(rng.below(1000));
        x.counts[i * n + j] = nested[i][j] = v + (i == j && inst % 7 == 0 ? 5000 : 0);
      }
    if (x.total() == 0) x.counts[0] = nested[0][0] = 1;
    const auto got = segmentation::seg_metrics(x);
    const auto want = oracle::seg_metrics(nested);
    worst = std::max({worst, std::abs(got.oa - want.oa), std::abs(got.aa - want.aa),
                      std::abs(got.kappa - want.kappa), std::abs(got.miou - want.miou)});
  }
  const segmentation::ConfusionMatrix perfect{3, {10, 0, 0, 0, 20, 0, 0, 0, 30}};
  const auto p = segmentation::seg_metrics(perfect);
  o.check(worst <= 1e-12, "formula mismatch");
  o.check(p.oa == 1.0 && p.aa == 1.0 && p.kappa == 1.0 && p.miou == 1.0, "perfect prediction");
  o.detail << "max abs err " << worst << ", perfect (" << p.oa << "," << p.aa << "," << p.kappa << "," << p.miou
           << ")";
}

// ---- 4 -------------------------------------------------------------------

void subaperture(Outcome& o) {
  SeedStream rng(404);
  const auto spec = pretrain::class_scene(1, 100, 1, rng);
  const auto slc = sar::synthesize_scene(spec, rng.derive("speckle")).image;

  const auto same = augment::subaperture_decompose(slc, {1.0, 1.0, false});
  double round_trip = 0.0;
  for (std::size_t i = 0; i < slc.samples.size(); ++i)
    round_trip = std::max(round_trip, double(std::abs(same.samples[i] - slc.samples[i])));

  const auto small = augment::subaperture_decompose(slc, {0.32, 0.32, false});

  const auto in = spectral::white_noise(100, 100, rng);
  const auto out = augment::subaperture_plane(in, {0.5, 0.5, false});
  const auto X = spectral::dft2(in);
  double kept = 0.0, total = 0.0, e_in = 0.0, e_out = 0.0;
  for (std::size_t u = 0; u < 100; ++u)
    for (std::size_t v = 0; v < 100; ++v) {
      const double e = std::norm(X[u * 100 + v]);
      total += e;
      if (spectral::in_band(u, 100, 50) && spectral::in_band(v, 100, 50)) kept += e;
    }
  for (auto z : in.data) e_in += std::norm(z);
  for (auto z : out.data) e_out += std::norm(z);
  const double parseval = std::max(testing::rel_error(e_in, total / 1e4), testing::rel_error(e_out / e_in, kept / total));

  o.check(round_trip < 1e-5, "rho=1 round trip");
  o.check(small.height == 32 && small.width == 32, "100 -> 32 at rho 0.32");
  o.check(parseval <= 1e-6, "Parseval");
  o.detail << "round trip " << round_trip << ", size " << small.height << "x" << small.width << ", energy rel err "
           << parseval;
}

// ---- 5 -------------------------------------------------------------------

void ema_contract(Outcome& o) {
  SeedStream rng(505);
  auto table = [&] {
    nn::ParamTable t;
    t.add("w", testing::random_tensor({4, 5}, rng));
    t.add("b", testing::random_tensor({5}, rng));
    return t;
  };
  const auto teacher = table(), student = table();
  auto fixed = teacher;
  objective::ema_update(fixed, student, 1.0);
  auto copy = teacher;
  objective::ema_update(copy, student, 0.0);

  std::vector<nn::ParamTable> students;
  std::vector<double> momenta;
  auto run = teacher;
  for (int s = 0; s < 5; ++s) {
    students.push_back(table());
    momenta.push_back(0.9 + 0.02 * s);
    objective::ema_update(run, students.back(), momenta.back());
  }
  const auto want = oracle::ema_trajectory(teacher, students, momenta);
  double worst = 0.0;
  for (std::size_t p = 0; p < want.count(); ++p)
    for (std::size_t e = 0; e < want[p].size(); ++e) worst = std::max(worst, std::abs(run[p][e] - want[p][e]));

  o.check(fixed == teacher, "m=1 fixed point");
  o.check(copy == student, "m=0 copy");
  o.check(worst <= 1e-12, "trajectory");
  o.detail << "trajectory max abs err " << worst;
}

// ---- 6 -------------------------------------------------------------------

void variable_size_encoder(Outcome& o) {
  const encoder::EncoderConfig cfg;
  const encoder::Encoder enc(cfg);
  const auto weights = encoder::init_encoder(cfg, SeedStream(606));
  SeedStream rng(607);
  for (std::size_t size : {32, 48, 64}) {
    const Tensor z = enc.encode(testing::random_tensor({size, size, 1}, rng, 0.0, 1.0), weights);
    const bool ok = z.size() == 192 && std::all_of(z.values().begin(), z.values().end(), [](double v) {
      return std::isfinite(v);
    });
    o.check(ok, std::to_string(size) + "x" + std::to_string(size));
    o.detail << size << "x" << size << " -> " << z.size() << ", ";
  }
  const auto seq = encoder::tokenize(testing::random_tensor({64, 64, 1}, rng, 0.0, 1.0), weights, cfg);
  const auto masked = encoder::mask_tokens(seq, 0.3, rng);
  const std::size_t n = seq.kept.size();
  const auto expected = n - static_cast<std::size_t>(std::lround(0.3 * double(n)));
  o.check(masked.kept.size() == expected && masked.tokens.rows() == expected, "mask keep count");
  o.detail << n << " tokens -> " << masked.kept.size() << " kept";
}

// ---- 7 -------------------------------------------------------------------

struct Trained {
  fs::path checkpoint;
  pretrain::Dataset data;
};

/// Pretrains the tiny model once and shares it with criteria 8 and 9.
const Trained& trained(Outcome* o = nullptr) {
  static std::vector<pretrain::EpochSummary> epochs;
  static double train_seconds = 0.0;
  static const Trained t = [] {
    Trained r;
    pretrain::SyntheticSpec spec;
    spec.per_class = 667;
    r.data = pretrain::synthesize_dataset(spec, SeedStream(1));
    pretrain::PretrainOptions opt;
    opt.out = work_dir() / "pretrain";
    opt.on_epoch = [](const pretrain::EpochSummary& s) {
      epochs.push_back(s);
      std::printf("  epoch %ld loss %.4f usage entropy %.4f\n", s.epoch, s.mean_loss, s.usage_entropy);
      std::fflush(stdout);
    };
    const auto t0 = std::chrono::steady_clock::now();
    r.checkpoint = pretrain::pretrain(tiny_config(), r.data, opt).checkpoint;
    train_seconds = seconds_since(t0);
    return r;
  }();
  if (o) {
    const double floor = 0.5 * std::log(256.0);
    double lowest = INFINITY;
    for (const auto& e : epochs) lowest = std::min(lowest, e.usage_entropy);
    o->check(!epochs.empty() && lowest >= floor, "usage entropy below 0.5 log 256");
    o->detail << t.data.size() << " patches, " << epochs.size() << " epochs in " << train_seconds
              << " s, min usage entropy " << lowest << " (floor " << floor << "), ";
  }
  return t;
}

void desk_scale_learning(Outcome& o) {
  const auto& t = trained(&o);
  const auto fx = probe::FeatureExtractor::load(t.checkpoint);
  const auto crop = static_cast<std::size_t>(tiny_config().get_int("augment.global_size"));
  const auto feats =
      probe::extract_features(fx, probe::center_patches(pretrain::normalized_images(t.data), crop), t.data.labels);
  std::map<std::size_t, double> acc;
  for (std::size_t L : {1, 5, 50}) {
    probe::FewShotConfig fc;
    fc.labels_per_class = L;
    fc.trials = 10;
    fc.method = probe::ProbeMethod::Knn;
    acc[L] = probe::fewshot_eval(feats, fc, SeedStream(7)).mean;
  }
  o.check(acc[5] >= 0.80, "k-NN L=5 accuracy < 0.80");
  o.check(acc[50] - acc[1] >= 0.0, "L=50 below L=1");
  o.detail << "k-NN acc L=1 " << acc[1] << ", L=5 " << acc[5] << ", L=50 " << acc[50];
}

// ---- 8 -------------------------------------------------------------------

void segmentation_learning(Outcome& o) {
  segmentation::SegConfig shape_cfg;
  shape_cfg.in_dim = 16;
  shape_cfg.reduce_dim = 8;
  segmentation::MultiScaleFeatures grid;
  grid.height = grid.width = 512;
  SeedStream rng(808);
  for (auto& m : grid.maps) m = testing::random_tensor({16, 16, 16}, rng);
  const Tensor logits = segmentation::seg_forward(grid, segmentation::init_seg_head(shape_cfg, SeedStream(809)));
  o.check(logits.shape() == Shape{3, 512, 512}, "output shape");
  o.detail << "16x16 grids -> " << logits.dim(0) << "x" << logits.dim(1) << "x" << logits.dim(2) << ", ";

  const auto t0 = std::chrono::steady_clock::now();
  const auto fx = probe::FeatureExtractor::load(trained().checkpoint);
  std::vector<segmentation::SegSample> data;
  for (const auto& s : segmentation::synthesize_seg_dataset(16, 256, SeedStream(5)))
    data.push_back({segmentation::multiscale_features(fx, segmentation::normalized_scene(s.image), {16, 32, 64}, 32),
                    s.labels});
  segmentation::SegConfig head;
  head.in_dim = fx.model().encoder.config().embed_dim;
  segmentation::SegTrainConfig tc;
  tc.epochs = 50;
  tc.lr = 1e-3;
  const auto res = segmentation::seg_train(data, head, tc, SeedStream(9));
  o.check(res.validation.miou >= 0.70, "validation mIoU < 0.70");
  o.detail << "validation mIoU " << res.validation.miou << " (OA " << res.validation.oa << ") after " << tc.epochs
           << " epochs, " << seconds_since(t0) << " s";
}

// ---- 9 -------------------------------------------------------------------

void detection_contract(Outcome& o) {
  const auto fx = probe::FeatureExtractor::load(trained().checkpoint);
  SeedStream rng(909);
  auto spec = pretrain::class_scene(2, 128, 1, rng);
  const Tensor img = segmentation::normalized_scene(sar::synthesize_scene(spec, rng.derive("speckle")).image);
  const std::size_t P = 32, S = 8, cell_r = 5, cell_c = 9;
  const auto r0 = static_cast<std::size_t>(sar::padded_origin(cell_r, P, S));
  const auto c0 = static_cast<std::size_t>(sar::padded_origin(cell_c, P, S));
  Tensor ref({P, P, 1});
  for (std::size_t y = 0; y < P; ++y)
    for (std::size_t x = 0; x < P; ++x) ref[y * P + x] = img[(r0 + y) * img.dim(1) + c0 + x];

  const auto map = detection::detect_pattern(fx, img, ref, 0.8, P, S);
  const double self = map.scores(cell_r, cell_c);
  o.check(std::abs(self - 1.0) <= 1e-9, "self-match score");
  o.check(map.mask[cell_r * map.cols + cell_c] == 1, "self-match retained at 0.8");

  bool monotone = true;
  std::vector<std::uint8_t> prev(map.mask.size(), 1);
  const double lowest = *std::min_element(map.scores.values().begin(), map.scores.values().end());
  o.detail << "self score " << self << ", lowest score " << lowest << ", retained of " << map.mask.size() << ":";
  for (double t : {0.5, 0.6, 0.7, 0.8, 0.9}) {
    const auto m = detection::threshold_scores(map.scores, t);
    for (std::size_t i = 0; i < m.mask.size(); ++i) monotone = monotone && m.mask[i] <= prev[i];
    prev = m.mask;
    o.detail << " " << t << ":" << std::count(m.mask.begin(), m.mask.end(), std::uint8_t{1});
  }
  o.check(monotone, "mask not monotone");
}

// ---- 10 ------------------------------------------------------------------

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) {
      std::ifstream in(e.path(), std::ios::binary);
      files[fs::relative(e.path(), root).string()] = {std::istreambuf_iterator<char>(in), {}};
    }
  return files;
}

int invoke(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::cli_main(args, out, err);
  if (code != 0) std::printf("  %s\n", err.str().c_str());
  return code;
}

void cli_determinism(Outcome& o) {
  const fs::path base = work_dir() / "determinism";
  fs::remove_all(base);
  fs::create_directories(base);
  std::ofstream(base / "run.cfg") << tiny_config().to_text();
  sar::SceneSpec scene;
  scene.height = 96;
  scene.width = 128;
  sar::Region ground, field;
  ground.polygon = {{0, 0}, {0, 128}, {96, 128}, {96, 0}};
  ground.reflectivity = 0.2;
  field.polygon = {{16, 16}, {16, 80}, {80, 80}, {80, 16}};
  field.texture = sar::Texture::PointScattererField;
  scene.regions = {ground, field};
  std::ofstream(base / "scene.cfg") << sar::scene_spec_text(scene);
  const std::string cfg = (base / "run.cfg").string();

  std::map<std::string, std::map<std::string, std::string>> runs[2];
  for (int r = 0; r < 2; ++r) {
    const fs::path dir = base / ("run" + std::to_string(r));
    const std::string d = dir.string();
    int code = 0;
    code |= invoke({"synth", "--kind", "textures", "--per-class", "30", "--seed", "7", "--out", d + "/data"});
    code |= invoke({"pretrain", "--config", cfg, "--data", d + "/data", "--out", d + "/pretrain", "--max-steps", "3",
                    "--seed", "7"});
    code |= invoke({"synth", "--spec", (base / "scene.cfg").string(), "--seed", "7", "--out", d + "/synth/scene.saft"});
    code |= invoke({"detect", "--checkpoint", d + "/pretrain/checkpoint", "--image", d + "/synth/scene.saft",
                    "--ref-origin", "24,24", "--out", d + "/detect/scores.saft", "--seed", "7"});
    code |= invoke({"visualize", "--checkpoint", d + "/pretrain/checkpoint", "--image", d + "/synth/scene.saft",
                    "--reducer", "pca", "--out", d + "/visualize/rgb.saft", "--seed", "7"});
    o.check(code == 0, "a command failed");
    for (const char* stage : {"pretrain", "synth", "detect", "visualize"}) runs[r][stage] = snapshot(dir / stage);
  }
  for (const char* stage : {"pretrain", "synth", "detect", "visualize"}) {
    const bool same = !runs[0][stage].empty() && runs[0][stage] == runs[1][stage];
    o.check(same, std::string(stage) + " artifacts differ");
    o.detail << stage << " " << runs[0][stage].size() << " files " << (same ? "identical" : "differ") << "; ";
  }
}

}  // namespace
}  // namespace safe

int main(int argc, char** argv) {
  using namespace safe;
  kernels::apply_worker_env();
  const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria{
      {"objective gradients", objective_gradients},  {"loss oracles", loss_oracles},
      {"metric oracles", metric_oracles},            {"sub-aperture invariants", subaperture},
      {"EMA contract", ema_contract},                {"variable-size encoder", variable_size_encoder},
      {"desk-scale learning", desk_scale_learning},  {"segmentation", segmentation_learning},
      {"detection", detection_contract},             {"determinism", cli_determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      criteria[i].second(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "[exception: " << e.what() << "]";
    }
    failures += o.pass ? 0 : 1;
    std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(),
                o.detail.str().c_str());
    std::fflush(stdout);
  }
  if (!std::getenv("SAFE_ACCEPTANCE_DIR")) fs::remove_all(work_dir());
  return failures == 0 ? 0 : 1;
}
