#include "safe/pretrain/pretrain.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "safe/error.hpp"
#include "safe/io/exchange.hpp"
#include "safe/io/tensor_file.hpp"

namespace safe::pretrain {

namespace fs = std::filesystem;

// ---- schedules -----------------------------------------------------------

void ScheduleSpec::validate() const {
  require(warmup >= 0 && total >= warmup, "schedule needs total >= warmup >= 0");
}

ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "linear") return ScheduleKind::Linear;
  if (name == "cosine") return ScheduleKind::Cosine;
  if (name == "warmup_then_cosine") return ScheduleKind::WarmupThenCosine;
  if (name == "constant") return ScheduleKind::Constant;
  fail(ErrorKind::Config, "unknown schedule kind '" + name + "'");
}

namespace {

double cosine_between(double start, double end, long step, long total) {
  if (total == 0) return start;
  const double t = static_cast<double>(step) / static_cast<double>(total);
  return end + (start - end) * (1.0 + std::cos(std::numbers::pi * t)) / 2.0;
}

}  // namespace

double schedule_value(const ScheduleSpec& spec, long step) {
  spec.validate();
  require(step >= 0 && step <= spec.total,
          "schedule step " + std::to_string(step) + " outside [0, " + std::to_string(spec.total) + "]");
  switch (spec.kind) {
    case ScheduleKind::Constant:
      return spec.start;
    case ScheduleKind::Linear:
      if (spec.total == 0) return spec.start;
      return spec.start + (spec.end - spec.start) * static_cast<double>(step) / static_cast<double>(spec.total);
    case ScheduleKind::Cosine:
      return cosine_between(spec.start, spec.end, step, spec.total);
    case ScheduleKind::WarmupThenCosine:
      if (step < spec.warmup) return spec.start * static_cast<double>(step) / static_cast<double>(spec.warmup);
      return cosine_between(spec.start, spec.end, step - spec.warmup, spec.total - spec.warmup);
  }
  return spec.start;
}

Hyper Hyper::from_config(const io::RunConfig& config, long steps_per_epoch, long total_steps) {
  Hyper h;
  const long warmup = std::min(total_steps, config.get_int("train.warmup_epochs") * steps_per_epoch);
  h.lr = {ScheduleKind::WarmupThenCosine, config.get_real("train.lr"), config.get_real("train.lr_final"), warmup,
          total_steps};
  h.weight_decay = {ScheduleKind::Cosine, config.get_real("train.wd_start"), config.get_real("train.wd_end"), 0,
                    total_steps};
  h.momentum = {ScheduleKind::Linear, config.get_real("train.momentum_start"),
                config.get_real("train.momentum_end"), 0, total_steps};
  h.objective = objective::ObjectiveParams::from_config(config);
  h.mask_p = config.get_real("augment.mask_p");
  h.grad_clip = config.get_real("train.grad_clip");
  return h;
}

// ---- dataset -------------------------------------------------------------

void save_dataset(const fs::path& dir, const Dataset& data) {
  require(data.size() > 0, "dataset is empty", ErrorKind::Data);
  const auto& first = data.samples.front().slc;
  const std::size_t n = data.size(), h = first.height, w = first.width, c = first.channels;
  std::vector<std::complex<float>> slc;
  std::vector<float> desp;
  std::vector<double> norm;
  slc.reserve(n * h * w * c);
  desp.reserve(n * h * w * c);
  for (const auto& s : data.samples) {
    require(s.slc.height == h && s.slc.width == w && s.slc.channels == c, "dataset patches differ in shape",
            ErrorKind::ShapeMismatch);
    slc.insert(slc.end(), s.slc.samples.begin(), s.slc.samples.end());
    for (double v : s.despeckled.values()) desp.push_back(static_cast<float>(v));
    norm.push_back(s.norm.m_s);
    norm.push_back(s.norm.M_s);
  }
  const std::vector<std::uint32_t> shape{static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(h),
                                         static_cast<std::uint32_t>(w), static_cast<std::uint32_t>(c)};
  fs::create_directories(dir);
  io::write_tensor(dir / "slc.saft", io::RawTensor::from_complex64(shape, slc));
  io::write_tensor(dir / "despeckled.saft", io::RawTensor::from_float32(shape, desp));
  io::write_tensor(dir / "norm.saft", io::RawTensor::from_float64({static_cast<std::uint32_t>(n), 2}, norm));
  if (!data.labels.empty()) {
    require(data.labels.size() == n, "label count differs from sample count", ErrorKind::ShapeMismatch);
    io::write_tensor(dir / "labels.saft",
                     io::RawTensor::from_int32({static_cast<std::uint32_t>(n)},
                                               std::vector<std::int32_t>(data.labels.begin(), data.labels.end())));
  }
}

Dataset load_dataset(const fs::path& dir) {
  require(fs::is_directory(dir), "dataset " + dir.string() + " is not a directory", ErrorKind::Io);
  const auto slc = io::read_tensor(dir / "slc.saft");
  const auto desp = io::read_tensor(dir / "despeckled.saft");
  const auto norm = io::read_tensor(dir / "norm.saft");
  require(slc.shape.size() == 4 && slc.shape == desp.shape, "slc and despeckled containers must be N x H x W x C",
          ErrorKind::Data);
  const std::size_t n = slc.shape[0], h = slc.shape[1], w = slc.shape[2], c = slc.shape[3];
  require(n > 0, "dataset is empty", ErrorKind::Data);
  require(norm.shape == std::vector<std::uint32_t>{slc.shape[0], 2}, "norm container must be N x 2", ErrorKind::Data);
  const auto z = slc.to_complex64();
  const auto a = desp.to_float64();
  const auto m = norm.to_float64();
  Dataset out;
  const std::size_t per = h * w * c;
  for (std::size_t i = 0; i < n; ++i) {
    augment::TrainingSample s;
    s.slc.height = h;
    s.slc.width = w;
    s.slc.channels = c;
    s.slc.samples.assign(z.begin() + static_cast<std::ptrdiff_t>(i * per),
                         z.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    s.slc.validate();
    s.despeckled = Tensor({h, w, c}, std::vector<double>(a.begin() + static_cast<std::ptrdiff_t>(i * per),
                                                         a.begin() + static_cast<std::ptrdiff_t>((i + 1) * per)));
    s.norm = {m[2 * i], m[2 * i + 1]};
    require(s.norm.M_s > s.norm.m_s, "normalization bounds of sample " + std::to_string(i) + " are not ordered",
            ErrorKind::Data);
    out.samples.push_back(std::move(s));
  }
  if (fs::exists(dir / "labels.saft")) {
    const auto labels = io::read_tensor(dir / "labels.saft").to_int32();
    require(labels.size() == n, "label count differs from sample count", ErrorKind::Data);
    out.labels.assign(labels.begin(), labels.end());
  }
  return out;
}

sar::SceneSpec class_scene(std::size_t cls, std::size_t size, std::size_t channels, SeedStream& rng) {
  sar::SceneSpec spec;
  spec.height = spec.width = size;
  spec.channels = channels;
  const double s = static_cast<double>(size);
  sar::Region r;
  r.polygon = {{0, 0}, {0, s}, {s, s}, {s, 0}};
  r.reflectivity = rng.uniform(0.7, 1.4);
  r.label = static_cast<int>(cls);
  switch (cls % 3) {
    case 0:
      r.texture = sar::Texture::Flat;
      break;
    case 1:
      r.texture = sar::Texture::Furrowed;
      r.period = rng.uniform(6.0, 14.0);
      r.angle_deg = rng.uniform(0.0, 180.0);
      r.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      break;
    default:
      r.texture = sar::Texture::PointScattererField;
      r.density = rng.uniform(0.02, 0.05);
      r.contrast = rng.uniform(10.0, 30.0);
      break;
  }
  spec.regions.push_back(r);
  return spec;
}

augment::TrainingSample make_sample(sar::SlcImage slc, const sar::Despeckler& despeckler) {
  augment::TrainingSample s;
  s.norm = sar::percentile_params(sar::amplitude(slc));
  s.despeckled = despeckler.despeckle(slc);
  s.slc = std::move(slc);
  return s;
}

std::vector<Tensor> normalized_images(const Dataset& data) {
  std::vector<Tensor> out;
  out.reserve(data.size());
  for (const auto& s : data.samples) out.push_back(sar::normalize_amplitude(sar::amplitude(s.slc), s.norm));
  return out;
}

Dataset synthesize_dataset(const SyntheticSpec& spec, const SeedStream& seed) {
  require(spec.classes >= 1 && spec.classes <= 3, "synthetic datasets have 1 to 3 classes");
  require(spec.per_class >= 1 && spec.size >= 8, "synthetic dataset is too small");
  const sar::BoxcarDespeckler despeckler(spec.despeckle_window);
  const std::size_t n = spec.per_class * spec.classes;
  Dataset out;
  out.samples.resize(n);
  out.labels.resize(n);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const std::size_t cls = i % spec.classes;
    SeedStream rng = seed.derive("dataset-sample", i);
    const auto scene = sar::synthesize_scene(class_scene(cls, spec.size, spec.channels, rng), rng.derive("speckle"));
    out.samples[i] = make_sample(scene.image, despeckler);
    out.labels[i] = static_cast<int>(cls);
  }
  return out;
}

// ---- training ------------------------------------------------------------

ModelShape ModelShape::from_config(const io::RunConfig& config) {
  ModelShape s;
  s.encoder = encoder::EncoderConfig::from_config(config);
  s.head = objective::HeadConfig::from_config(config);
  s.prototypes = static_cast<std::size_t>(config.get_int("objective.prototypes"));
  require(s.prototypes >= 2, "objective.prototypes must be at least 2", ErrorKind::Config);
  return s;
}

std::size_t TrainState::encoder_count() const { return 4 + 12 * shape.encoder.depth; }

TrainState init_state(const io::RunConfig& config) {
  TrainState s;
  s.shape = ModelShape::from_config(config);
  s.seed = SeedStream(static_cast<std::uint64_t>(config.get_int("seed")));
  const SeedStream init = s.seed.derive("init");
  s.student.append(encoder::init_encoder(s.shape.encoder, init), encoder::kEncoderPrefix);
  s.student.append(objective::init_head(s.shape.head, init));
  s.teacher = s.student;
  s.prototypes.add("prototypes", objective::init_prototypes(s.shape.head.out_dim, s.shape.prototypes, init));
  s.optimizer = nn::AdamW(config.get_real("train.beta1"), config.get_real("train.beta2"), config.get_real("train.eps"));
  s.prototype_optimizer = s.optimizer;
  s.optimizer.init(s.student);
  s.prototype_optimizer.init(s.prototypes);
  return s;
}

namespace {

struct Branch {
  std::vector<nn::Var> encoder;
  std::vector<nn::Var> head;
};

Branch split(const std::vector<nn::Var>& vars, std::size_t encoder_count) {
  return {std::vector<nn::Var>(vars.begin(), vars.begin() + static_cast<std::ptrdiff_t>(encoder_count)),
          std::vector<nn::Var>(vars.begin() + static_cast<std::ptrdiff_t>(encoder_count), vars.end())};
}

nn::Var network(nn::Tape& t, const TrainState& s, const Branch& b, const Tensor& view,
                const std::vector<std::size_t>& keep) {
  const encoder::Encoder enc(s.shape.encoder);
  const auto z = enc.forward(t, t.constant(view), b.encoder, keep);
  return objective::project(t, z, b.head, s.shape.head);
}

bool all_finite(const nn::ParamTable& t) {
  for (std::size_t i = 0; i < t.count(); ++i)
    for (double v : t[i].values())
      if (!std::isfinite(v)) return false;
  return true;
}

std::string fmt(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

}  // namespace

StepResult pretrain_step(const std::vector<augment::ViewBundle>& batch, TrainState& state, const Hyper& hyper) {
  require(!batch.empty(), "pretrain_step needs a nonempty batch", ErrorKind::Data);
  const std::size_t b = batch.size(), views = batch.front().student_views.size();
  require(views >= 1, "view bundles need at least one student view", ErrorKind::Data);
  for (const auto& bundle : batch)
    require(bundle.student_views.size() == views, "view bundles differ in view count", ErrorKind::Data);

  StepResult res;
  res.lr = schedule_value(hyper.lr, state.step);
  res.weight_decay = schedule_value(hyper.weight_decay, state.step);
  res.momentum = schedule_value(hyper.momentum, state.step);

  const std::size_t ec = state.encoder_count(), d_g = state.shape.head.out_dim;
  const std::size_t token = state.shape.encoder.token_size;
  const SeedStream mask_seed = state.seed.derive("mask", static_cast<std::uint64_t>(state.step));

  // Teacher targets.
  Tensor teacher_h({b, d_g});
  for (std::size_t i = 0; i < b; ++i) {
    nn::Tape t;
    const auto h = network(t, state, split(nn::bind(t, state.teacher), ec), batch[i].teacher_view, {});
    std::copy_n(t.value(h).data(), d_g, teacher_h.data() + i * d_g);
  }

  // Student projections without a tape; the graph is rebuilt per view below.
  const std::size_t N = b * views;
  std::vector<std::vector<std::size_t>> keep(N);
  Tensor student_h({N, d_g});
  for (std::size_t r = 0; r < N; ++r) {
    const Tensor& view = batch[r / views].student_views[r % views];
    const std::size_t tokens = (view.dim(0) / token) * (view.dim(1) / token);
    SeedStream rng = mask_seed.derive("view", r);
    keep[r] = encoder::mask_keep_indices(tokens, hyper.mask_p, rng);
    nn::Tape t;
    const auto h = network(t, state, split(nn::bind(t, state.student), ec), view, keep[r]);
    std::copy_n(t.value(h).data(), d_g, student_h.data() + r * d_g);
  }

  const auto& Q = state.prototypes[0];
  auto obj = objective::evaluate(teacher_h, student_h, Q, hyper.objective);
  res.cross_entropy = obj.cross_entropy;
  res.mean_entropy = obj.mean_entropy;
  res.total = obj.total;
  if (!std::isfinite(obj.total))
    fail(ErrorKind::Numerical, "non-finite loss at step " + std::to_string(state.step) + " (L_ce=" +
                                   fmt(obj.cross_entropy) + ", R=" + fmt(obj.mean_entropy) + ")");

  nn::ParamTable grads = state.student.zeros_like();
  nn::ParamTable proto_grads = state.prototypes.zeros_like();
  proto_grads[0] = obj.grad_prototypes;
  for (std::size_t r = 0; r < N; ++r) {
    nn::Tape t;
    const Tensor& view = batch[r / views].student_views[r % views];
    const auto h = network(t, state, split(nn::bind(t, state.student, &grads), ec), view, keep[r]);
    Tensor seed({1, d_g});
    std::copy_n(obj.grad_student_h.data() + r * d_g, d_g, seed.data());
    t.backward(h, seed);
  }

  const double gn = std::hypot(nn::global_norm(grads), nn::global_norm(proto_grads));
  res.grad_norm = gn;
  if (!std::isfinite(gn) || !all_finite(grads))
    fail(ErrorKind::Numerical, "non-finite gradient at step " + std::to_string(state.step) + " (loss " +
                                   fmt(obj.total) + ")");
  if (hyper.grad_clip > 0.0 && gn > hyper.grad_clip) {
    nn::scale_all(grads, hyper.grad_clip / gn);
    nn::scale_all(proto_grads, hyper.grad_clip / gn);
  }

  state.optimizer.step(state.student, grads, res.lr, res.weight_decay);
  state.prototype_optimizer.step(state.prototypes, proto_grads, res.lr, res.weight_decay);
  objective::ema_update(state.teacher, state.student, res.momentum);
  ++state.step;

  res.mean_p.assign(Q.cols(), 0.0);
  for (std::size_t r = 0; r < N; ++r)
    for (std::size_t l = 0; l < Q.cols(); ++l) res.mean_p[l] += obj.student_p(r, l) / static_cast<double>(N);
  return res;
}

void save_checkpoint(const fs::path& dir, const TrainState& state, const io::RunConfig& config) {
  io::replace_directory(dir, [&](const fs::path& staging) {
    std::ofstream(staging / encoder::kConfigFile) << config.to_text();
    std::ofstream(staging / "state.cfg") << "step=" << state.step << "\nadam_steps=" << state.optimizer.steps()
                                         << "\nseed_root=" << state.seed.root() << "\n";
    nn::save_params(staging, state.student, encoder::kStudentStem);
    nn::save_params(staging, state.teacher, "teacher");
    nn::save_params(staging, state.prototypes, "prototypes");
    nn::save_params(staging, state.optimizer.first_moment(), "adam_m");
    nn::save_params(staging, state.optimizer.second_moment(), "adam_v");
    nn::save_params(staging, state.prototype_optimizer.first_moment(), "proto_adam_m");
    nn::save_params(staging, state.prototype_optimizer.second_moment(), "proto_adam_v");
  });
}

TrainState load_checkpoint(const fs::path& dir, io::RunConfig* config_out) {
  require(fs::is_directory(dir), "checkpoint " + dir.string() + " is not a directory", ErrorKind::Io);
  const auto config = io::load_config(dir / encoder::kConfigFile);
  TrainState s = init_state(config);
  long adam_steps = 0;
  for (const auto& [key, value] : io::parse_key_values(io::read_text_file(dir / "state.cfg"))) {
    if (key == "step") s.step = std::stol(value);
    else if (key == "adam_steps") adam_steps = std::stol(value);
  }
  auto load_like = [&](const nn::ParamTable& like, const std::string& stem) {
    auto t = nn::load_params(dir, stem);
    require(t.same_layout(like), "checkpoint set '" + stem + "' does not match the config", ErrorKind::ShapeMismatch);
    return t;
  };
  s.student = load_like(s.student, encoder::kStudentStem);
  s.teacher = load_like(s.teacher, "teacher");
  s.prototypes = load_like(s.prototypes, "prototypes");
  s.optimizer.set_state(load_like(s.student, "adam_m"), load_like(s.student, "adam_v"), adam_steps);
  s.prototype_optimizer.set_state(load_like(s.prototypes, "proto_adam_m"), load_like(s.prototypes, "proto_adam_v"),
                                  adam_steps);
  if (config_out) *config_out = config;
  return s;
}

std::vector<std::size_t> epoch_order(std::size_t n, long epoch, const SeedStream& seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  SeedStream rng = seed.derive("epoch", static_cast<std::uint64_t>(epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

long steps_per_epoch(std::size_t samples, std::size_t batch_size) {
  require(batch_size >= 1, "batch size must be positive", ErrorKind::Config);
  return static_cast<long>((samples + batch_size - 1) / batch_size);
}

PretrainResult pretrain(const io::RunConfig& config, const Dataset& data, const PretrainOptions& options) {
  require(data.size() > 0, "dataset is empty", ErrorKind::Data);
  require(!options.out.empty(), "pretrain needs an output directory");
  const auto batch_size = static_cast<std::size_t>(config.get_int("train.batch_size"));
  const long spe = steps_per_epoch(data.size(), batch_size);
  const long total = config.get_int("train.epochs") * spe;
  const long max_steps = config.get_int("train.max_steps");
  const long limit = max_steps > 0 ? std::min(max_steps, total) : total;
  const long every = config.get_int("train.checkpoint_every");
  const Hyper hyper = Hyper::from_config(config, spe, total);
  const auto policy = augment::ViewPolicy::from_config(config);

  PretrainResult out;
  out.state = options.resume.empty() ? init_state(config) : load_checkpoint(options.resume);
  TrainState& state = out.state;
  require(state.step <= total, "checkpoint is past the configured schedule", ErrorKind::Config);

  fs::create_directories(options.out);
  const fs::path log_path = options.out / "loss.csv";
  const bool fresh = options.resume.empty() || !fs::exists(log_path);
  std::ofstream log(log_path, fresh ? std::ios::trunc : std::ios::app);
  if (!log) fail(ErrorKind::Io, "cannot write " + log_path.string());
  if (fresh) log << "step,L_ce,R,lr,wd,momentum\n";

  long cached_epoch = -1;
  std::vector<std::size_t> order;
  std::vector<double> usage;
  double loss_sum = 0.0;
  long loss_count = 0;
  while (state.step < limit) {
    const long epoch = state.step / spe, pos = state.step % spe;
    if (epoch != cached_epoch) {
      order = epoch_order(data.size(), epoch, state.seed);
      cached_epoch = epoch;
    }
    const std::size_t lo = static_cast<std::size_t>(pos) * batch_size;
    const std::size_t hi = std::min(lo + batch_size, data.size());
    std::vector<augment::ViewBundle> batch(hi - lo);
    const SeedStream view_seed = state.seed.derive("views", static_cast<std::uint64_t>(epoch));
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(hi - lo); ++j) {
      const std::size_t idx = order[lo + static_cast<std::size_t>(j)];
      batch[static_cast<std::size_t>(j)] = augment::make_views(data.samples[idx], policy, view_seed.derive("sample", idx));
    }
    const long step = state.step;
    StepResult r = pretrain_step(batch, state, hyper);
    log << step << "," << fmt(r.cross_entropy) << "," << fmt(r.mean_entropy) << "," << fmt(r.lr) << ","
        << fmt(r.weight_decay) << "," << fmt(r.momentum) << "\n";
    log.flush();

    if (usage.empty()) usage.assign(r.mean_p.size(), 0.0);
    for (std::size_t l = 0; l < usage.size(); ++l) usage[l] += r.mean_p[l];
    loss_sum += r.total;
    ++loss_count;
    out.steps.push_back(std::move(r));

    if (state.step % spe == 0 || state.step == limit) {
      EpochSummary summary;
      summary.epoch = epoch;
      summary.mean_loss = loss_sum / static_cast<double>(loss_count);
      for (double& u : usage) {
        u /= static_cast<double>(loss_count);
        if (u > 0.0) summary.usage_entropy -= u * std::log(u);
      }
      out.epochs.push_back(summary);
      if (options.on_epoch) options.on_epoch(summary);
      usage.clear();
      loss_sum = 0.0;
      loss_count = 0;
      if (every > 0 && state.step % spe == 0 && (epoch + 1) % every == 0 && state.step < limit)
        save_checkpoint(options.out / ("epoch_" + std::to_string(epoch + 1)), state, config);
    }
  }
  out.checkpoint = options.out / "checkpoint";
  save_checkpoint(out.checkpoint, state, config);
  return out;
}

}  // namespace safe::pretrain
