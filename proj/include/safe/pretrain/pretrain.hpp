#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "safe/augment/augment.hpp"
#include "safe/encoder/encoder.hpp"
#include "safe/io/config.hpp"
#include "safe/io/seed.hpp"
#include "safe/nn/params.hpp"
#include "safe/objective/objective.hpp"

namespace safe::pretrain {

// ---- schedules -----------------------------------------------------------

enum class ScheduleKind { Linear, Cosine, WarmupThenCosine, Constant };

/// warmup_then_cosine ramps linearly from 0 to `start` over `warmup` steps,
/// then follows a cosine from `start` to `end` over the remaining steps.
struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::Constant;
  double start = 0.0;
  double end = 0.0;
  long warmup = 0;
  long total = 0;

  void validate() const;
};

double schedule_value(const ScheduleSpec& spec, long step);
ScheduleKind parse_schedule_kind(const std::string& name);

struct Hyper {
  ScheduleSpec lr;
  ScheduleSpec weight_decay;
  ScheduleSpec momentum;
  objective::ObjectiveParams objective;
  double mask_p = 0.3;
  double grad_clip = 3.0;  // 0 disables clipping

  /// Schedules over `total_steps`, warmup measured in epochs.
  static Hyper from_config(const io::RunConfig& config, long steps_per_epoch, long total_steps);
};

// ---- dataset -------------------------------------------------------------

/// Training patches with despeckled twins. On disk: slc.saft (complex64
/// N x H x W x C), despeckled.saft (float32 N x H x W x C), norm.saft
/// (float64 N x 2: m_s, M_s) and optionally labels.saft (int32 N).
struct Dataset {
  std::vector<augment::TrainingSample> samples;
  std::vector<int> labels;  // empty when unlabeled

  std::size_t size() const { return samples.size(); }
};

void save_dataset(const std::filesystem::path& dir, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& dir);

/// Single-texture speckled patches, one class per texture kind (flat,
/// furrowed, point-scatterer field), with randomised reflectivity and
/// stripe geometry.
struct SyntheticSpec {
  std::size_t per_class = 100;
  std::size_t classes = 3;
  std::size_t size = 100;
  std::size_t channels = 1;
  std::size_t despeckle_window = 5;
};

sar::SceneSpec class_scene(std::size_t cls, std::size_t size, std::size_t channels, SeedStream& rng);
Dataset synthesize_dataset(const SyntheticSpec& spec, const SeedStream& seed);

/// Builds samples from SLC patches: despeckle with `despeckler` and
/// per-image percentile normalization.
/// Normalized (non-despeckled) amplitude {H,W,C} of every sample.
std::vector<Tensor> normalized_images(const Dataset& data);

augment::TrainingSample make_sample(sar::SlcImage slc, const sar::Despeckler& despeckler);

// ---- training ------------------------------------------------------------

struct ModelShape {
  encoder::EncoderConfig encoder;
  objective::HeadConfig head;
  std::size_t prototypes = 256;

  static ModelShape from_config(const io::RunConfig& config);
};

/// Student network (entries `encoder.*` then `head.*`), its EMA teacher,
/// the shared prototype bank {d_g, n} and the optimizer state.
struct TrainState {
  ModelShape shape;
  nn::ParamTable student;
  nn::ParamTable teacher;
  nn::ParamTable prototypes;  // single entry "prototypes"
  nn::AdamW optimizer;
  nn::AdamW prototype_optimizer;
  long step = 0;
  SeedStream seed;

  std::size_t encoder_count() const;
};

TrainState init_state(const io::RunConfig& config);

struct StepResult {
  double cross_entropy = 0.0;
  double mean_entropy = 0.0;
  double total = 0.0;
  double lr = 0.0;
  double weight_decay = 0.0;
  double momentum = 0.0;
  double grad_norm = 0.0;
  std::vector<double> mean_p;  // batch-averaged student distribution
};

/// One optimisation step. Throws ErrorKind::Numerical (state untouched)
/// when the loss or the gradients are not finite.
StepResult pretrain_step(const std::vector<augment::ViewBundle>& batch, TrainState& state, const Hyper& hyper);

/// Checkpoint directory: config.cfg, state.cfg, student/teacher/prototypes
/// parameter sets and the optimizer moments.
void save_checkpoint(const std::filesystem::path& dir, const TrainState& state, const io::RunConfig& config);
TrainState load_checkpoint(const std::filesystem::path& dir, io::RunConfig* config = nullptr);

struct EpochSummary {
  long epoch = 0;
  double mean_loss = 0.0;
  double usage_entropy = 0.0;  // entropy of the epoch-averaged student distribution
};

struct PretrainOptions {
  std::filesystem::path out;     // final checkpoint in out/checkpoint, log in out/loss.csv
  std::filesystem::path resume;  // optional checkpoint to continue from
  std::function<void(const EpochSummary&)> on_epoch;
};

struct PretrainResult {
  std::filesystem::path checkpoint;
  std::vector<StepResult> steps;  // steps run by this call
  std::vector<EpochSummary> epochs;
  TrainState state;
};

/// Per-epoch reshuffled mini-batches of view bundles. Everything random is
/// derived from (seed, epoch, sample), so a resumed run replays exactly.
PretrainResult pretrain(const io::RunConfig& config, const Dataset& data, const PretrainOptions& options);

std::vector<std::size_t> epoch_order(std::size_t n, long epoch, const SeedStream& seed);
long steps_per_epoch(std::size_t samples, std::size_t batch_size);

}  // namespace safe::pretrain
