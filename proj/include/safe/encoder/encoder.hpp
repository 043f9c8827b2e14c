#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <vector>

#include "safe/io/config.hpp"
#include "safe/io/seed.hpp"
#include "safe/nn/autograd.hpp"
#include "safe/nn/params.hpp"
#include "safe/tensor.hpp"

namespace safe::encoder {

struct EncoderConfig {
  std::size_t token_size = 8;
  std::size_t embed_dim = 192;
  std::size_t depth = 6;
  std::size_t heads = 3;
  std::size_t mlp_ratio = 4;
  std::size_t in_channels = 1;

  static EncoderConfig from_config(const io::RunConfig& config);
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

/// Fixed 2-D sinusoidal table {grid_h * grid_w, dim}: the first dim/2
/// features encode the token row, the rest the token column.
Tensor positional_encoding(std::size_t grid_h, std::size_t grid_w, std::size_t dim);

/// Tokens kept after masking `fraction` of n: n - round(fraction * n).
std::size_t kept_count(std::size_t n, double fraction);

/// Sorted indices of the kept tokens; a uniformly random subset of size
/// kept_count(n, fraction).
std::vector<std::size_t> mask_keep_indices(std::size_t n, double fraction, SeedStream& rng);

struct TokenSequence {
  Tensor tokens;                  // {m, d}: embeddings + positions
  std::vector<std::size_t> kept;  // original raster index of each row
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
};

/// Non-overlapping convolutional tokenization plus positional encoding.
TokenSequence tokenize(const Tensor& image, const nn::ParamTable& weights, const EncoderConfig& cfg);
/// Drops round(p*n) tokens chosen uniformly; kept rows stay in raster order.
TokenSequence mask_tokens(const TokenSequence& seq, double p, SeedStream& rng);

nn::ParamTable init_encoder(const EncoderConfig& cfg, const SeedStream& seed);

/// Transformer feature extractor. Parameters live in a ParamTable so the
/// same graph code serves student, teacher and inference.
class Encoder {
 public:
  explicit Encoder(EncoderConfig cfg);

  const EncoderConfig& config() const { return cfg_; }

  /// Records the forward pass of one {h,w,C} image on `tape`; returns z {1,d}.
  /// `keep` selects the unmasked tokens (all when empty).
  nn::Var forward(nn::Tape& tape, nn::Var image, const std::vector<nn::Var>& params,
                  const std::vector<std::size_t>& keep = {}) const;

  /// z for one image; mask_p > 0 draws the kept set from `rng`.
  Tensor encode(const Tensor& image, const nn::ParamTable& weights, double mask_p = 0.0,
                SeedStream* rng = nullptr) const;

  /// Checks that `weights` has this encoder's names and shapes.
  void check_weights(const nn::ParamTable& weights) const;

 private:
  EncoderConfig cfg_;
};

/// Checkpoint directory layout shared by every stage: `config.cfg` holds
/// the run config; `student.*` holds the trained network with encoder
/// entries prefixed `encoder.`.
inline constexpr const char* kConfigFile = "config.cfg";
inline constexpr const char* kStudentStem = "student";
inline constexpr const char* kEncoderPrefix = "encoder.";

/// Frozen encoder ready for feature extraction.
struct EncoderModel {
  Encoder encoder;
  nn::ParamTable weights;

  Tensor encode(const Tensor& image) const { return encoder.encode(image, weights); }
};

/// Writes an encoder-only checkpoint (e.g. an untrained initialisation).
void save_encoder_checkpoint(const std::filesystem::path& dir, const io::RunConfig& config,
                             const nn::ParamTable& weights);
EncoderModel load_encoder_checkpoint(const std::filesystem::path& dir);

}  // namespace safe::encoder
