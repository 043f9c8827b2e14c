#include "safe/encoder/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "safe/error.hpp"
#include "safe/io/exchange.hpp"
#include "safe/nn/ops.hpp"

namespace safe::encoder {

EncoderConfig EncoderConfig::from_config(const io::RunConfig& config) {
  EncoderConfig c;
  c.token_size = static_cast<std::size_t>(config.get_int("encoder.token_size"));
  c.embed_dim = static_cast<std::size_t>(config.get_int("encoder.embed_dim"));
  c.depth = static_cast<std::size_t>(config.get_int("encoder.depth"));
  c.heads = static_cast<std::size_t>(config.get_int("encoder.heads"));
  c.mlp_ratio = static_cast<std::size_t>(config.get_int("encoder.mlp_ratio"));
  c.in_channels = static_cast<std::size_t>(config.get_int("encoder.in_channels"));
  c.validate();
  return c;
}

void EncoderConfig::validate() const {
  require(token_size >= 1, "token_size must be positive", ErrorKind::Config);
  require(embed_dim >= 4 && embed_dim % 4 == 0, "embed_dim must be a positive multiple of 4",
          ErrorKind::Config);
  require(heads >= 1 && embed_dim % heads == 0, "embed_dim must be divisible by heads", ErrorKind::Config);
  require(in_channels == 1 || in_channels == 4, "in_channels must be 1 or 4", ErrorKind::Config);
  require(mlp_ratio >= 1, "mlp_ratio must be positive", ErrorKind::Config);
}

Tensor positional_encoding(std::size_t grid_h, std::size_t grid_w, std::size_t dim) {
  require(dim % 4 == 0, "positional encoding dim must be a multiple of 4");
  const std::size_t half = dim / 2, pairs = half / 2;
  Tensor pe({grid_h * grid_w, dim});
  for (std::size_t r = 0; r < grid_h; ++r) {
    for (std::size_t c = 0; c < grid_w; ++c) {
      double* row = pe.data() + (r * grid_w + c) * dim;
      for (std::size_t i = 0; i < pairs; ++i) {
        const double freq = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(pairs));
        row[2 * i] = std::sin(static_cast<double>(r) * freq);
        row[2 * i + 1] = std::cos(static_cast<double>(r) * freq);
        row[half + 2 * i] = std::sin(static_cast<double>(c) * freq);
        row[half + 2 * i + 1] = std::cos(static_cast<double>(c) * freq);
      }
    }
  }
  return pe;
}

std::size_t kept_count(std::size_t n, double fraction) {
  require(fraction >= 0.0 && fraction < 1.0, "masking fraction must lie in [0,1)");
  const auto masked = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  return n - std::min(masked, n - (n > 0 ? 1 : 0));
}

std::vector<std::size_t> mask_keep_indices(std::size_t n, double fraction, SeedStream& rng) {
  const std::size_t keep = kept_count(n, fraction);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (keep == n) return idx;
  // Partial Fisher-Yates: the first `keep` slots become a uniform subset.
  for (std::size_t i = 0; i < keep; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

nn::ParamTable init_encoder(const EncoderConfig& cfg, const SeedStream& seed) {
  cfg.validate();
  SeedStream rng = seed.derive("encoder");
  const std::size_t d = cfg.embed_dim, in = cfg.token_size * cfg.token_size * cfg.in_channels;
  const std::size_t hidden = cfg.mlp_ratio * d;
  nn::ParamTable p;
  p.add("patch.weight", nn::uniform_fan_in({in, d}, in, rng));
  p.add("patch.bias", Tensor({d}));
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    const std::string pre = "block" + std::to_string(b) + ".";
    p.add(pre + "ln1.gamma", Tensor({d}, 1.0));
    p.add(pre + "ln1.beta", Tensor({d}));
    p.add(pre + "attn.qkv.weight", nn::truncated_normal({d, 3 * d}, 0.02, rng));
    p.add(pre + "attn.qkv.bias", Tensor({3 * d}));
    p.add(pre + "attn.proj.weight", nn::truncated_normal({d, d}, 0.02, rng));
    p.add(pre + "attn.proj.bias", Tensor({d}));
    p.add(pre + "ln2.gamma", Tensor({d}, 1.0));
    p.add(pre + "ln2.beta", Tensor({d}));
    p.add(pre + "mlp.fc1.weight", nn::truncated_normal({d, hidden}, 0.02, rng));
    p.add(pre + "mlp.fc1.bias", Tensor({hidden}));
    p.add(pre + "mlp.fc2.weight", nn::truncated_normal({hidden, d}, 0.02, rng));
    p.add(pre + "mlp.fc2.bias", Tensor({d}));
  }
  p.add("norm.gamma", Tensor({d}, 1.0));
  p.add("norm.beta", Tensor({d}));
  return p;
}

TokenSequence tokenize(const Tensor& image, const nn::ParamTable& weights, const EncoderConfig& cfg) {
  nn::Tape tape;
  const auto img = tape.constant(image);
  const auto tokens = nn::patchify(tape, img, cfg.token_size);
  const auto emb = nn::linear(tape, tokens, tape.param(weights.at("patch.weight")),
                              tape.param(weights.at("patch.bias")));
  TokenSequence seq;
  seq.grid_h = image.dim(0) / cfg.token_size;
  seq.grid_w = image.dim(1) / cfg.token_size;
  seq.tokens = tape.value(emb);
  const Tensor pe = positional_encoding(seq.grid_h, seq.grid_w, cfg.embed_dim);
  for (std::size_t i = 0; i < pe.size(); ++i) seq.tokens[i] += pe[i];
  seq.kept.resize(seq.grid_h * seq.grid_w);
  std::iota(seq.kept.begin(), seq.kept.end(), std::size_t{0});
  return seq;
}

TokenSequence mask_tokens(const TokenSequence& seq, double p, SeedStream& rng) {
  const std::size_t n = seq.tokens.rows(), d = seq.tokens.cols();
  const auto keep = mask_keep_indices(n, p, rng);
  TokenSequence out;
  out.grid_h = seq.grid_h;
  out.grid_w = seq.grid_w;
  out.tokens = Tensor({keep.size(), d});
  for (std::size_t i = 0; i < keep.size(); ++i) {
    std::copy(seq.tokens.data() + keep[i] * d, seq.tokens.data() + (keep[i] + 1) * d, out.tokens.data() + i * d);
    out.kept.push_back(seq.kept[keep[i]]);
  }
  return out;
}

Encoder::Encoder(EncoderConfig cfg) : cfg_(cfg) { cfg_.validate(); }

void Encoder::check_weights(const nn::ParamTable& weights) const {
  const auto expected = init_encoder(cfg_, SeedStream(0));
  require(expected.count() == weights.count(), "encoder weights do not match the encoder config",
          ErrorKind::ShapeMismatch);
  for (std::size_t i = 0; i < expected.count(); ++i) {
    require(expected.name(i) == weights.name(i) && expected[i].shape() == weights[i].shape(),
            "encoder weight " + expected.name(i) + " has mismatching name or shape", ErrorKind::ShapeMismatch);
  }
}

nn::Var Encoder::forward(nn::Tape& t, nn::Var image, const std::vector<nn::Var>& w,
                         const std::vector<std::size_t>& keep) const {
  const Tensor& img = t.value(image);
  require(img.ndim() == 3 && img.dim(2) == cfg_.in_channels,
          "encoder expects {h,w," + std::to_string(cfg_.in_channels) + "}, got " + shape_string(img.shape()),
          ErrorKind::ShapeMismatch);
  require(w.size() == 4 + 12 * cfg_.depth, "encoder parameter count mismatch", ErrorKind::ShapeMismatch);
  const std::size_t gh = img.dim(0) / cfg_.token_size, gw = img.dim(1) / cfg_.token_size;

  nn::Var x = nn::patchify(t, image, cfg_.token_size);
  x = nn::linear(t, x, w[0], w[1]);
  x = nn::add(t, x, t.constant(positional_encoding(gh, gw, cfg_.embed_dim)));
  if (!keep.empty()) x = nn::gather_rows(t, x, keep);

  for (std::size_t b = 0; b < cfg_.depth; ++b) {
    const nn::Var* p = w.data() + 2 + 12 * b;
    nn::Var h = nn::layer_norm(t, x, p[0], p[1]);
    h = nn::linear(t, h, p[2], p[3]);
    h = nn::attention(t, h, cfg_.heads);
    h = nn::linear(t, h, p[4], p[5]);
    x = nn::add(t, x, h);
    h = nn::layer_norm(t, x, p[6], p[7]);
    h = nn::linear(t, h, p[8], p[9]);
    h = nn::gelu(t, h);
    h = nn::linear(t, h, p[10], p[11]);
    x = nn::add(t, x, h);
  }
  x = nn::layer_norm(t, x, w[w.size() - 2], w[w.size() - 1]);
  return nn::mean_rows(t, x);
}

Tensor Encoder::encode(const Tensor& image, const nn::ParamTable& weights, double mask_p,
                       SeedStream* rng) const {
  require(image.ndim() == 3 && image.dim(0) % cfg_.token_size == 0 && image.dim(1) % cfg_.token_size == 0,
          "image " + shape_string(image.shape()) + " is not divisible by token size " +
              std::to_string(cfg_.token_size),
          ErrorKind::ShapeMismatch);
  std::vector<std::size_t> keep;
  if (mask_p > 0.0) {
    require(rng != nullptr, "masking requires a random stream");
    const std::size_t n = (image.dim(0) / cfg_.token_size) * (image.dim(1) / cfg_.token_size);
    keep = mask_keep_indices(n, mask_p, *rng);
  }
  nn::Tape tape;
  const auto params = nn::bind(tape, weights);
  const auto z = forward(tape, tape.constant(image), params, keep);
  return tape.value(z).reshaped({cfg_.embed_dim});
}

void save_encoder_checkpoint(const std::filesystem::path& dir, const io::RunConfig& config,
                             const nn::ParamTable& weights) {
  Encoder(EncoderConfig::from_config(config)).check_weights(weights);
  nn::ParamTable prefixed;
  prefixed.append(weights, kEncoderPrefix);
  io::replace_directory(dir, [&](const std::filesystem::path& staging) {
    std::ofstream(staging / kConfigFile) << config.to_text();
    nn::save_params(staging, prefixed, kStudentStem);
  });
}

EncoderModel load_encoder_checkpoint(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), "checkpoint " + dir.string() + " is not a directory", ErrorKind::Io);
  const auto config = io::load_config(dir / kConfigFile);
  const auto all = nn::load_params(dir, kStudentStem);
  const std::string prefix = kEncoderPrefix;
  nn::ParamTable weights;
  for (std::size_t i = 0; i < all.count(); ++i)
    if (all.name(i).rfind(prefix, 0) == 0) weights.add(all.name(i).substr(prefix.size()), all[i]);
  EncoderModel model{Encoder(EncoderConfig::from_config(config)), std::move(weights)};
  model.encoder.check_weights(model.weights);
  return model;
}

}  // namespace safe::encoder
