#pragma once

#include <complex>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "safe/io/config.hpp"
#include "safe/io/seed.hpp"
#include "safe/tensor.hpp"

namespace safe::sar {

using cfloat = std::complex<float>;

/// Complex single-look image, samples stored {height, width, channels}.
struct SlcImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<cfloat> samples;
  std::string sensor_id = "synthetic";
  double range_resolution_m = 1.0;
  double azimuth_resolution_m = 1.0;

  cfloat& at(std::size_t y, std::size_t x, std::size_t c) {
    return samples[(y * width + x) * channels + c];
  }
  cfloat at(std::size_t y, std::size_t x, std::size_t c) const {
    return samples[(y * width + x) * channels + c];
  }

  /// Throws unless channels is 1 or 4, sizes match and all samples are finite.
  void validate() const;
};

/// Smallest positive normal float; amplitudes are floored to it before log.
inline constexpr double kAmplitudeFloor = 1.17549435e-38;

/// |z| per sample as {H,W,C}, floored to kAmplitudeFloor.
Tensor amplitude(const SlcImage& slc);

/// Per-sensor log-amplitude clip bounds.
struct NormalizationParams {
  double m_s = 0.0;
  double M_s = 1.0;
};

/// clip((log X - m_s) / (M_s - m_s), 0, 1) per entry.
Tensor normalize_amplitude(const Tensor& amplitude, const NormalizationParams& params);

/// Percentile bounds of log-amplitude (defaults 1st and 99th).
NormalizationParams percentile_params(const Tensor& amplitude, double lo = 0.01,
                                      double hi = 0.99);

/// Patches cut on a regular grid. Each patch is {P,P,C}.
struct PatchGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t patch = 0;
  std::size_t stride = 0;
  std::vector<Tensor> patches;  // raster order

  const Tensor& at(std::size_t r, std::size_t c) const { return patches[r * cols + c]; }
};

/// Padded grids have ceil(H/S) x ceil(W/S) cells; cell (i,j) is centred on
/// (i*S + S/2, j*S + S/2) and out-of-range pixels are reflected. Without
/// padding only patches fully inside the image are kept, top-left at (i*S, j*S).
/// Accepts {H,W} or {H,W,C} images.
PatchGrid extract_patches(const Tensor& image, std::size_t patch, std::size_t stride, bool pad);

/// Top-left corner (may be negative) of padded cell (i, j).
std::ptrdiff_t padded_origin(std::size_t index, std::size_t patch, std::size_t stride);

enum class Texture { Flat, Furrowed, PointScattererField };

struct Vertex {
  double row = 0.0;
  double col = 0.0;
};

struct Region {
  std::vector<Vertex> polygon;
  double reflectivity = 1.0;
  Texture texture = Texture::Flat;
  int label = -1;          // -1: use the region index
  double period = 8.0;     // furrowed: stripe period in pixels
  double angle_deg = 0.0;  // furrowed: stripe orientation
  double phase = 0.0;      // furrowed: stripe phase, radians
  double density = 0.02;   // point-scatterer field: share of bright cells
  double contrast = 25.0;  // point-scatterer field: reflectivity gain of bright cells
};

struct PointTarget {
  double row = 0.0;
  double col = 0.0;
  double amplitude = 1.0;
};

struct SceneSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t channels = 1;
  std::string sensor_id = "synthetic";
  std::vector<Region> regions;
  std::vector<PointTarget> targets;

  void validate() const;
};

/// Parses the scene file format (scene.*, region.<i>.*, target.<i>.* keys).
SceneSpec parse_scene_spec(std::string_view text);
std::string scene_spec_text(const SceneSpec& spec);
Texture parse_texture(const std::string& name);
const char* texture_name(Texture t);

struct Scene {
  SlcImage image;
  std::vector<std::uint8_t> labels;  // {H,W}
};

/// Fully developed speckle: z = sqrt(R/2) (g1 + i g2) per pixel and channel,
/// R the local reflectivity. Later regions paint over earlier ones.
Scene synthesize_scene(const SceneSpec& spec, const SeedStream& seed);

/// Region index map of a spec (pixel centres, even-odd polygon rule).
std::vector<int> rasterize_regions(const SceneSpec& spec);

/// sqrt(box mean of |z|^2) with reflect padding; window 1 returns amplitude().
Tensor despeckle_boxcar(const SlcImage& slc, std::size_t window);

class Despeckler {
 public:
  virtual ~Despeckler() = default;
  virtual Tensor despeckle(const SlcImage& slc) const = 0;
};

class BoxcarDespeckler final : public Despeckler {
 public:
  explicit BoxcarDespeckler(std::size_t window) : window_(window) {}
  Tensor despeckle(const SlcImage& slc) const override;

 private:
  std::size_t window_;
};

/// File-exchange hook: writes the amplitude {H,W,C} as float32 SAFT, runs
/// `command` with {in}/{out} substituted, reads back a float32 {H,W,C}.
class ExternalDespeckler final : public Despeckler {
 public:
  explicit ExternalDespeckler(std::string command) : command_(std::move(command)) {}
  Tensor despeckle(const SlcImage& slc) const override;

 private:
  std::string command_;
};

std::unique_ptr<Despeckler> make_despeckler(const io::RunConfig& config);

void write_slc(const std::filesystem::path& path, const SlcImage& slc);
SlcImage read_slc(const std::filesystem::path& path);
void write_labels(const std::filesystem::path& path, const std::vector<std::uint8_t>& labels,
                  std::size_t height, std::size_t width);

}  // namespace safe::sar
