#include "safe/sar/sar.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <sstream>

#include "safe/error.hpp"
#include "safe/io/exchange.hpp"
#include "safe/io/tensor_file.hpp"
#include "safe/kernels/kernels.hpp"

namespace safe::sar {

void SlcImage::validate() const {
  require(channels == 1 || channels == 4, "SLC channel count must be 1 or 4", ErrorKind::Data);
  require(samples.size() == height * width * channels, "SLC sample count does not match shape",
          ErrorKind::ShapeMismatch);
  for (const auto& z : samples)
    require(std::isfinite(z.real()) && std::isfinite(z.imag()), "SLC contains non-finite samples",
            ErrorKind::Data);
}

Tensor amplitude(const SlcImage& slc) {
  Tensor out({slc.height, slc.width, slc.channels});
  for (std::size_t i = 0; i < slc.samples.size(); ++i) {
    const std::complex<double> z(slc.samples[i].real(), slc.samples[i].imag());
    out[i] = std::max(std::abs(z), kAmplitudeFloor);
  }
  return out;
}

Tensor normalize_amplitude(const Tensor& amp, const NormalizationParams& params) {
  require(params.M_s > params.m_s, "normalization requires M_s > m_s");
  Tensor out(amp.shape());
  const double inv = 1.0 / (params.M_s - params.m_s);
  for (std::size_t i = 0; i < amp.size(); ++i) {
    const double x = std::max(amp[i], kAmplitudeFloor);
    out[i] = std::clamp((std::log(x) - params.m_s) * inv, 0.0, 1.0);
  }
  return out;
}

NormalizationParams percentile_params(const Tensor& amp, double lo, double hi) {
  require(!amp.empty(), "percentile of an empty image", ErrorKind::Data);
  require(lo >= 0.0 && lo < hi && hi <= 1.0, "percentiles must satisfy 0 <= lo < hi <= 1");
  std::vector<double> logs(amp.size());
  for (std::size_t i = 0; i < amp.size(); ++i) logs[i] = std::log(std::max(amp[i], kAmplitudeFloor));
  auto pick = [&](double q) {
    const auto k = static_cast<std::size_t>(std::llround(q * static_cast<double>(logs.size() - 1)));
    std::nth_element(logs.begin(), logs.begin() + static_cast<std::ptrdiff_t>(k), logs.end());
    return logs[k];
  };
  NormalizationParams p{pick(lo), pick(hi)};
  if (!(p.M_s > p.m_s)) p.M_s = p.m_s + 1.0;  // flat image
  return p;
}

std::ptrdiff_t padded_origin(std::size_t index, std::size_t patch, std::size_t stride) {
  return static_cast<std::ptrdiff_t>(index * stride + stride / 2) -
         static_cast<std::ptrdiff_t>(patch / 2);
}

PatchGrid extract_patches(const Tensor& image, std::size_t patch, std::size_t stride, bool pad) {
  require(patch >= 1 && stride >= 1, "patch and stride must be positive");
  require(image.ndim() == 2 || image.ndim() == 3, "extract_patches expects {H,W} or {H,W,C}",
          ErrorKind::ShapeMismatch);
  const std::size_t H = image.dim(0), W = image.dim(1), C = image.ndim() == 3 ? image.dim(2) : 1;
  PatchGrid grid;
  grid.patch = patch;
  grid.stride = stride;
  if (pad) {
    grid.rows = (H + stride - 1) / stride;
    grid.cols = (W + stride - 1) / stride;
    // A single mirror reflection must cover the overhang on every side.
    const std::ptrdiff_t first = padded_origin(0, patch, stride);
    const std::ptrdiff_t last_r = padded_origin(grid.rows - 1, patch, stride) + static_cast<std::ptrdiff_t>(patch);
    const std::ptrdiff_t last_c = padded_origin(grid.cols - 1, patch, stride) + static_cast<std::ptrdiff_t>(patch);
    const std::ptrdiff_t over = std::max({-first, last_r - static_cast<std::ptrdiff_t>(H),
                                          last_c - static_cast<std::ptrdiff_t>(W), std::ptrdiff_t{0}});
    require(over <= static_cast<std::ptrdiff_t>(std::min(H, W)) - 1,
            "patch " + std::to_string(patch) + " larger than the padded image");
  } else {
    require(patch <= H && patch <= W, "patch " + std::to_string(patch) + " larger than the image");
    grid.rows = (H - patch) / stride + 1;
    grid.cols = (W - patch) / stride + 1;
  }
  grid.patches.resize(grid.rows * grid.cols);
#pragma omp parallel for schedule(static) if (grid.rows * grid.cols * patch * patch >= (1u << 16))
  for (std::ptrdiff_t cell = 0; cell < static_cast<std::ptrdiff_t>(grid.rows * grid.cols); ++cell) {
    const std::size_t i = static_cast<std::size_t>(cell) / grid.cols;
    const std::size_t j = static_cast<std::size_t>(cell) % grid.cols;
    const std::ptrdiff_t r0 = pad ? padded_origin(i, patch, stride) : static_cast<std::ptrdiff_t>(i * stride);
    const std::ptrdiff_t c0 = pad ? padded_origin(j, patch, stride) : static_cast<std::ptrdiff_t>(j * stride);
    Tensor p({patch, patch, C});
    for (std::size_t y = 0; y < patch; ++y) {
      const auto sy = static_cast<std::size_t>(kernels::reflect_index(r0 + static_cast<std::ptrdiff_t>(y), H));
      for (std::size_t x = 0; x < patch; ++x) {
        const auto sx = static_cast<std::size_t>(kernels::reflect_index(c0 + static_cast<std::ptrdiff_t>(x), W));
        for (std::size_t c = 0; c < C; ++c) p[(y * patch + x) * C + c] = image[(sy * W + sx) * C + c];
      }
    }
    grid.patches[static_cast<std::size_t>(cell)] = std::move(p);
  }
  return grid;
}

// ---------------------------------------------------------------- scenes

Texture parse_texture(const std::string& name) {
  if (name == "flat") return Texture::Flat;
  if (name == "furrowed") return Texture::Furrowed;
  if (name == "point-scatterer-field") return Texture::PointScattererField;
  fail(ErrorKind::Config, "unknown texture '" + name + "'");
}

const char* texture_name(Texture t) {
  switch (t) {
    case Texture::Flat: return "flat";
    case Texture::Furrowed: return "furrowed";
    case Texture::PointScattererField: return "point-scatterer-field";
  }
  return "flat";
}

namespace {

double parse_real(const std::string& key, const std::string& v) {
  return std::get<double>(io::parse_value(io::ValueType::Real, key, v));
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  return std::get<std::int64_t>(io::parse_value(io::ValueType::Int, key, v));
}

std::pair<double, double> parse_pair(const std::string& key, const std::string& v) {
  const auto comma = v.find(',');
  require(comma != std::string::npos, key + ": expected 'row,col'", ErrorKind::TypeMismatch);
  return {parse_real(key, v.substr(0, comma)), parse_real(key, v.substr(comma + 1))};
}

std::vector<Vertex> parse_polygon(const std::string& key, const std::string& v) {
  std::vector<Vertex> out;
  std::size_t start = 0;
  while (start < v.size()) {
    auto end = v.find(';', start);
    if (end == std::string::npos) end = v.size();
    auto [r, c] = parse_pair(key, v.substr(start, end - start));
    out.push_back({r, c});
    start = end + 1;
  }
  require(out.size() >= 3, key + ": polygon needs at least 3 vertices", ErrorKind::Config);
  return out;
}

bool inside(const std::vector<Vertex>& poly, double r, double c) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a.row > r) != (b.row > r)) {
      const double cross = (b.col - a.col) * (r - a.row) / (b.row - a.row) + a.col;
      if (c < cross) in = !in;
    }
  }
  return in;
}

std::string fmt(double v) { return io::format_value(v); }

}  // namespace

void SceneSpec::validate() const {
  require(height > 0 && width > 0, "scene size must be positive", ErrorKind::Config);
  require(channels == 1 || channels == 4, "scene channels must be 1 or 4", ErrorKind::Config);
  require(!regions.empty(), "scene needs at least one region", ErrorKind::Config);
  for (const auto& r : regions) {
    require(r.reflectivity >= 0.0 && std::isfinite(r.reflectivity),
            "region reflectivity must be finite and >= 0", ErrorKind::Config);
    require(r.period > 0.0, "furrow period must be positive", ErrorKind::Config);
    require(r.density >= 0.0 && r.density <= 1.0, "scatterer density must be in [0,1]", ErrorKind::Config);
    require(r.label < 256, "region label must fit in uint8", ErrorKind::Config);
  }
  require(regions.size() <= 256, "at most 256 regions", ErrorKind::Config);
}

SceneSpec parse_scene_spec(std::string_view text) {
  SceneSpec spec;
  std::map<std::size_t, Region> regions;
  std::map<std::size_t, PointTarget> targets;
  for (const auto& [key, value] : io::parse_key_values(text)) {
    if (key == "scene.height") {
      spec.height = static_cast<std::size_t>(parse_int(key, value));
    } else if (key == "scene.width") {
      spec.width = static_cast<std::size_t>(parse_int(key, value));
    } else if (key == "scene.channels") {
      spec.channels = static_cast<std::size_t>(parse_int(key, value));
    } else if (key == "scene.sensor") {
      spec.sensor_id = value;
    } else if (key.rfind("region.", 0) == 0 || key.rfind("target.", 0) == 0) {
      const bool is_region = key[0] == 'r';
      const auto dot1 = key.find('.');
      const auto dot2 = key.find('.', dot1 + 1);
      require(dot2 != std::string::npos, "malformed key '" + key + "'", ErrorKind::Config);
      const auto idx = static_cast<std::size_t>(parse_int(key, key.substr(dot1 + 1, dot2 - dot1 - 1)));
      const std::string field = key.substr(dot2 + 1);
      if (is_region) {
        Region& r = regions[idx];
        if (field == "polygon") r.polygon = parse_polygon(key, value);
        else if (field == "reflectivity") r.reflectivity = parse_real(key, value);
        else if (field == "texture") r.texture = parse_texture(value);
        else if (field == "label") r.label = static_cast<int>(parse_int(key, value));
        else if (field == "period") r.period = parse_real(key, value);
        else if (field == "angle") r.angle_deg = parse_real(key, value);
        else if (field == "phase") r.phase = parse_real(key, value);
        else if (field == "density") r.density = parse_real(key, value);
        else if (field == "contrast") r.contrast = parse_real(key, value);
        else fail(ErrorKind::Config, "unknown scene key '" + key + "'");
      } else {
        PointTarget& t = targets[idx];
        if (field == "position") std::tie(t.row, t.col) = parse_pair(key, value);
        else if (field == "amplitude") t.amplitude = parse_real(key, value);
        else fail(ErrorKind::Config, "unknown scene key '" + key + "'");
      }
    } else {
      fail(ErrorKind::Config, "unknown scene key '" + key + "'");
    }
  }
  std::size_t expect = 0;
  for (auto& [i, r] : regions) {
    require(i == expect++, "region indices must be contiguous from 0", ErrorKind::Config);
    require(!r.polygon.empty(), "region." + std::to_string(i) + ".polygon missing", ErrorKind::Config);
    spec.regions.push_back(r);
  }
  for (auto& [i, t] : targets) spec.targets.push_back(t);
  spec.validate();
  return spec;
}

std::string scene_spec_text(const SceneSpec& spec) {
  std::ostringstream os;
  os << "scene.height=" << spec.height << "\nscene.width=" << spec.width
     << "\nscene.channels=" << spec.channels << "\nscene.sensor=" << spec.sensor_id << "\n";
  for (std::size_t i = 0; i < spec.regions.size(); ++i) {
    const Region& r = spec.regions[i];
    const std::string p = "region." + std::to_string(i) + ".";
    os << p << "polygon=";
    for (std::size_t v = 0; v < r.polygon.size(); ++v)
      os << (v ? ";" : "") << fmt(r.polygon[v].row) << "," << fmt(r.polygon[v].col);
    os << "\n" << p << "reflectivity=" << fmt(r.reflectivity) << "\n"
       << p << "texture=" << texture_name(r.texture) << "\n";
    if (r.label >= 0) os << p << "label=" << r.label << "\n";
    os << p << "period=" << fmt(r.period) << "\n" << p << "angle=" << fmt(r.angle_deg) << "\n"
       << p << "phase=" << fmt(r.phase) << "\n" << p << "density=" << fmt(r.density) << "\n"
       << p << "contrast=" << fmt(r.contrast) << "\n";
  }
  for (std::size_t i = 0; i < spec.targets.size(); ++i) {
    const auto& t = spec.targets[i];
    os << "target." << i << ".position=" << fmt(t.row) << "," << fmt(t.col) << "\n"
       << "target." << i << ".amplitude=" << fmt(t.amplitude) << "\n";
  }
  return os.str();
}

std::vector<int> rasterize_regions(const SceneSpec& spec) {
  std::vector<int> index(spec.height * spec.width, -1);
  for (std::size_t k = 0; k < spec.regions.size(); ++k) {
    const auto& poly = spec.regions[k].polygon;
    double rmin = poly[0].row, rmax = poly[0].row, cmin = poly[0].col, cmax = poly[0].col;
    for (const auto& v : poly) {
      rmin = std::min(rmin, v.row);
      rmax = std::max(rmax, v.row);
      cmin = std::min(cmin, v.col);
      cmax = std::max(cmax, v.col);
    }
    const auto y0 = static_cast<std::size_t>(std::clamp(std::floor(rmin), 0.0, double(spec.height)));
    const auto y1 = static_cast<std::size_t>(std::clamp(std::ceil(rmax), 0.0, double(spec.height)));
    const auto x0 = static_cast<std::size_t>(std::clamp(std::floor(cmin), 0.0, double(spec.width)));
    const auto x1 = static_cast<std::size_t>(std::clamp(std::ceil(cmax), 0.0, double(spec.width)));
    for (std::size_t y = y0; y < y1; ++y)
      for (std::size_t x = x0; x < x1; ++x)
        if (inside(poly, y + 0.5, x + 0.5)) index[y * spec.width + x] = static_cast<int>(k);
  }
  return index;
}

Scene synthesize_scene(const SceneSpec& spec, const SeedStream& seed) {
  spec.validate();
  const std::size_t H = spec.height, W = spec.width, C = spec.channels;
  const std::vector<int> region = rasterize_regions(spec);
  for (int r : region) require(r >= 0, "scene regions do not cover the frame", ErrorKind::Config);

  Scene scene;
  scene.image.height = H;
  scene.image.width = W;
  scene.image.channels = C;
  scene.image.sensor_id = spec.sensor_id;
  scene.image.samples.resize(H * W * C);
  scene.labels.resize(H * W);

  const SeedStream field_root = seed.derive("scatterers");
  const SeedStream speckle_root = seed.derive("speckle");
#pragma omp parallel for schedule(static) if (H * W * C >= (1u << 16))
  for (std::ptrdiff_t yy = 0; yy < static_cast<std::ptrdiff_t>(H); ++yy) {
    const auto y = static_cast<std::size_t>(yy);
    SeedStream field = field_root.derive("row", y);
    std::vector<SeedStream> speckle;
    for (std::size_t c = 0; c < C; ++c) speckle.push_back(speckle_root.derive("row", y * C + c));
    for (std::size_t x = 0; x < W; ++x) {
      const Region& rg = spec.regions[static_cast<std::size_t>(region[y * W + x])];
      double R = rg.reflectivity;
      const double u = field.uniform();  // one draw per pixel keeps streams aligned
      switch (rg.texture) {
        case Texture::Flat:
          break;
        case Texture::Furrowed: {
          const double th = rg.angle_deg * std::numbers::pi / 180.0;
          const double s = (y * std::cos(th) + x * std::sin(th)) / rg.period;
          R *= 1.0 + 0.9 * std::sin(2.0 * std::numbers::pi * s + rg.phase);
          break;
        }
        case Texture::PointScattererField:
          if (u < rg.density) R *= rg.contrast;
          break;
      }
      const double sigma = std::sqrt(R / 2.0);
      for (std::size_t c = 0; c < C; ++c) {
        const double g1 = speckle[c].normal();
        const double g2 = speckle[c].normal();
        scene.image.samples[(y * W + x) * C + c] =
            cfloat(static_cast<float>(sigma * g1), static_cast<float>(sigma * g2));
      }
      const int lab = rg.label >= 0 ? rg.label : region[y * W + x];
      scene.labels[y * W + x] = static_cast<std::uint8_t>(lab);
    }
  }
  for (const auto& t : spec.targets) {
    const auto y = static_cast<std::ptrdiff_t>(std::floor(t.row));
    const auto x = static_cast<std::ptrdiff_t>(std::floor(t.col));
    if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(H) || x >= static_cast<std::ptrdiff_t>(W)) continue;
    for (std::size_t c = 0; c < C; ++c)
      scene.image.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) += cfloat(static_cast<float>(t.amplitude), 0.0f);
  }
  return scene;
}

// ---------------------------------------------------------------- despeckling

Tensor despeckle_boxcar(const SlcImage& slc, std::size_t window) {
  require(window >= 1 && window % 2 == 1, "boxcar window must be odd and >= 1");
  Tensor amp = amplitude(slc);
  if (window == 1) return amp;
  const std::size_t H = slc.height, W = slc.width, C = slc.channels;
  Tensor out({H, W, C});
  std::vector<double> plane(H * W), mean(H * W);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < H * W; ++i) {
      const auto z = slc.samples[i * C + c];
      plane[i] = double(z.real()) * z.real() + double(z.imag()) * z.imag();
    }
    kernels::box_mean(plane.data(), H, W, window, mean.data());
    for (std::size_t i = 0; i < H * W; ++i) out[i * C + c] = std::max(std::sqrt(mean[i]), kAmplitudeFloor);
  }
  return out;
}

Tensor BoxcarDespeckler::despeckle(const SlcImage& slc) const { return despeckle_boxcar(slc, window_); }

Tensor ExternalDespeckler::despeckle(const SlcImage& slc) const {
  const Tensor amp = amplitude(slc);
  const io::RawTensor result = io::run_exchange(command_, io::to_raw(amp, io::DType::Float32));
  Tensor out = io::to_tensor(result);
  require(out.shape() == amp.shape(), "external despeckler returned shape " + shape_string(out.shape()),
          ErrorKind::External);
  return out;
}

std::unique_ptr<Despeckler> make_despeckler(const io::RunConfig& config) {
  const auto& cmd = config.get_string("despeckle.command");
  if (!cmd.empty()) return std::make_unique<ExternalDespeckler>(cmd);
  return std::make_unique<BoxcarDespeckler>(static_cast<std::size_t>(config.get_int("despeckle.window")));
}

void write_slc(const std::filesystem::path& path, const SlcImage& slc) {
  io::write_tensor(path, io::RawTensor::from_complex64(
                             {static_cast<std::uint32_t>(slc.height), static_cast<std::uint32_t>(slc.width),
                              static_cast<std::uint32_t>(slc.channels)},
                             slc.samples));
}

SlcImage read_slc(const std::filesystem::path& path) {
  const io::RawTensor raw = io::read_tensor(path);
  require(raw.dtype == io::DType::Complex64, path.string() + " is not a complex64 container",
          ErrorKind::Data);
  require(raw.shape.size() == 2 || raw.shape.size() == 3, "SLC container must be {H,W} or {H,W,C}",
          ErrorKind::Data);
  SlcImage slc;
  slc.height = raw.shape[0];
  slc.width = raw.shape[1];
  slc.channels = raw.shape.size() == 3 ? raw.shape[2] : 1;
  slc.samples = raw.to_complex64();
  slc.validate();
  return slc;
}

void write_labels(const std::filesystem::path& path, const std::vector<std::uint8_t>& labels,
                  std::size_t height, std::size_t width) {
  io::write_tensor(path, io::RawTensor::from_uint8({static_cast<std::uint32_t>(height),
                                                    static_cast<std::uint32_t>(width)},
                                                   labels));
}

}  // namespace safe::sar
