#include "safe/augment/augment.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <tuple>

#include "safe/error.hpp"

namespace safe::augment {

void ShiftParams::validate() const {
  require(a <= b, "shift bounds require a <= b");
  require(std::abs(a) <= 0.5 && std::abs(b) <= 0.5, "shift bounds must satisfy |a|,|b| <= 0.5");
}

Tensor shift_by(const Tensor& patch, double shift) {
  Tensor out(patch.shape());
  for (std::size_t i = 0; i < patch.size(); ++i) out[i] = std::clamp(patch[i] + shift, 0.0, 1.0);
  return out;
}

Tensor amplitude_shift(const Tensor& patch, const ShiftParams& params, SeedStream& rng) {
  params.validate();
  return shift_by(patch, rng.uniform(params.a, params.b));
}

Tensor crop(const Tensor& patch, std::size_t out_size, CropOffset at) {
  require(patch.ndim() == 2 || patch.ndim() == 3, "crop expects {H,W} or {H,W,C}", ErrorKind::ShapeMismatch);
  const std::size_t H = patch.dim(0), W = patch.dim(1), C = patch.ndim() == 3 ? patch.dim(2) : 1;
  require(at.row + out_size <= H && at.col + out_size <= W, "crop window exceeds the input");
  Shape shape = patch.ndim() == 3 ? Shape{out_size, out_size, C} : Shape{out_size, out_size};
  Tensor out(shape);
  for (std::size_t y = 0; y < out_size; ++y) {
    const double* src = patch.data() + ((at.row + y) * W + at.col) * C;
    std::copy(src, src + out_size * C, out.data() + y * out_size * C);
  }
  return out;
}

Tensor random_crop(const Tensor& patch, std::size_t out_size, SeedStream& rng, CropOffset* where) {
  require(patch.ndim() >= 2, "random_crop expects an image", ErrorKind::ShapeMismatch);
  const std::size_t H = patch.dim(0), W = patch.dim(1);
  require(out_size >= 1 && out_size <= H && out_size <= W,
          "crop size " + std::to_string(out_size) + " exceeds input " + shape_string(patch.shape()));
  CropOffset at;
  at.row = static_cast<std::size_t>(rng.below(H - out_size + 1));
  at.col = static_cast<std::size_t>(rng.below(W - out_size + 1));
  if (where) *where = at;
  return crop(patch, out_size, at);
}

// ---------------------------------------------------------------- sub-aperture

void SubApertureParams::validate() const {
  require(rho_az > 0.0 && rho_az <= 1.0 && rho_rg > 0.0 && rho_rg <= 1.0,
          "sub-aperture rho must lie in (0, 1]");
}

std::size_t source_bin(std::size_t u, std::size_t kept, std::size_t n, std::ptrdiff_t offset) {
  // Output bin u holds frequency f in [-floor(kept/2), ceil(kept/2) - 1].
  const std::size_t positive = kept - kept / 2;
  const std::ptrdiff_t f = u < positive ? static_cast<std::ptrdiff_t>(u)
                                        : static_cast<std::ptrdiff_t>(u) - static_cast<std::ptrdiff_t>(kept);
  const auto N = static_cast<std::ptrdiff_t>(n);
  std::ptrdiff_t s = (f + offset) % N;
  if (s < 0) s += N;
  return static_cast<std::size_t>(s);
}

namespace {

template <typename T>
struct Fftw;

template <>
struct Fftw<double> {
  using plan = fftw_plan;
  using cpx = fftw_complex;
  static plan make(int h, int w, int sign) {
    return fftw_plan_dft_2d(h, w, nullptr, nullptr, sign, FFTW_ESTIMATE | FFTW_UNALIGNED);
  }
  static void run(plan p, std::complex<double>* in, std::complex<double>* out) {
    fftw_execute_dft(p, reinterpret_cast<cpx*>(in), reinterpret_cast<cpx*>(out));
  }
};

template <>
struct Fftw<float> {
  using plan = fftwf_plan;
  using cpx = fftwf_complex;
  static plan make(int h, int w, int sign) {
    return fftwf_plan_dft_2d(h, w, nullptr, nullptr, sign, FFTW_ESTIMATE | FFTW_UNALIGNED);
  }
  static void run(plan p, std::complex<float>* in, std::complex<float>* out) {
    fftwf_execute_dft(p, reinterpret_cast<cpx*>(in), reinterpret_cast<cpx*>(out));
  }
};

// FFTW planning is not thread safe; plans are created once per size under a
// lock and executed concurrently afterwards (new-array execute is safe).
template <typename T>
typename Fftw<T>::plan cached_plan(std::size_t h, std::size_t w, int sign) {
  static std::mutex mu;
  static std::map<std::tuple<std::size_t, std::size_t, int>, typename Fftw<T>::plan> plans;
  std::lock_guard<std::mutex> lock(mu);
  auto key = std::make_tuple(h, w, sign);
  auto it = plans.find(key);
  if (it != plans.end()) return it->second;
  auto p = Fftw<T>::make(static_cast<int>(h), static_cast<int>(w), sign);
  require(p != nullptr, "FFTW planning failed", ErrorKind::Numerical);
  plans.emplace(key, p);
  return p;
}

// Circular centroid of the marginal power along one axis, in bins.
std::ptrdiff_t centroid_offset(const std::vector<double>& marginal) {
  const std::size_t n = marginal.size();
  double re = 0.0, im = 0.0;
  for (std::size_t u = 0; u < n; ++u) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(u) / static_cast<double>(n);
    re += marginal[u] * std::cos(a);
    im += marginal[u] * std::sin(a);
  }
  if (re == 0.0 && im == 0.0) return 0;
  const double frac = std::atan2(im, re) / (2.0 * std::numbers::pi);
  return static_cast<std::ptrdiff_t>(std::llround(frac * static_cast<double>(n)));
}

std::size_t kept_size(double rho, std::size_t n) {
  const auto k = static_cast<std::size_t>(std::llround(rho * static_cast<double>(n)));
  require(k >= 4, "sub-aperture output must keep at least 4 pixels per axis");
  return std::min(k, n);
}

}  // namespace

template <typename T>
ComplexPlane<T> subaperture_plane(const ComplexPlane<T>& in, const SubApertureParams& params) {
  params.validate();
  const std::size_t H = in.height, W = in.width;
  require(in.data.size() == H * W, "complex plane size mismatch", ErrorKind::ShapeMismatch);
  const std::size_t kh = kept_size(params.rho_az, H), kw = kept_size(params.rho_rg, W);

  std::vector<std::complex<T>> work = in.data;
  std::vector<std::complex<T>> spec(H * W);
  Fftw<T>::run(cached_plan<T>(H, W, FFTW_FORWARD), work.data(), spec.data());

  std::ptrdiff_t off_az = 0, off_rg = 0;
  if (params.recenter) {
    std::vector<double> rows(H, 0.0), cols(W, 0.0);
    for (std::size_t u = 0; u < H; ++u)
      for (std::size_t v = 0; v < W; ++v) {
        const double p = std::norm(std::complex<double>(spec[u * W + v]));
        rows[u] += p;
        cols[v] += p;
      }
    off_az = centroid_offset(rows);
    off_rg = centroid_offset(cols);
  }

  std::vector<std::complex<T>> kept(kh * kw);
  for (std::size_t u = 0; u < kh; ++u) {
    const std::size_t su = source_bin(u, kh, H, off_az);
    for (std::size_t v = 0; v < kw; ++v) kept[u * kw + v] = spec[su * W + source_bin(v, kw, W, off_rg)];
  }

  ComplexPlane<T> out;
  out.height = kh;
  out.width = kw;
  out.data.resize(kh * kw);
  Fftw<T>::run(cached_plan<T>(kh, kw, FFTW_BACKWARD), kept.data(), out.data.data());
  const double khw = static_cast<double>(kh * kw);
  const T scale = static_cast<T>(std::sqrt(khw / static_cast<double>(H * W)) / khw);
  for (auto& z : out.data) z *= scale;
  return out;
}

template ComplexPlane<float> subaperture_plane(const ComplexPlane<float>&, const SubApertureParams&);
template ComplexPlane<double> subaperture_plane(const ComplexPlane<double>&, const SubApertureParams&);

sar::SlcImage subaperture_decompose(const sar::SlcImage& slc, const SubApertureParams& params) {
  sar::SlcImage out;
  out.sensor_id = slc.sensor_id;
  out.channels = slc.channels;
  out.range_resolution_m = slc.range_resolution_m / params.rho_rg;
  out.azimuth_resolution_m = slc.azimuth_resolution_m / params.rho_az;
  for (std::size_t c = 0; c < slc.channels; ++c) {
    ComplexPlane<float> plane{slc.height, slc.width, std::vector<std::complex<float>>(slc.height * slc.width)};
    for (std::size_t i = 0; i < slc.height * slc.width; ++i) plane.data[i] = slc.samples[i * slc.channels + c];
    const auto reduced = subaperture_plane(plane, params);
    if (c == 0) {
      out.height = reduced.height;
      out.width = reduced.width;
      out.samples.resize(out.height * out.width * out.channels);
    }
    for (std::size_t i = 0; i < reduced.data.size(); ++i) out.samples[i * out.channels + c] = reduced.data[i];
  }
  return out;
}

// ---------------------------------------------------------------- views

ViewPolicy ViewPolicy::from_config(const io::RunConfig& config) {
  ViewPolicy p;
  p.n_global = static_cast<std::size_t>(config.get_int("augment.n_global"));
  p.n_local = static_cast<std::size_t>(config.get_int("augment.n_local"));
  p.global_size = static_cast<std::size_t>(config.get_int("augment.global_size"));
  p.local_size = static_cast<std::size_t>(config.get_int("augment.local_size"));
  p.q_sub = config.get_real("augment.q_sub");
  p.shift = {config.get_real("augment.shift_a"), config.get_real("augment.shift_b")};
  const double rho = config.get_real("augment.subaperture_rho");
  p.subaperture = {rho, rho, config.get_bool("augment.recenter")};
  p.validate();
  return p;
}

void ViewPolicy::validate() const {
  require(n_global + n_local >= 1, "view policy needs at least one student view");
  require(q_sub >= 0.0 && q_sub <= 1.0, "q_sub must lie in [0,1]");
  shift.validate();
  subaperture.validate();
}

ViewBundle make_views(const TrainingSample& sample, const ViewPolicy& policy, const SeedStream& seed) {
  policy.validate();
  require(!sample.despeckled.empty(), "training sample is missing its despeckled twin", ErrorKind::Data);
  const Tensor raw = sar::normalize_amplitude(sar::amplitude(sample.slc), sample.norm);
  require(sample.despeckled.shape() == raw.shape(), "despeckled twin shape differs from the SLC patch",
          ErrorKind::ShapeMismatch);
  const Tensor clean = sar::normalize_amplitude(sample.despeckled, sample.norm);

  ViewBundle bundle;
  {
    SeedStream rng = seed.derive("teacher");
    bundle.teacher_view = random_crop(clean, policy.global_size, rng);
  }
  for (std::size_t j = 0; j < policy.n_global; ++j) {
    SeedStream rng = seed.derive("global", j);
    Tensor v = random_crop(raw, policy.global_size, rng);
    bundle.student_views.push_back(amplitude_shift(v, policy.shift, rng));
    bundle.subaperture_view.push_back(false);
  }
  for (std::size_t j = 0; j < policy.n_local; ++j) {
    SeedStream rng = seed.derive("local", j);
    const bool use_sub = policy.q_sub > 0.0 && rng.uniform() < policy.q_sub;
    Tensor v;
    if (use_sub) {
      const sar::SlcImage reduced = subaperture_decompose(sample.slc, policy.subaperture);
      require(reduced.height == policy.local_size && reduced.width == policy.local_size,
              "sub-aperture output " + std::to_string(reduced.height) + "x" + std::to_string(reduced.width) +
                  " does not match local view size " + std::to_string(policy.local_size));
      v = sar::normalize_amplitude(sar::amplitude(reduced), sample.norm);
    } else {
      v = random_crop(raw, policy.local_size, rng);
    }
    bundle.student_views.push_back(amplitude_shift(v, policy.shift, rng));
    bundle.subaperture_view.push_back(use_sub);
  }
  return bundle;
}

}  // namespace safe::augment
