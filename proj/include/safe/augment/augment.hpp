#pragma once

#include <complex>
#include <cstddef>
#include <vector>

#include "safe/io/config.hpp"
#include "safe/io/seed.hpp"
#include "safe/sar/sar.hpp"
#include "safe/tensor.hpp"

namespace safe::augment {

/// Bounds of the uniform log-amplitude shift B ~ U(a, b).
struct ShiftParams {
  double a = 0.0;
  double b = 0.3;

  void validate() const;
};

/// Draws one B for the whole view, adds it to every entry, clips to [0,1].
Tensor amplitude_shift(const Tensor& patch, const ShiftParams& params, SeedStream& rng);
Tensor shift_by(const Tensor& patch, double shift);

struct CropOffset {
  std::size_t row = 0;
  std::size_t col = 0;
};

/// Square out_size crop of an {H,W,C} (or {H,W}) array at a uniformly drawn offset.
Tensor random_crop(const Tensor& patch, std::size_t out_size, SeedStream& rng,
                   CropOffset* where = nullptr);
Tensor crop(const Tensor& patch, std::size_t out_size, CropOffset at);

/// Kept-bandwidth fractions along azimuth (rows) and range (columns).
struct SubApertureParams {
  double rho_az = 0.32;
  double rho_rg = 0.32;
  bool recenter = false;

  void validate() const;
};

template <typename T>
struct ComplexPlane {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::complex<T>> data;  // row-major
};

/// Sub-aperture decomposition of one complex plane: 2-D FFT, keep the
/// central round(rho_az*H) x round(rho_rg*W) block of the (optionally
/// centroid-recentred) spectrum, inverse FFT at the reduced size.
///
/// Scaling: out = sqrt(h'w'/(HW)) * IDFT_{h'w'}(kept) / (h'w'), so that
/// sum|out|^2 = sum_kept |X|^2 / (HW) and rho = 1 is the identity. Speckle
/// intensity is therefore preserved on average.
template <typename T>
ComplexPlane<T> subaperture_plane(const ComplexPlane<T>& in, const SubApertureParams& params);

/// Applies subaperture_plane to every channel of an SLC.
sar::SlcImage subaperture_decompose(const sar::SlcImage& slc, const SubApertureParams& params);

/// Index of the spectral bin kept at output position u (0 <= u < kept), for
/// an axis of length n with the spectrum recentred by `offset` bins.
std::size_t source_bin(std::size_t u, std::size_t kept, std::size_t n, std::ptrdiff_t offset);

struct ViewPolicy {
  std::size_t n_global = 2;
  std::size_t n_local = 3;
  std::size_t global_size = 64;
  std::size_t local_size = 32;
  double q_sub = 0.5;
  ShiftParams shift;
  SubApertureParams subaperture;

  static ViewPolicy from_config(const io::RunConfig& config);
  void validate() const;
};

/// One training patch: the complex SLC, its despeckled amplitude twin and
/// the sensor normalization bounds.
struct TrainingSample {
  sar::SlcImage slc;
  Tensor despeckled;  // {H,W,C} amplitude
  sar::NormalizationParams norm;
};

/// Teacher view (despeckled global crop, no shift) and k-1 student views
/// ordered globals first, then locals. All views are {h,w,C} in [0,1].
struct ViewBundle {
  Tensor teacher_view;
  std::vector<Tensor> student_views;
  std::vector<bool> subaperture_view;  // per student view
};

ViewBundle make_views(const TrainingSample& sample, const ViewPolicy& policy, const SeedStream& seed);

}  // namespace safe::augment
