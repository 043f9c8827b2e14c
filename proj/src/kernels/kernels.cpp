#include "safe/kernels/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cstdlib>
#include <string>
#include <vector>

#include "safe/error.hpp"

namespace safe::kernels {
namespace {

constexpr std::size_t kParallelWork = 1u << 15;

void transpose(const double* src, std::size_t rows, std::size_t cols, double* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

// C(m x n) (+)= A(m x k) * B(k x n), all row-major.
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate) {
  const bool par = m > 1 && m * n * k >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(m); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    double* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
#pragma omp simd
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(m x n) (+)= A^T B with A stored k x m.
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate) {
  const bool par = m > 1 && m * n * k >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(m); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    double* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[p * m + i];
      const double* brow = b + p * n;
#pragma omp simd
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

int num_workers() { return omp_get_max_threads(); }

void set_num_workers(int n) { omp_set_num_threads(std::max(1, n)); }

void apply_worker_env() {
  if (const char* env = std::getenv("SAFE_NUM_WORKERS")) {
    const int n = std::atoi(env);
    if (n > 0) set_num_workers(std::min(n, omp_get_num_procs()));
  }
}

void gemm(Op ta, Op tb, std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double* c, bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    return;
  }
  // B^T is materialised so the innermost loop always streams a contiguous row.
  std::vector<double> bt;
  const double* bn = b;
  if (tb == Op::T) {
    bt.resize(k * n);
    transpose(b, n, k, bt.data());
    bn = bt.data();
  }
  if (ta == Op::N) {
    gemm_nn(m, n, k, a, bn, c, accumulate);
  } else {
    gemm_tn(m, n, k, a, bn, c, accumulate);
  }
}

void im2col3x3(const double* x, std::size_t channels, std::size_t height, std::size_t width,
               double* cols) {
  const std::size_t hw = height * width;
#pragma omp parallel for schedule(static) if (channels * hw * 9 >= kParallelWork)
  for (std::ptrdiff_t cc = 0; cc < static_cast<std::ptrdiff_t>(channels); ++cc) {
    const std::size_t ch = static_cast<std::size_t>(cc);
    const double* plane = x + ch * hw;
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        double* out = cols + (ch * 9 + static_cast<std::size_t>((dy + 1) * 3 + dx + 1)) * hw;
        for (std::size_t y = 0; y < height; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
          for (std::size_t xx = 0; xx < width; ++xx) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx) + dx;
            const bool inside = sy >= 0 && sy < static_cast<std::ptrdiff_t>(height) && sx >= 0 &&
                                sx < static_cast<std::ptrdiff_t>(width);
            out[y * width + xx] =
                inside ? plane[static_cast<std::size_t>(sy) * width + static_cast<std::size_t>(sx)]
                       : 0.0;
          }
        }
      }
    }
  }
}

void col2im3x3(const double* cols, std::size_t channels, std::size_t height, std::size_t width,
               double* x) {
  const std::size_t hw = height * width;
#pragma omp parallel for schedule(static) if (channels * hw * 9 >= kParallelWork)
  for (std::ptrdiff_t cc = 0; cc < static_cast<std::ptrdiff_t>(channels); ++cc) {
    const std::size_t ch = static_cast<std::size_t>(cc);
    double* plane = x + ch * hw;
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const double* in = cols + (ch * 9 + static_cast<std::size_t>((dy + 1) * 3 + dx + 1)) * hw;
        for (std::size_t y = 0; y < height; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(height)) continue;
          for (std::size_t xx = 0; xx < width; ++xx) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx) + dx;
            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(width)) continue;
            plane[static_cast<std::size_t>(sy) * width + static_cast<std::size_t>(sx)] +=
                in[y * width + xx];
          }
        }
      }
    }
  }
}

std::ptrdiff_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * n - 2);
  i %= period;
  if (i < 0) i += period;
  const auto last = static_cast<std::ptrdiff_t>(n - 1);
  return i <= last ? i : period - i;
}

void box_mean(const double* in, std::size_t height, std::size_t width, std::size_t window,
              double* out) {
  require(window % 2 == 1, "box window must be odd");
  const auto r = static_cast<std::ptrdiff_t>(window / 2);
  // Horizontal pass then vertical pass, each a direct window sum over
  // reflected indices; rows (then columns) are independent.
  std::vector<double> tmp(height * width);
#pragma omp parallel for schedule(static) if (height * width * window >= kParallelWork)
  for (std::ptrdiff_t yy = 0; yy < static_cast<std::ptrdiff_t>(height); ++yy) {
    const double* row = in + static_cast<std::size_t>(yy) * width;
    double* trow = tmp.data() + static_cast<std::size_t>(yy) * width;
    for (std::size_t x = 0; x < width; ++x) {
      double s = 0.0;
      for (std::ptrdiff_t d = -r; d <= r; ++d)
        s += row[reflect_index(static_cast<std::ptrdiff_t>(x) + d, width)];
      trow[x] = s;
    }
  }
  const double norm = 1.0 / static_cast<double>(window * window);
#pragma omp parallel for schedule(static) if (height * width * window >= kParallelWork)
  for (std::ptrdiff_t yy = 0; yy < static_cast<std::ptrdiff_t>(height); ++yy) {
    double* orow = out + static_cast<std::size_t>(yy) * width;
    std::fill(orow, orow + width, 0.0);
    for (std::ptrdiff_t d = -r; d <= r; ++d) {
      const double* trow =
          tmp.data() + static_cast<std::size_t>(reflect_index(yy + d, height)) * width;
      for (std::size_t x = 0; x < width; ++x) orow[x] += trow[x];
    }
    for (std::size_t x = 0; x < width; ++x) orow[x] *= norm;
  }
}

namespace reference {

void gemm(Op ta, Op tb, std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ta == Op::N ? a[i * k + p] : a[p * m + i];
        const double bv = tb == Op::N ? b[p * n + j] : b[j * k + p];
        s += av * bv;
      }
      c[i * n + j] = s;
    }
  }
}

void box_mean(const double* in, std::size_t height, std::size_t width, std::size_t window,
              double* out) {
  require(window % 2 == 1, "box window must be odd");
  const auto r = static_cast<std::ptrdiff_t>(window / 2);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      double s = 0.0;
      for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
        for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
          const auto sy = reflect_index(static_cast<std::ptrdiff_t>(y) + dy, height);
          const auto sx = reflect_index(static_cast<std::ptrdiff_t>(x) + dx, width);
          s += in[static_cast<std::size_t>(sy) * width + static_cast<std::size_t>(sx)];
        }
      }
      out[y * width + x] = s / static_cast<double>(window * window);
    }
  }
}

}  // namespace reference
}  // namespace safe::kernels
