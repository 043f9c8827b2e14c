#pragma once

#include <cstddef>

// Data-parallel inner loops. Every kernel in `safe::kernels` has a serial
// twin in `safe::kernels::reference` with the plainest possible loop nest;
// tests compare the two and bench/ times them against each other.
//
// Parallel kernels split work over output elements only, so each output is
// accumulated in the same order whatever the thread count; results are
// bit-identical for 1 or N workers.
namespace safe::kernels {

enum class Op { N, T };

/// Workers used by parallel kernels (OpenMP threads).
int num_workers();
void set_num_workers(int n);
/// Applies SAFE_NUM_WORKERS from the environment, if set.
void apply_worker_env();

/// C(m x n) = op(A) * op(B), or C += ... when `accumulate`.
/// op(A) is m x k; A is stored m x k for Op::N and k x m for Op::T.
/// op(B) is k x n; B is stored k x n for Op::N and n x k for Op::T.
void gemm(Op ta, Op tb, std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double* c, bool accumulate = false);

/// Gathers 3x3 zero-padded neighbourhoods of a {C,H,W} map into a
/// {C*9, H*W} column matrix.
void im2col3x3(const double* x, std::size_t channels, std::size_t height, std::size_t width,
               double* cols);
/// Adjoint of im2col3x3; accumulates into x.
void col2im3x3(const double* cols, std::size_t channels, std::size_t height, std::size_t width,
               double* x);

/// Mean over a window x window neighbourhood with reflect padding
/// (mirror without repeating the edge sample). window must be odd.
void box_mean(const double* in, std::size_t height, std::size_t width, std::size_t window,
              double* out);

/// Mirror index into [0, n) without edge repetition (period 2n-2).
std::ptrdiff_t reflect_index(std::ptrdiff_t i, std::size_t n);

namespace reference {

void gemm(Op ta, Op tb, std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double* c, bool accumulate = false);
void box_mean(const double* in, std::size_t height, std::size_t width, std::size_t window,
              double* out);

}  // namespace reference
}  // namespace safe::kernels
