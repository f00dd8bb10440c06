#pragma once

// Dense inner loops used by the network, the transferability score and the
// nearest-centroid classifier. Every kernel exists twice:
//
//   kernels::serial    plain loops, the reference implementation
//   kernels::parallel  OpenMP version of the same loops
//
// Each output element is produced by exactly one thread with the same
// accumulation order as the serial code, so both variants are bitwise equal.
// The unqualified entry points in `kernels` dispatch to the parallel variant
// once the work is large enough and we are not already inside a parallel
// region.

#include <cstddef>
#include <exception>
#include <span>

namespace ffsc::kernels {

// C[m x n] = A[m x k] * B[n x k]^T  (+ C when accumulate)
// C[m x n] = A[k x m]^T * B[k x n]  (+ C when accumulate)
// C[m x n] = A[m x k] * B[k x n]    (+ C when accumulate)
// pairwise_sq_dist: D[m x n] with D(i,j) = |A_i - B_j|^2, A[m x k], B[n x k]
// pearson_distance: D[m x m] with D(i,j) = 1 - corr(A_i, A_j); rows must be
//   non-constant (caller checks). Diagonal is exactly 0.

namespace serial {
void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t n, std::size_t k, bool accumulate);
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t n, std::size_t k, bool accumulate);
void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t n, std::size_t k, bool accumulate);
void pairwise_sq_dist(std::span<const double> a, std::span<const double> b, std::span<double> d,
                      std::size_t m, std::size_t n, std::size_t k);
void pearson_distance(std::span<const double> a, std::span<double> d, std::size_t m,
                      std::size_t k);
}  // namespace serial

namespace parallel {
void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t n, std::size_t k, bool accumulate);
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t n, std::size_t k, bool accumulate);
void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t n, std::size_t k, bool accumulate);
void pairwise_sq_dist(std::span<const double> a, std::span<const double> b, std::span<double> d,
                      std::size_t m, std::size_t n, std::size_t k);
void pearson_distance(std::span<const double> a, std::span<double> d, std::size_t m,
                      std::size_t k);
}  // namespace parallel

void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t n, std::size_t k, bool accumulate = false);
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t n, std::size_t k, bool accumulate = false);
void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t n, std::size_t k, bool accumulate = false);
void pairwise_sq_dist(std::span<const double> a, std::span<const double> b, std::span<double> d,
                      std::size_t m, std::size_t n, std::size_t k);
void pearson_distance(std::span<const double> a, std::span<double> d, std::size_t m,
                      std::size_t k);

/// Worker count for task-level loops: FFSC_THREADS if set and > 0, otherwise
/// the OpenMP default.
int worker_count();

/// Runs f(i) for i in [0, n) on worker_count() threads. Each index must be
/// independent; the first exception thrown is rethrown after the loop.
template <typename F>
void for_each_index(std::size_t n, F&& f) {
  std::exception_ptr error;
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic) num_threads(worker_count()) if (n > 1)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      f(static_cast<std::size_t>(i));
    } catch (...) {
#pragma omp critical(ffsc_for_each_index)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

/// Minimum multiply-add count before the dispatchers go parallel.
inline constexpr std::size_t kParallelThreshold = 1u << 16;

}  // namespace ffsc::kernels
