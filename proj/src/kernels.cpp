#include "ffsc/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <string>
#include <vector>

#include "ffsc/matrix.hpp"

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace ffsc {

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> indices) {
  Matrix out(indices.size(), m.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= m.rows()) throw StructuralError("gather_rows: row index out of range");
    auto src = m.row(indices[i]);
    auto dst = out.row(i);
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return out;
}

namespace kernels {
namespace {

// Row bodies shared by both variants so the accumulation order is identical.

inline void nt_row(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
                   bool accumulate) {
  for (std::size_t j = 0; j < n; ++j) {
    const double* bj = b + j * k;
    double s = 0.0;
    for (std::size_t p = 0; p < k; ++p) s += a[p] * bj[p];
    c[j] = accumulate ? c[j] + s : s;
  }
}

// Row i of A^T B: sum over p of A(p,i) * B(p,:)
inline void tn_row(const double* a, const double* b, double* c, std::size_t i, std::size_t m,
                   std::size_t n, std::size_t k, bool accumulate) {
  if (!accumulate) std::fill(c, c + n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double api = a[p * m + i];
    if (api == 0.0) continue;
    const double* bp = b + p * n;
    for (std::size_t j = 0; j < n; ++j) c[j] += api * bp[j];
  }
}

inline void nn_row(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
                   bool accumulate) {
  if (!accumulate) std::fill(c, c + n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double ap = a[p];
    if (ap == 0.0) continue;
    const double* bp = b + p * n;
    for (std::size_t j = 0; j < n; ++j) c[j] += ap * bp[j];
  }
}

inline void sqdist_row(const double* a, const double* b, double* d, std::size_t n,
                       std::size_t k) {
  for (std::size_t j = 0; j < n; ++j) {
    const double* bj = b + j * k;
    double s = 0.0;
    for (std::size_t p = 0; p < k; ++p) {
      const double diff = a[p] - bj[p];
      s += diff * diff;
    }
    d[j] = s;
  }
}

struct RowStats {
  std::vector<double> centered;  // m x k, each row mean-removed
  std::vector<double> norm;      // centered L2 norm per row
};

RowStats row_stats(std::span<const double> a, std::size_t m, std::size_t k) {
  RowStats st{std::vector<double>(m * k), std::vector<double>(m)};
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t p = 0; p < k; ++p) mean += a[i * k + p];
    mean /= static_cast<double>(k);
    double ss = 0.0;
    for (std::size_t p = 0; p < k; ++p) {
      const double v = a[i * k + p] - mean;
      st.centered[i * k + p] = v;
      ss += v * v;
    }
    st.norm[i] = std::sqrt(ss);
  }
  return st;
}

inline void pearson_row(const RowStats& st, double* d, std::size_t i, std::size_t m,
                        std::size_t k) {
  for (std::size_t j = 0; j < m; ++j) {
    if (j == i) {
      d[j] = 0.0;
      continue;
    }
    // Symmetric by construction: always accumulate with the smaller index first.
    const std::size_t lo = std::min(i, j), hi = std::max(i, j);
    const double* cl = st.centered.data() + lo * k;
    const double* ch = st.centered.data() + hi * k;
    double s = 0.0;
    for (std::size_t p = 0; p < k; ++p) s += cl[p] * ch[p];
    d[j] = 1.0 - s / (st.norm[lo] * st.norm[hi]);
  }
}

bool in_parallel() {
#if defined(_OPENMP)
  return omp_in_parallel() != 0;
#else
  return true;
#endif
}

bool go_parallel(std::size_t work) { return work >= kParallelThreshold && !in_parallel(); }

}  // namespace

namespace serial {

void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t n, std::size_t k, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) nt_row(a.data() + i * k, b.data(), c.data() + i * n, n, k, accumulate);
}

void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t n, std::size_t k, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) tn_row(a.data(), b.data(), c.data() + i * n, i, m, n, k, accumulate);
}

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t n, std::size_t k, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) nn_row(a.data() + i * k, b.data(), c.data() + i * n, n, k, accumulate);
}

void pairwise_sq_dist(std::span<const double> a, std::span<const double> b, std::span<double> d,
                      std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) sqdist_row(a.data() + i * k, b.data(), d.data() + i * n, n, k);
}

void pearson_distance(std::span<const double> a, std::span<double> d, std::size_t m,
                      std::size_t k) {
  const RowStats st = row_stats(a, m, k);
  for (std::size_t i = 0; i < m; ++i) pearson_row(st, d.data() + i * m, i, m, k);
}

}  // namespace serial

namespace parallel {

void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t n, std::size_t k, bool accumulate) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    const auto r = static_cast<std::size_t>(i);
    nt_row(a.data() + r * k, b.data(), c.data() + r * n, n, k, accumulate);
  }
}

void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t n, std::size_t k, bool accumulate) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    const auto r = static_cast<std::size_t>(i);
    tn_row(a.data(), b.data(), c.data() + r * n, r, m, n, k, accumulate);
  }
}

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t n, std::size_t k, bool accumulate) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    const auto r = static_cast<std::size_t>(i);
    nn_row(a.data() + r * k, b.data(), c.data() + r * n, n, k, accumulate);
  }
}

void pairwise_sq_dist(std::span<const double> a, std::span<const double> b, std::span<double> d,
                      std::size_t m, std::size_t n, std::size_t k) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    const auto r = static_cast<std::size_t>(i);
    sqdist_row(a.data() + r * k, b.data(), d.data() + r * n, n, k);
  }
}

void pearson_distance(std::span<const double> a, std::span<double> d, std::size_t m,
                      std::size_t k) {
  const RowStats st = row_stats(a, m, k);
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(dynamic, 8)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    const auto r = static_cast<std::size_t>(i);
    pearson_row(st, d.data() + r * m, r, m, k);
  }
}

}  // namespace parallel

void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t n, std::size_t k, bool accumulate) {
  if (go_parallel(m * n * k)) return parallel::gemm_nt(a, b, c, m, n, k, accumulate);
  serial::gemm_nt(a, b, c, m, n, k, accumulate);
}

void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t n, std::size_t k, bool accumulate) {
  if (go_parallel(m * n * k)) return parallel::gemm_tn(a, b, c, m, n, k, accumulate);
  serial::gemm_tn(a, b, c, m, n, k, accumulate);
}

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t n, std::size_t k, bool accumulate) {
  if (go_parallel(m * n * k)) return parallel::gemm_nn(a, b, c, m, n, k, accumulate);
  serial::gemm_nn(a, b, c, m, n, k, accumulate);
}

void pairwise_sq_dist(std::span<const double> a, std::span<const double> b, std::span<double> d,
                      std::size_t m, std::size_t n, std::size_t k) {
  if (go_parallel(m * n * k)) return parallel::pairwise_sq_dist(a, b, d, m, n, k);
  serial::pairwise_sq_dist(a, b, d, m, n, k);
}

void pearson_distance(std::span<const double> a, std::span<double> d, std::size_t m,
                      std::size_t k) {
  if (go_parallel(m * m * k)) return parallel::pearson_distance(a, d, m, k);
  serial::pearson_distance(a, d, m, k);
}

int worker_count() {
  if (const char* env = std::getenv("FFSC_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n > 0) return n;
    } catch (const std::exception&) {
      // fall through to the OpenMP default
    }
  }
#if defined(_OPENMP)
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace kernels
}  // namespace ffsc
