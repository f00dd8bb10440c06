#include <array>
#include <vector>

#include "doctest.h"
#include "ffsc/kernels.hpp"
#include "test_util.hpp"

using namespace ffsc;

TEST_CASE("parallel kernels are bitwise equal to the serial reference") {
  Rng rng = make_rng(7);
  using Dims = std::array<std::size_t, 3>;
  for (const Dims& dims : {Dims{1, 1, 1}, Dims{3, 5, 7}, Dims{64, 48, 33}, Dims{200, 130, 90}}) {
    const auto [m, n, k] = dims;
    const Matrix a = testing::random_matrix(m, k, rng);
    const Matrix b = testing::random_matrix(n, k, rng);
    const Matrix at = testing::random_matrix(k, m, rng);
    const Matrix bn = testing::random_matrix(k, n, rng);
    const Matrix c0 = testing::random_matrix(m, n, rng);

    for (bool acc : {false, true}) {
      Matrix s = c0, p = c0;
      kernels::serial::gemm_nt(a.flat(), b.flat(), s.flat(), m, n, k, acc);
      kernels::parallel::gemm_nt(a.flat(), b.flat(), p.flat(), m, n, k, acc);
      CHECK(s == p);

      s = c0, p = c0;
      kernels::serial::gemm_tn(at.flat(), bn.flat(), s.flat(), m, n, k, acc);
      kernels::parallel::gemm_tn(at.flat(), bn.flat(), p.flat(), m, n, k, acc);
      CHECK(s == p);

      s = c0, p = c0;
      kernels::serial::gemm_nn(a.flat(), bn.flat(), s.flat(), m, n, k, acc);
      kernels::parallel::gemm_nn(a.flat(), bn.flat(), p.flat(), m, n, k, acc);
      CHECK(s == p);
    }

    Matrix ds(m, n), dp(m, n);
    kernels::serial::pairwise_sq_dist(a.flat(), b.flat(), ds.flat(), m, n, k);
    kernels::parallel::pairwise_sq_dist(a.flat(), b.flat(), dp.flat(), m, n, k);
    CHECK(ds == dp);

    if (k >= 2) {
      Matrix ps(m, m), pp(m, m);
      kernels::serial::pearson_distance(a.flat(), ps.flat(), m, k);
      kernels::parallel::pearson_distance(a.flat(), pp.flat(), m, k);
      CHECK(ps == pp);
    }
  }
}

TEST_CASE("gemm variants agree with a naive triple loop") {
  Rng rng = make_rng(3);
  const std::size_t m = 4, n = 3, k = 5;
  const Matrix a = testing::random_matrix(m, k, rng);
  const Matrix b = testing::random_matrix(n, k, rng);
  const Matrix bn = testing::random_matrix(k, n, rng);
  Matrix nt(m, n), nn(m, n), tn(k, k);
  kernels::gemm_nt(a.flat(), b.flat(), nt.flat(), m, n, k);
  kernels::gemm_nn(a.flat(), bn.flat(), nn.flat(), m, n, k);
  kernels::gemm_tn(a.flat(), a.flat(), tn.flat(), k, k, m);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s1 = 0, s2 = 0;
      for (std::size_t p = 0; p < k; ++p) {
        s1 += a(i, p) * b(j, p);
        s2 += a(i, p) * bn(p, j);
      }
      CHECK(nt(i, j) == doctest::Approx(s1).epsilon(1e-14));
      CHECK(nn(i, j) == doctest::Approx(s2).epsilon(1e-14));
    }
  }
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < m; ++p) s += a(p, i) * a(p, j);
      CHECK(tn(i, j) == doctest::Approx(s).epsilon(1e-14));
    }
  }
}

TEST_CASE("pearson distance is symmetric with a zero diagonal") {
  Rng rng = make_rng(11);
  const Matrix a = testing::random_matrix(20, 6, rng);
  Matrix d(20, 20);
  kernels::pearson_distance(a.flat(), d.flat(), 20, 6);
  for (std::size_t i = 0; i < 20; ++i) {
    CHECK(d(i, i) == 0.0);
    for (std::size_t j = 0; j < 20; ++j) {
      CHECK(d(i, j) == d(j, i));
      CHECK(d(i, j) >= -1e-12);
      CHECK(d(i, j) <= 2.0 + 1e-12);
    }
  }
}
