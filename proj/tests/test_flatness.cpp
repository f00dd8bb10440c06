#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "ffsc/flatness.hpp"
#include "test_util.hpp"

using namespace ffsc;
using namespace ffsc::flatness;

namespace {

QuadraticObjective diag123() {
  Matrix a(3, 3);
  a(0, 0) = 1.0;
  a(1, 1) = 2.0;
  a(2, 2) = 3.0;
  return QuadraticObjective(a);
}

Matrix random_symmetric(std::size_t n, Rng& rng) {
  Matrix a = testing::random_matrix(n, n, rng);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) a(i, j) = a(j, i);
  }
  return a;
}

double rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); }

struct SmallNet {
  nn::Model model;
  nn::Batch batch;
};

SmallNet small_net(std::uint64_t seed) {
  Rng rng = make_rng(seed);
  SmallNet s{nn::Model::initialized({3, 5, 4, 3}, nn::Activation::tanh, seed), testing::random_batch(12, 3, 3, rng)};
  testing::randomize(s.model, rng, 0.7);
  return s;
}

data::Domain gaussian_domain(std::vector<std::vector<double>> means, double sigma, int first_class) {
  data::GaussianMixture g{std::move(means), sigma};
  Matrix x(g.means.size(), g.dim());
  std::vector<int> y;
  for (std::size_t k = 0; k < g.means.size(); ++k) {
    std::copy(g.means[k].begin(), g.means[k].end(), x.row(k).begin());
    y.push_back(first_class + static_cast<int>(k));
  }
  data::Domain d = data::make_domain("g", std::move(x), std::move(y));
  d.generator = std::move(g);
  return d;
}

}  // namespace

TEST_CASE("hvp") {
  SUBCASE("exact on a quadratic") {
    const auto q = diag123();
    const std::vector<double> theta{0.3, -0.2, 0.5}, e2{0.0, 1.0, 0.0};
    const auto hv = hvp(q, theta, e2);
    CHECK(std::abs(hv[0]) < 1e-8);
    CHECK(std::abs(hv[1] - 2.0) < 1e-8);
    CHECK(std::abs(hv[2]) < 1e-8);
  }
  SUBCASE("homogeneous and symmetric on a small network") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const SmallNet s = small_net(seed);
      Rng rng = make_rng(seed, 1);
      const std::size_t n = s.model.parameter_count();
      std::vector<double> u(n), v(n), v2(n);
      std::normal_distribution<double> normal;
      for (std::size_t i = 0; i < n; ++i) {
        u[i] = normal(rng);
        v[i] = normal(rng);
        v2[i] = 2.0 * v[i];
      }
      const auto hv = hvp(s.model, s.batch, v), hv2 = hvp(s.model, s.batch, v2), hu = hvp(s.model, s.batch, u);
      double worst = 0.0;
      for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(hv2[i] - 2.0 * hv[i]) / (std::abs(hv2[i]) + 1e-8));
      CHECK(worst < 1e-6);
      double uhv = 0.0, vhu = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        uhv += u[i] * hv[i];
        vhu += v[i] * hu[i];
      }
      CHECK(rel(uhv, vhu) < 1e-6);
    }
  }
  SUBCASE("zero direction") {
    const auto q = diag123();
    CHECK_THROWS_AS(hvp(q, std::vector<double>{1, 1, 1}, std::vector<double>{0, 0, 0}), InvalidSpecError);
  }
}

TEST_CASE("hessian_trace") {
  const auto q = diag123();
  const std::vector<double> theta{1.0, 2.0, -1.0};
  SUBCASE("exact mode") {
    const auto t = hessian_trace(q, theta, {.exact = true});
    CHECK(std::abs(t.estimate - 6.0) < 1e-8);
    CHECK(t.stderr_ == 0.0);
    CHECK(t.probes == 3);
  }
  SUBCASE("Rademacher mode") {
    const auto t = hessian_trace(q, theta, {.probes = 1000, .seed = 3});
    CHECK(std::abs(t.estimate - 6.0) <= 3.0 * t.stderr_ + 1e-9);

    Rng rng = make_rng(9);
    const QuadraticObjective dense(random_symmetric(8, rng));
    double truth = 0.0;
    for (std::size_t i = 0; i < 8; ++i) truth += dense.hessian()(i, i);
    const std::vector<double> zero(8, 0.0);
    const auto d = hessian_trace(dense, zero, {.probes = 1000, .seed = 5});
    CHECK(d.stderr_ > 0.0);
    CHECK(std::abs(d.estimate - truth) < 3.0 * d.stderr_);
    const auto again = hessian_trace(dense, zero, {.probes = 1000, .seed = 5});
    CHECK(again.estimate == d.estimate);
    CHECK(again.stderr_ == d.stderr_);
  }
  SUBCASE("exact mode agrees with the analytic trace on a network-sized quadratic") {
    Rng rng = make_rng(2);
    const QuadraticObjective dense(random_symmetric(30, rng));
    double truth = 0.0;
    for (std::size_t i = 0; i < 30; ++i) truth += dense.hessian()(i, i);
    CHECK(std::abs(hessian_trace(dense, std::vector<double>(30, 0.5), {.exact = true}).estimate - truth) < 1e-8);
  }
  CHECK_THROWS_AS(hessian_trace(q, theta, {.probes = 0}), InvalidSpecError);
}

TEST_CASE("top_eigenvalues") {
  SUBCASE("known spectrum") {
    const auto r = top_eigenvalues(diag123(), std::vector<double>{0.1, 0.2, 0.3}, {.k = 2});
    REQUIRE(r.values.size() == 2);
    CHECK(std::abs(r.values[0] - 3.0) < 1e-6);
    CHECK(std::abs(r.values[1] - 2.0) < 1e-6);
    CHECK(r.all_converged());
  }
  SUBCASE("rank one") {
    const std::vector<double> v{1.0, -2.0, 0.5, 3.0};
    Matrix a(4, 4);
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < 4; ++j) a(i, j) = v[i] * v[j];
    }
    const auto r = top_eigenvalues(QuadraticObjective(a), std::vector<double>(4, 0.0), {.k = 2});
    CHECK(std::abs(r.values[0] - 14.25) < 1e-6);
    CHECK(std::abs(r.values[1]) < 1e-6);
  }
  SUBCASE("dense eigensolver oracle") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng = make_rng(seed, 0xe1);
      const std::size_t n = 10 + 2 * seed;
      const Matrix a = random_symmetric(n, rng);
      Eigen::MatrixXd e(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) e(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = a(i, j);
      }
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(e);
      std::vector<double> oracle(solver.eigenvalues().data(), solver.eigenvalues().data() + n);
      std::sort(oracle.begin(), oracle.end(), [](double x, double y) { return std::abs(x) > std::abs(y); });
      const auto r = top_eigenvalues(QuadraticObjective(a), std::vector<double>(n, 0.0),
                                     {.k = 2, .iterations = 20000, .tolerance = 1e-14, .seed = seed});
      CHECK(r.all_converged());
      CHECK(std::abs(r.values[0] - oracle[0]) < 1e-5);
      CHECK(std::abs(r.values[1] - oracle[1]) < 1e-5);
    }
  }
  SUBCASE("non-convergence is flagged") {
    Rng rng = make_rng(4);
    const auto r = top_eigenvalues(QuadraticObjective(random_symmetric(12, rng)), std::vector<double>(12, 0.0),
                                   {.k = 1, .iterations = 2});
    CHECK_FALSE(r.all_converged());
    CHECK(r.iterations[0] == 2);
  }
  CHECK_THROWS_AS(top_eigenvalues(diag123(), std::vector<double>(3, 0.0), {.k = 4}), InvalidSpecError);
}

TEST_CASE("landscape_slice") {
  SUBCASE("center is the plain loss and the SAM slice dominates") {
    const SmallNet s = small_net(3);
    const ModelObjective obj(s.model, s.batch);
    const auto theta = s.model.parameters();
    const auto dirs = random_directions(theta.size(), 2, 1);
    const auto g = landscape_slice(obj, theta, dirs, {.half_range = 0.5, .steps = 7, .sam_rho = 0.1});
    CHECK(g.erm.size() == 49);
    CHECK(g.erm[3 * 7 + 3] == optim::erm_objective(obj, theta, 0.0).loss);
    CHECK(g.c1[3] == 0.0);
    for (std::size_t i = 0; i < g.erm.size(); ++i) CHECK(g.sam[i] >= g.erm[i]);
    const std::string csv = g.csv();
    CHECK(csv.rfind("c1,c2,erm_loss,sam_loss\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 50);
  }
  SUBCASE("one-dimensional slice of a quadratic is a parabola") {
    const auto q = diag123();
    const std::vector<double> theta{0.5, -1.0, 2.0};
    const std::vector<std::vector<double>> dirs{{0.6, 0.0, 0.8}};
    const auto g = landscape_slice(q, theta, dirs, {.half_range = 2.0, .steps = 11});
    CHECK(g.sam.empty());
    const double first = g.erm[2] - 2 * g.erm[1] + g.erm[0];
    for (std::size_t i = 1; i + 1 < g.erm.size(); ++i) {
      CHECK(std::abs(g.erm[i + 1] - 2 * g.erm[i] + g.erm[i - 1] - first) < 1e-8);
    }
  }
  SUBCASE("contract violations") {
    const auto q = diag123();
    const std::vector<double> theta{0, 0, 0};
    const std::vector<std::vector<double>> bad{{1.0, 1.0, 0.0}};
    CHECK_THROWS_AS(landscape_slice(q, theta, bad, {}), InvalidSpecError);
    const std::vector<std::vector<double>> ok{{1.0, 0.0, 0.0}};
    CHECK_THROWS_AS(landscape_slice(q, theta, ok, {.steps = 4}), InvalidSpecError);
  }
}

TEST_CASE("tv_divergence") {
  const TvOptions analytic{};
  SUBCASE("identical specs give exactly zero") {
    const auto d = gaussian_domain({{0, 0}, {1, 1}}, 0.7, 0);
    CHECK(tv_divergence(d, d, analytic).value == 0.0);
    const auto relabeled = gaussian_domain({{1, 1}, {0, 0}}, 0.7, 10);
    CHECK(tv_divergence(d, relabeled, analytic).value == 0.0);
  }
  SUBCASE("closed form for two unit Gaussians") {
    const auto a = gaussian_domain({{0, 0, 0}}, 1.0, 0);
    const auto b = gaussian_domain({{0, 2, 0}}, 1.0, 1);
    const double expected = 2.0 * (2.0 * normal_cdf(1.0) - 1.0);
    CHECK(std::abs(expected - 1.3654) < 1e-4);
    CHECK(std::abs(tv_divergence(a, b, analytic).value - expected) < 1e-3);
  }
  SUBCASE("importance sampling matches the closed form") {
    data::GaussianMixture p{{{0, 0}, {0, 0}}, 1.0}, q{{{2, 0}}, 1.0};
    const double expected = 2.0 * (2.0 * normal_cdf(1.0) - 1.0);
    CHECK(std::abs(tv_divergence(p, q, {.samples = 200000}).value - expected) < 0.01);
  }
  SUBCASE("Monte Carlo mode") {
    const auto a = gaussian_domain({{0, 0, 0, 0}}, 1.0, 0);
    const auto b = gaussian_domain({{1, 1, 1, 1}}, 1.0, 1);
    const auto r = tv_divergence(a, b, {.method = TvMethod::monte_carlo, .samples = 100000, .seed = 4});
    CHECK(std::abs(r.value - 2.0 * (2.0 * normal_cdf(1.0) - 1.0)) < 0.02);
    CHECK(r.method == TvMethod::monte_carlo);
  }
  SUBCASE("monotone in the domain shift") {
    data::SyntheticSpec spec;
    spec.num_domains = 2;
    spec.classes_per_domain = 3;
    spec.dim = 4;
    double previous = -1.0;
    for (double shift : {0.0, 0.5, 1.0, 2.0}) {
      spec.shift = shift;
      const auto d = data::gen_synthetic_domains(spec, 8);
      const double v = tv_divergence(d[0], d[1], analytic).value;
      CHECK(v >= 0.0);
      CHECK(v <= 2.0);
      CHECK(v > previous);
      if (shift == 0.0) CHECK(v == 0.0);
      previous = v;
    }
  }
  SUBCASE("analytic mode needs generators") {
    data::Domain plain = data::make_domain("plain", Matrix(4, 2, std::vector<double>{0, 1, 2, 3, 4, 5, 6, 7}), {0, 0, 1, 1});
    CHECK_THROWS_AS(tv_divergence(plain, plain, analytic), InvalidSpecError);
  }
}

TEST_CASE("bound_report") {
  data::SyntheticSpec spec;
  spec.num_domains = 3;
  spec.classes_per_domain = 4;
  spec.samples_per_class = 20;
  spec.dim = 6;
  spec.shift = 1.0;
  const auto domains = data::gen_synthetic_domains(spec, 2);
  BoundOptions opt;
  opt.config.total_iterations = 150;
  opt.config.restart_period = 150;
  opt.config.rho = 0.05;
  opt.protocol = {2, 4, 1, 3, 3, 1};
  opt.tasks = 5;
  const nn::Model init = nn::Model::initialized({6, 12, 4}, nn::Activation::relu, 1);
  const auto [train_half, test_half] = data::stratified_split(domains[0], 0.5, 1);
  const nn::Model theta = optim::train(init, train_half, opt.config).model;

  const std::vector<data::Domain> targets{test_half, domains[1], domains[2]};
  const BoundReport r = bound_report(theta, train_half, targets, opt);
  CHECK(r.sam_erm_gap == r.sam_loss - r.erm_min);
  REQUIRE(r.divergence.size() == 3);
  CHECK(r.divergence[0].value == 0.0);
  for (const auto& d : r.divergence) {
    CHECK(d.value >= 0.0);
    CHECK(d.value <= 2.0);
  }
  for (double v : {r.sam_loss, r.erm_min, r.expected_divergence, r.target_gap}) CHECK(std::isfinite(v));
  const Json j = r;
  CHECK(j["not_computed"].size() == 5);
  CHECK(j["targets"].size() == 3);

  SUBCASE("a larger shift raises the expected divergence") {
    spec.shift = 2.5;
    const auto far = data::gen_synthetic_domains(spec, 2);
    const std::vector<data::Domain> far_targets{far[1], far[2]};
    const std::vector<data::Domain> near_targets{domains[1], domains[2]};
    const auto near_r = bound_report(theta, train_half, near_targets, opt);
    const auto far_r = bound_report(theta, train_half, far_targets, opt);
    CHECK(far_r.expected_divergence > near_r.expected_divergence);
  }
}
