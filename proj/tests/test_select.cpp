#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "ffsc/optim.hpp"
#include "ffsc/select.hpp"
#include "test_util.hpp"

using namespace ffsc;
using namespace ffsc::select;

namespace {

Matrix one_hot_features(std::span<const int> labels, int classes, double jitter, Rng& rng) {
  std::uniform_real_distribution<double> u(-jitter, jitter);
  Matrix f(labels.size(), static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (int c = 0; c < classes; ++c) f(i, static_cast<std::size_t>(c)) = (labels[i] == c ? 1.0 : 0.0) + u(rng);
  }
  return f;
}

std::vector<int> cyclic_labels(std::size_t n, int classes) {
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i) % classes;
  return y;
}

Matrix permute_rows(const Matrix& m, std::span<const std::size_t> perm) { return gather_rows(m, perm); }

// Rotates the inputs of each class by its own fixed random orthogonal map.
data::Domain twist_per_class(const data::Domain& d, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  data::Domain out = d;
  const std::size_t dim = d.dim();
  for (int c : d.class_ids) {
    // Gram-Schmidt on a Gaussian matrix.
    Matrix q = testing::random_matrix(dim, dim, rng);
    for (std::size_t i = 0; i < dim; ++i) {
      auto qi = q.row(i);
      for (std::size_t j = 0; j < i; ++j) {
        const auto qj = q.row(j);
        const double dot = std::inner_product(qi.begin(), qi.end(), qj.begin(), 0.0);
        for (std::size_t k = 0; k < dim; ++k) qi[k] -= dot * qj[k];
      }
      const double norm = std::sqrt(std::inner_product(qi.begin(), qi.end(), qi.begin(), 0.0));
      for (double& v : qi) v /= norm;
    }
    for (std::size_t r : d.indices_of(c)) {
      const auto x = d.samples.row(r);
      auto y = out.samples.row(r);
      for (std::size_t i = 0; i < dim; ++i) y[i] = std::inner_product(x.begin(), x.end(), q.row(i).begin(), 0.0);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("extract_features") {
  Rng rng = make_rng(2);
  const Matrix x = testing::random_matrix(7, 3, rng);

  SUBCASE("single-layer model passes the inputs through") {
    const nn::Model m = nn::Model::initialized({3, 2}, nn::Activation::relu, 1);
    CHECK(extract_features(m, x) == x);
  }
  SUBCASE("identity backbone layer gives activated inputs") {
    nn::Model m({3, 3, 2}, nn::Activation::relu);
    for (std::size_t i = 0; i < 3; ++i) m.weights(0)[i * 3 + i] = 1.0;
    const Matrix f = extract_features(m, x);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      for (std::size_t j = 0; j < 3; ++j) CHECK(f(i, j) == std::max(0.0, x(i, j)));
    }
  }
  SUBCASE("matches a layer-by-layer replay") {
    const nn::Model m = nn::Model::initialized({3, 5, 4, 2}, nn::Activation::tanh, 9);
    Matrix h = x;
    for (std::size_t l = 0; l < 2; ++l) {
      Matrix z(h.rows(), m.out_dim(l));
      for (std::size_t i = 0; i < h.rows(); ++i) {
        for (std::size_t o = 0; o < m.out_dim(l); ++o) {
          double s = 0.0;
          for (std::size_t k = 0; k < m.in_dim(l); ++k) s += h(i, k) * m.weights(l)[o * m.in_dim(l) + k];
          z(i, o) = std::tanh(s + m.bias(l)[o]);
        }
      }
      h = z;
    }
    CHECK(extract_features(m, x) == h);
  }
  SUBCASE("row permutation is equivariant") {
    const nn::Model m = nn::Model::initialized({3, 5, 4, 2}, nn::Activation::relu, 9);
    const std::vector<std::size_t> perm{3, 0, 6, 1, 5, 2, 4};
    CHECK(extract_features(m, permute_rows(x, perm)) == permute_rows(extract_features(m, x), perm));
  }
  SUBCASE("gates on is a contract violation") {
    const nn::Model m = nn::Model::initialized({3, 5, 2}, nn::Activation::relu, 9);
    const nn::Model gated = nn::set_gates(nn::attach_adapters(m, {nn::AdapterKind::full_residual, 0}), true);
    CHECK_THROWS_AS(extract_features(gated, x), StateError);
    CHECK(extract_features(nn::set_gates(gated, false), x) == extract_features(m, x));
  }
}

TEST_CASE("average_ranks") {
  const std::vector<double> v{3.0, 1.0, 2.0, 2.0};
  CHECK(average_ranks(v) == std::vector<double>{4.0, 1.0, 2.5, 2.5});
  const std::vector<double> w{1.0, 1.0 + 1e-12, 5.0};
  CHECK(average_ranks(w) == std::vector<double>{1.0, 2.0, 3.0});
  CHECK(average_ranks(w, 1e-9) == std::vector<double>{1.5, 1.5, 3.0});
}

TEST_CASE("parc_score") {
  Rng rng = make_rng(17);

  SUBCASE("label-aligned features score near 100") {
    const auto y = cyclic_labels(40, 4);
    const Matrix f = one_hot_features(y, 4, 1e-10, rng);
    CHECK(parc_score(f, y) > 99.0);
  }
  SUBCASE("random labels give a null score") {
    double mean = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng r = make_rng(seed, 5);
      auto y = cyclic_labels(100, 5);
      const Matrix f = one_hot_features(y, 5, 0.3, r);
      std::shuffle(y.begin(), y.end(), r);
      const double s = parc_score(f, y);
      CHECK(std::abs(s) < 15.0);
      mean += s / 20.0;
    }
    CHECK(std::abs(mean) < 5.0);
  }
  SUBCASE("exact invariances") {
    auto y = cyclic_labels(30, 3);
    const Matrix f = testing::random_matrix(30, 6, rng);
    const double s = parc_score(f, y);
    CHECK(s >= -100.0);
    CHECK(s <= 100.0);

    std::vector<int> relabeled(y.size());
    std::transform(y.begin(), y.end(), relabeled.begin(), [](int c) { return 40 - 7 * c; });
    CHECK(parc_score(f, relabeled) == s);

    std::vector<std::size_t> perm(30);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<int> py(30);
    for (std::size_t i = 0; i < 30; ++i) py[i] = y[perm[i]];
    CHECK(parc_score(permute_rows(f, perm), py) == s);
  }
  SUBCASE("degenerate inputs") {
    const auto y = cyclic_labels(6, 2);
    Matrix f = testing::random_matrix(6, 3, rng);
    CHECK_THROWS_AS(parc_score(f, std::vector<int>(6, 1)), DegenerateLabelError);
    CHECK_THROWS_AS(parc_score(f, std::vector<int>{0, 1, 2, 3, 4, 5}), DegenerateLabelError);
    f(2, 0) = f(2, 1) = f(2, 2) = 0.5;
    CHECK_THROWS_AS(parc_score(f, y), DegenerateFeatureError);
    CHECK_THROWS_AS(parc_score(Matrix(1, 3, 1.0), std::vector<int>{0}), InsufficientDataError);
  }
}

TEST_CASE("select_backbone") {
  Rng rng = make_rng(8);
  nn::Batch support{testing::random_matrix(12, 4, rng), cyclic_labels(12, 3)};
  const nn::Model a = nn::Model::initialized({4, 6, 3}, nn::Activation::tanh, 1);
  const nn::Model b = nn::Model::initialized({4, 6, 3}, nn::Activation::tanh, 2);

  SUBCASE("singleton bank") {
    const std::vector<Candidate> c{{"only", a}};
    CHECK(select_backbone(c, support).chosen == "only");
  }
  SUBCASE("identical backbones tie to the smaller name") {
    const std::vector<Candidate> c{{"zeta", a}, {"eta", a}, {"other", b}};
    const auto r = select_backbone(c, support);
    const double best = std::max({*r.scores[0].score, *r.scores[2].score});
    if (*r.scores[0].score == best) {
      CHECK(r.chosen == "eta");
      CHECK(r.tie_broken);
    } else {
      CHECK(r.chosen == "other");
    }
    for (const auto& s : r.scores) CHECK(*s.score <= best);
  }
  SUBCASE("chosen entry attains the maximum") {
    std::vector<Candidate> c;
    for (int i = 0; i < 6; ++i) c.push_back({"m" + std::to_string(i), nn::Model::initialized({4, 6, 3}, nn::Activation::relu, 30 + i)});
    const auto r = select_backbone(c, support);
    double best = -1e9;
    std::string name;
    for (const auto& s : r.scores) {
      if (*s.score > best) {
        best = *s.score;
        name = s.name;
      }
    }
    CHECK(r.chosen == name);
  }
  SUBCASE("degenerate entries are skipped, all degenerate fails") {
    const nn::Model dead({4, 6, 3}, nn::Activation::relu);
    const std::vector<Candidate> mixed{{"dead", dead}, {"live", a}};
    const auto r = select_backbone(mixed, support);
    CHECK(r.chosen == "live");
    CHECK_FALSE(r.scores[0].score.has_value());
    CHECK_FALSE(r.scores[0].error.empty());
    const std::vector<Candidate> none{{"dead", dead}};
    CHECK_THROWS_AS(select_backbone(none, support), SelectionFailureError);
    CHECK_THROWS_AS(select_backbone(std::span<const Candidate>{}, support), SelectionFailureError);
  }
}

TEST_CASE("ncc_classify") {
  SUBCASE("two-point geometry") {
    const Matrix s(2, 2, std::vector<double>{0, 0, 2, 2});
    const std::vector<int> y{0, 1};
    CHECK(ncc_classify(s, y, Matrix(1, 2, std::vector<double>{0.1, 0.0})) == std::vector<int>{0});
    CHECK(ncc_classify(s, y, Matrix(1, 2, std::vector<double>{1.0, 1.0})) == std::vector<int>{0});
  }
  SUBCASE("scaling and support permutation invariance") {
    Rng rng = make_rng(5);
    const Matrix s = testing::random_matrix(20, 4, rng);
    const Matrix q = testing::random_matrix(50, 4, rng);
    const auto y = cyclic_labels(20, 4);
    const auto base = ncc_classify(s, y, q);
    for (double scale : {0.25, 3.0, 1e3}) {
      Matrix s2 = s, q2 = q;
      for (double& v : s2.flat()) v *= scale;
      for (double& v : q2.flat()) v *= scale;
      CHECK(ncc_classify(s2, y, q2) == base);
    }
    std::vector<std::size_t> perm(20);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<int> py(20);
    for (std::size_t i = 0; i < 20; ++i) py[i] = y[perm[i]];
    CHECK(ncc_classify(permute_rows(s, perm), py, q) == base);
  }
  SUBCASE("noise-free 5-way 1-shot is perfect") {
    data::SyntheticSpec spec;
    spec.num_domains = 1;
    spec.classes_per_domain = 5;
    spec.samples_per_class = 6;
    spec.dim = 8;
    spec.sigma = 1e-9;
    const auto d = data::gen_synthetic_domains(spec, 3).front();
    const data::Episode ep = data::sample_episode(d, {5, 5, 1, 1, 5, 0}, 0);
    const auto pred = ncc_classify(ep.support.inputs, ep.support.labels, ep.query.inputs);
    CHECK(accuracy(pred, ep.query.labels) == 1.0);
  }
  CHECK_THROWS_AS(ncc_classify(Matrix(0, 2), std::vector<int>{}, Matrix(1, 2)), InsufficientDataError);
}

TEST_CASE("prototype_loss gradient matches finite differences") {
  Rng rng = make_rng(12);
  nn::Model m = nn::Model::initialized({3, 5, 4, 2}, nn::Activation::tanh, 3);
  m = nn::set_gates(nn::attach_adapters(m, {nn::AdapterKind::low_rank, 2}, 4), true);
  testing::randomize(m, rng, 0.5);
  nn::Batch support{testing::random_matrix(9, 3, rng), cyclic_labels(9, 3)};
  std::vector<double> g(m.parameter_count(), 0.0), scratch(m.parameter_count());
  prototype_loss(m, support, g);
  const double h = 1e-6;
  double worst = 0.0;
  for (std::size_t i = 0; i < m.parameter_count(); ++i) {
    nn::Model hi = m, lo = m;
    hi.parameters()[i] += h;
    lo.parameters()[i] -= h;
    const double fd = (prototype_loss(hi, support, scratch) - prototype_loss(lo, support, scratch)) / (2 * h);
    worst = std::max(worst, std::abs(fd - g[i]) / (std::abs(fd) + std::abs(g[i]) + 1e-12));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("adapt_task") {
  data::SyntheticSpec spec;
  spec.num_domains = 2;
  spec.classes_per_domain = 5;
  spec.samples_per_class = 20;
  spec.dim = 8;
  spec.shift = 1.0;
  const auto domains = data::gen_synthetic_domains(spec, 21);
  optim::TrainConfig cfg;
  cfg.total_iterations = 300;
  cfg.restart_period = 300;
  cfg.objective = optim::ObjectiveKind::erm;
  const nn::Model init = nn::Model::initialized({8, 16, 16, 5}, nn::Activation::relu, 2);
  const nn::Model backbone = optim::train(init, domains[0], cfg).model;
  const data::EpisodeProtocol protocol{2, 5, 1, 5, 5, 99};

  SUBCASE("zero steps equals plain nearest-centroid") {
    const data::Episode ep = data::sample_episode(domains[1], protocol, 0);
    AdaptConfig ac;
    ac.steps = 0;
    const auto r = adapt_task(backbone, ep, ac);
    const auto plain = ncc_classify(extract_features(backbone, ep.support.inputs), ep.support.labels,
                                    extract_features(backbone, ep.query.inputs));
    CHECK(r.predictions == plain);
  }
  SUBCASE("backbone is never modified and the support loss drops") {
    for (auto kind : {nn::AdapterKind::full_residual, nn::AdapterKind::low_rank}) {
      const data::Episode ep = data::sample_episode(twist_per_class(domains[1], 5), {5, 5, 4, 5, 5, 99}, 3);
      AdaptConfig ac;
      ac.adapter = {kind, 2};
      const auto r = adapt_task(backbone, ep, ac);
      CHECK(r.model.backbone_parameters() == backbone.backbone_parameters());
      CHECK(r.model.gates_on());
      REQUIRE(r.loss.front() > 1e-3);
      CHECK(r.loss.back() < r.loss.front());
    }
  }
  SUBCASE("adaptation helps on per-class twisted tasks") {
    const data::Domain twisted = twist_per_class(domains[1], 5);
    double adapted = 0.0, plain = 0.0;
    for (std::uint64_t t = 0; t < 50; ++t) {
      const data::Episode ep = data::sample_episode(twisted, protocol, t);
      AdaptConfig ac;
      adapted += accuracy(adapt_task(backbone, ep, ac).predictions, ep.query.labels) / 50.0;
      const auto p = ncc_classify(extract_features(backbone, ep.support.inputs), ep.support.labels,
                                  extract_features(backbone, ep.query.inputs));
      plain += accuracy(p, ep.query.labels) / 50.0;
    }
    MESSAGE("twisted tasks: adapted " << adapted << " vs plain " << plain);
    CHECK(adapted >= plain);
  }
}

TEST_CASE("adapt_task stays finite on a wide trained backbone") {
  data::SyntheticSpec spec;
  spec.num_domains = 2;
  spec.classes_per_domain = 5;
  spec.samples_per_class = 40;
  spec.dim = 16;
  spec.shift = 1.0;
  const auto domains = data::gen_synthetic_domains(spec, 109);
  optim::TrainConfig cfg;
  cfg.total_iterations = 1000;
  cfg.restart_period = 1000;
  cfg.seed = 109;
  const nn::Model init = nn::Model::initialized({16, 64, 64, 5}, nn::Activation::relu, 109);
  const nn::Model backbone = optim::train(init, data::with_label_noise(domains[0], 0.2, 109), cfg).model;
  for (std::uint64_t t = 0; t < 100; ++t) {
    const data::Episode ep = data::sample_episode(domains[1], {}, t);
    CHECK_NOTHROW(adapt_task(backbone, ep, AdaptConfig{}));
  }
}
