#include "ffsc/flatness.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "ffsc/kernels.hpp"
#include "ffsc/rng.hpp"
#include "ffsc/select.hpp"

namespace ffsc::flatness {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value in ") + what);
  }
}

}  // namespace

double default_hvp_step(std::span<const double> theta) { return 1e-4 * (1.0 + l2_norm(theta)); }

std::vector<double> hvp(const Objective& objective, std::span<const double> theta,
                        std::span<const double> v, double h, double weight_decay) {
  const std::size_t n = objective.dimension();
  if (theta.size() != n || v.size() != n) throw StructuralError("hvp: length mismatch");
  const double norm = l2_norm(v);
  if (!(norm > 0.0) || !std::isfinite(norm)) throw InvalidSpecError("hvp needs a finite nonzero direction");
  if (h <= 0.0) h = default_hvp_step(theta);
  std::vector<double> plus(theta.begin(), theta.end()), minus(plus);
  for (std::size_t i = 0; i < n; ++i) {
    const double step = h * (v[i] / norm);
    plus[i] += step;
    minus[i] -= step;
  }
  std::vector<double> gp(n), gm(n);
  objective.evaluate(plus, weight_decay, gp);
  objective.evaluate(minus, weight_decay, gm);
  const double scale = norm / (2.0 * h);
  for (std::size_t i = 0; i < n; ++i) gp[i] = (gp[i] - gm[i]) * scale;
  require_finite(gp, "Hessian-vector product");
  return gp;
}

std::vector<double> hvp(const nn::Model& model, const nn::Batch& batch, std::span<const double> v, double h) {
  const ModelObjective obj(model, batch);
  return hvp(obj, model.parameters(), v, h);
}

TraceEstimate hessian_trace(const Objective& objective, std::span<const double> theta,
                            const TraceOptions& options) {
  const std::size_t n = objective.dimension();
  TraceEstimate out;
  out.exact = options.exact;
  if (options.exact) {
    if (n > 512) throw InvalidSpecError("exact trace is limited to 512 parameters");
    std::vector<double> diag(n);
    kernels::for_each_index(n, [&](std::size_t i) {
      std::vector<double> e(n, 0.0);
      e[i] = 1.0;
      diag[i] = hvp(objective, theta, e, options.step)[i];
    });
    out.estimate = std::accumulate(diag.begin(), diag.end(), 0.0);
    out.probes = n;
    return out;
  }
  if (options.probes == 0) throw InvalidSpecError("hessian_trace needs at least one probe");
  std::vector<double> values(options.probes);
  kernels::for_each_index(options.probes, [&](std::size_t p) {
    Rng rng = make_rng(options.seed, p);
    std::bernoulli_distribution coin(0.5);
    std::vector<double> z(n);
    for (double& x : z) x = coin(rng) ? 1.0 : -1.0;
    values[p] = dot(z, hvp(objective, theta, z, options.step));
  });
  const double m = static_cast<double>(options.probes);
  out.estimate = std::accumulate(values.begin(), values.end(), 0.0) / m;
  if (options.probes > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.estimate) * (v - out.estimate);
    out.stderr_ = std::sqrt(ss / (m - 1.0)) / std::sqrt(m);
  }
  out.probes = options.probes;
  return out;
}

bool EigenResult::all_converged() const {
  return std::all_of(converged.begin(), converged.end(), [](bool b) { return b; });
}

EigenResult top_eigenvalues(const Objective& objective, std::span<const double> theta,
                            const EigenOptions& options) {
  const std::size_t n = objective.dimension();
  if (options.k == 0 || options.k > n) throw InvalidSpecError("top_eigenvalues needs 1 <= k <= parameter count");
  if (options.iterations == 0) throw InvalidSpecError("top_eigenvalues needs at least one iteration");
  EigenResult out;
  std::vector<std::vector<double>> vectors;
  for (std::size_t idx = 0; idx < options.k; ++idx) {
    Rng rng = make_rng(options.seed, idx);
    std::normal_distribution<double> normal;
    std::vector<double> v(n);
    for (double& x : v) x = normal(rng);
    const auto project_out = [&](std::vector<double>& w) {
      for (const auto& u : vectors) {
        const double c = dot(u, w);
        for (std::size_t i = 0; i < n; ++i) w[i] -= c * u[i];
      }
    };
    project_out(v);
    double norm = l2_norm(v);
    for (double& x : v) x /= norm;

    double lambda = 0.0, previous = 0.0;
    bool converged = false;
    std::size_t it = 0;
    while (it < options.iterations && !converged) {
      ++it;
      std::vector<double> w = hvp(objective, theta, v, options.step);
      for (std::size_t j = 0; j < vectors.size(); ++j) {
        const double c = out.values[j] * dot(vectors[j], v);
        for (std::size_t i = 0; i < n; ++i) w[i] -= c * vectors[j][i];
      }
      lambda = dot(v, w);
      project_out(w);
      norm = l2_norm(w);
      if (norm == 0.0) {
        converged = true;
        break;
      }
      for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / norm;
      if (it > 1 && std::abs(lambda - previous) < options.tolerance * std::max(1.0, std::abs(lambda))) {
        converged = true;
      }
      previous = lambda;
    }
    out.values.push_back(lambda);
    out.converged.push_back(converged);
    out.iterations.push_back(it);
    vectors.push_back(v);
  }
  std::vector<std::size_t> order(options.k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(out.values[a]) > std::abs(out.values[b]); });
  EigenResult sorted;
  for (std::size_t i : order) {
    sorted.values.push_back(out.values[i]);
    sorted.converged.push_back(out.converged[i]);
    sorted.iterations.push_back(out.iterations[i]);
  }
  return sorted;
}

std::string batch_fingerprint(const nn::Batch& batch) {
  const auto* bytes = reinterpret_cast<const char*>(batch.inputs.flat().data());
  std::string blob(bytes, batch.inputs.flat().size_bytes());
  blob.append(reinterpret_cast<const char*>(batch.labels.data()), batch.labels.size() * sizeof(int));
  return "rows=" + std::to_string(batch.inputs.rows()) + " fnv1a=" + hex64(fnv1a(blob));
}

FlatnessReport flatness_report(const Objective& objective, std::span<const double> theta,
                               const FlatnessOptions& options) {
  FlatnessReport r;
  r.trace = hessian_trace(objective, theta, options.trace);
  r.eigen = top_eigenvalues(objective, theta, options.eigen);
  r.hvp_step = options.trace.step > 0.0 ? options.trace.step : default_hvp_step(theta);
  r.parameter_count = objective.dimension();
  r.batch_id = options.batch_id;
  return r;
}

void to_json(Json& j, const FlatnessReport& r) {
  std::vector<bool> conv(r.eigen.converged.begin(), r.eigen.converged.end());
  j = Json{{"trace", r.trace.estimate},
           {"trace_stderr", r.trace.stderr_},
           {"trace_probes", r.trace.probes},
           {"trace_exact", r.trace.exact},
           {"eigenvalues", r.eigen.values},
           {"eigen_converged", conv},
           {"eigen_iterations", r.eigen.iterations},
           {"hvp_step", r.hvp_step},
           {"parameter_count", r.parameter_count},
           {"batch", r.batch_id}};
}

// ---------------------------------------------------------------------------

std::vector<std::vector<double>> random_directions(std::size_t dim, std::size_t count, std::uint64_t seed) {
  if (count == 0 || count > dim) throw InvalidSpecError("need 1 <= direction count <= dimension");
  Rng rng = make_rng(seed, 0xd1);
  std::normal_distribution<double> normal;
  std::vector<std::vector<double>> dirs;
  while (dirs.size() < count) {
    std::vector<double> v(dim);
    for (double& x : v) x = normal(rng);
    for (const auto& u : dirs) {
      const double c = dot(u, v);
      for (std::size_t i = 0; i < dim; ++i) v[i] -= c * u[i];
    }
    const double norm = l2_norm(v);
    if (norm < 1e-8) continue;
    for (double& x : v) x /= norm;
    dirs.push_back(std::move(v));
  }
  return dirs;
}

std::string LandscapeGrid::csv() const {
  std::string out = "c1,c2,erm_loss,sam_loss\n";
  char buf[128];
  for (std::size_t b = 0; b < c2.size(); ++b) {
    for (std::size_t a = 0; a < c1.size(); ++a) {
      const std::size_t cell = b * c1.size() + a;
      std::snprintf(buf, sizeof buf, "%.10g,%.10g,%.10g,", c1[a], c2[b], erm[cell]);
      out += buf;
      if (!sam.empty()) {
        std::snprintf(buf, sizeof buf, "%.10g", sam[cell]);
        out += buf;
      }
      out += '\n';
    }
  }
  return out;
}

LandscapeGrid landscape_slice(const Objective& objective, std::span<const double> theta,
                              std::span<const std::vector<double>> directions,
                              const LandscapeOptions& options) {
  const std::size_t n = objective.dimension();
  if (theta.size() != n) throw StructuralError("landscape_slice: parameter length mismatch");
  if (directions.empty() || directions.size() > 2) throw InvalidSpecError("landscape_slice takes one or two directions");
  for (std::size_t a = 0; a < directions.size(); ++a) {
    if (directions[a].size() != n) throw StructuralError("landscape direction length mismatch");
    for (std::size_t b = 0; b <= a; ++b) {
      const double expected = a == b ? 1.0 : 0.0;
      if (std::abs(dot(directions[a], directions[b]) - expected) > 1e-8) {
        throw InvalidSpecError("landscape directions must be orthonormal");
      }
    }
  }
  if (options.steps < 3 || options.steps % 2 == 0) throw InvalidSpecError("landscape steps must be odd and >= 3");
  if (!(options.half_range > 0.0)) throw InvalidSpecError("landscape half_range must be positive");
  if (options.sam_rho && !(*options.sam_rho >= 0.0)) throw InvalidSpecError("rho must be >= 0");

  LandscapeGrid g;
  const auto span_of = [&](std::size_t steps) {
    std::vector<double> c(steps);
    const double denom = static_cast<double>(steps - 1);
    for (std::size_t i = 0; i < steps; ++i) {
      c[i] = options.half_range * (2.0 * static_cast<double>(i) - denom) / denom;
    }
    return c;
  };
  g.c1 = span_of(options.steps);
  g.c2 = directions.size() == 2 ? span_of(options.steps) : std::vector<double>{0.0};
  const std::size_t cells = g.c1.size() * g.c2.size();
  g.erm.assign(cells, 0.0);
  if (options.sam_rho) g.sam.assign(cells, 0.0);

  kernels::for_each_index(cells, [&](std::size_t cell) {
    const double a = g.c1[cell % g.c1.size()];
    const double b = g.c2[cell / g.c1.size()];
    std::vector<double> point(theta.begin(), theta.end()), grad(n);
    for (std::size_t i = 0; i < n; ++i) {
      point[i] += a * directions[0][i];
      if (directions.size() == 2) point[i] += b * directions[1][i];
    }
    g.erm[cell] = objective.evaluate(point, 0.0, grad);
    if (options.sam_rho) {
      g.sam[cell] = std::max(g.erm[cell], optim::ball_max_loss(objective, point, *options.sam_rho, directions,
                                                              options.sam_resolution));
    }
  });
  return g;
}

// ---------------------------------------------------------------------------

std::string to_string(TvMethod m) { return m == TvMethod::monte_carlo ? "monte_carlo" : "analytic_gaussian"; }

TvMethod tv_method_from_string(const std::string& s) {
  if (s == "monte_carlo") return TvMethod::monte_carlo;
  if (s == "analytic_gaussian" || s == "analytic") return TvMethod::analytic_gaussian;
  throw InvalidSpecError("unknown divergence method '" + s + "'");
}

void to_json(Json& j, const TvResult& r) {
  j = Json{{"value", r.value}, {"method", to_string(r.method)}, {"detail", r.detail}};
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

Matrix sample_mixture(const data::GaussianMixture& mixture, std::size_t n, Rng& rng) {
  if (mixture.means.empty()) throw InvalidSpecError("mixture has no components");
  const std::size_t d = mixture.dim();
  std::uniform_int_distribution<std::size_t> pick(0, mixture.means.size() - 1);
  std::normal_distribution<double> normal(0.0, mixture.sigma);
  Matrix x(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& mu = mixture.means[pick(rng)];
    for (std::size_t j = 0; j < d; ++j) x(i, j) = mu[j] + normal(rng);
  }
  return x;
}

namespace {

double log_density(const data::GaussianMixture& m, std::span<const double> x) {
  const double s2 = m.sigma * m.sigma;
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> terms(m.means.size());
  for (std::size_t k = 0; k < m.means.size(); ++k) {
    double sq = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) sq += (x[j] - m.means[k][j]) * (x[j] - m.means[k][j]);
    terms[k] = -sq / (2.0 * s2);
    best = std::max(best, terms[k]);
  }
  double sum = 0.0;
  for (double t : terms) sum += std::exp(t - best);
  const double d = static_cast<double>(x.size());
  return best + std::log(sum / static_cast<double>(m.means.size())) - 0.5 * d * std::log(2.0 * M_PI * s2);
}

// E_p[(1 - q/p)_+] estimated with samples of p.
double one_sided_tv(const data::GaussianMixture& p, const data::GaussianMixture& q, std::size_t n, Rng& rng) {
  const Matrix x = sample_mixture(p, n, rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double lr = log_density(q, x.row(i)) - log_density(p, x.row(i));
    if (lr < 0.0) acc += 1.0 - std::exp(lr);
  }
  return acc / static_cast<double>(n);
}

// max_t |F_a(t) - F_b(t)| over all thresholds.
double ks_statistic(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double best = 0.0;
  while (i < a.size() || j < b.size()) {
    double t;
    if (j == b.size() || (i < a.size() && a[i] <= b[j])) {
      t = a[i];
    } else {
      t = b[j];
    }
    while (i < a.size() && a[i] <= t) ++i;
    while (j < b.size() && b[j] <= t) ++j;
    best = std::max(best, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  return best;
}

std::vector<double> project(const Matrix& x, const Eigen::VectorXd& w) {
  std::vector<double> out(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto r = x.row(i);
    out[i] = Eigen::Map<const Eigen::VectorXd>(r.data(), static_cast<Eigen::Index>(r.size())).dot(w);
  }
  return out;
}

Eigen::VectorXd fisher_direction(const Matrix& a, const Matrix& b) {
  const auto d = static_cast<Eigen::Index>(a.cols());
  const auto as_eigen = [&](const Matrix& m) {
    return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        m.flat().data(), static_cast<Eigen::Index>(m.rows()), d);
  };
  const auto ea = as_eigen(a), eb = as_eigen(b);
  const Eigen::RowVectorXd ma = ea.colwise().mean(), mb = eb.colwise().mean();
  const Eigen::MatrixXd ca = ea.rowwise() - ma, cb = eb.rowwise() - mb;
  Eigen::MatrixXd s = (ca.transpose() * ca + cb.transpose() * cb) / static_cast<double>(a.rows() + b.rows());
  const double ridge = 1e-6 * std::max(1e-12, s.trace() / static_cast<double>(d));
  s.diagonal().array() += ridge;
  return s.ldlt().solve((ma - mb).transpose());
}

}  // namespace

TvResult tv_from_samples(const Matrix& a, const Matrix& b, std::uint64_t seed) {
  if (a.cols() != b.cols()) throw StructuralError("divergence: sample dimensions differ");
  if (a.rows() < 4 || b.rows() < 4) throw InsufficientDataError("divergence needs at least 4 samples per side");
  Rng rng = make_rng(seed, 0x7f);
  const auto halves = [&](const Matrix& m) {
    std::vector<std::size_t> idx(m.rows());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t h = idx.size() / 2;
    return std::pair{gather_rows(m, std::span(idx).first(h)), gather_rows(m, std::span(idx).subspan(h))};
  };
  const auto [a_fit, a_eval] = halves(a);
  const auto [b_fit, b_eval] = halves(b);

  const Eigen::VectorXd w = fisher_direction(a_fit, b_fit);
  const double linear = ks_statistic(project(a_eval, w), project(b_eval, w));

  // Nonlinear discriminant: a small network separating the two halves.
  const std::size_t n_fit = std::min<std::size_t>(a_fit.rows(), b_fit.rows());
  Matrix x(2 * n_fit, a.cols());
  std::vector<int> y(2 * n_fit);
  for (std::size_t i = 0; i < n_fit; ++i) {
    std::copy_n(a_fit.row(i).begin(), a.cols(), x.row(2 * i).begin());
    std::copy_n(b_fit.row(i).begin(), a.cols(), x.row(2 * i + 1).begin());
    y[2 * i] = 0;
    y[2 * i + 1] = 1;
  }
  const data::Domain pairs = data::make_domain("discriminator", std::move(x), std::move(y));
  optim::TrainConfig cfg;
  cfg.objective = optim::ObjectiveKind::erm;
  cfg.total_iterations = 600;
  cfg.restart_period = 600;
  cfg.batch_size = 64;
  cfg.base_lr = 0.05;
  cfg.seed = seed;
  const nn::Model init = nn::Model::initialized({a.cols(), 32, 2}, nn::Activation::relu, seed ^ 0xd15cULL);
  const nn::Model disc = optim::train(init, pairs, cfg).model;
  const auto margin = [&](const Matrix& m) {
    const Matrix z = nn::logits(disc, m);
    std::vector<double> s(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) s[i] = z(i, 1) - z(i, 0);
    return s;
  };
  const double nonlinear = ks_statistic(margin(a_eval), margin(b_eval));

  TvResult r;
  r.method = TvMethod::monte_carlo;
  r.value = std::clamp(2.0 * std::max(linear, nonlinear), 0.0, 2.0);
  char buf[160];
  std::snprintf(buf, sizeof buf, "held-out threshold bound; fisher %.6g, network %.6g; %zu+%zu evaluation samples",
                2.0 * linear, 2.0 * nonlinear, a_eval.rows(), b_eval.rows());
  r.detail = buf;
  return r;
}

TvResult tv_divergence(const data::GaussianMixture& p, const data::GaussianMixture& q, const TvOptions& options) {
  if (p.means.empty() || q.means.empty()) throw InvalidSpecError("mixture has no components");
  if (p.dim() != q.dim()) throw StructuralError("divergence: mixture dimensions differ");
  if (!(p.sigma > 0.0) || !(q.sigma > 0.0)) throw InvalidSpecError("mixture sigma must be positive");
  if (options.samples == 0) throw InvalidSpecError("divergence needs a positive sample count");
  TvResult r;
  r.method = options.method;
  if (options.method == TvMethod::monte_carlo) {
    Rng rng = make_rng(options.seed, 0x3c);
    const Matrix a = sample_mixture(p, options.samples, rng);
    const Matrix b = sample_mixture(q, options.samples, rng);
    return tv_from_samples(a, b, options.seed);
  }
  auto pm = p.means, qm = q.means;
  std::sort(pm.begin(), pm.end());
  std::sort(qm.begin(), qm.end());
  if (p.sigma == q.sigma && pm == qm) {
    r.value = 0.0;
    r.detail = "identical densities";
    return r;
  }
  if (p.means.size() == 1 && q.means.size() == 1 && p.sigma == q.sigma) {
    double sq = 0.0;
    for (std::size_t j = 0; j < p.dim(); ++j) sq += (p.means[0][j] - q.means[0][j]) * (p.means[0][j] - q.means[0][j]);
    r.value = 2.0 * (2.0 * normal_cdf(std::sqrt(sq) / (2.0 * p.sigma)) - 1.0);
    r.detail = "closed form along the mean difference";
    return r;
  }
  Rng rng = make_rng(options.seed, 0x1d);
  const double tv = 0.5 * (one_sided_tv(p, q, options.samples, rng) + one_sided_tv(q, p, options.samples, rng));
  r.value = std::clamp(2.0 * tv, 0.0, 2.0);
  r.detail = "importance-sampled integral of the known densities, " + std::to_string(options.samples) +
             " samples per side";
  return r;
}

TvResult tv_divergence(const data::Domain& a, const data::Domain& b, const TvOptions& options) {
  if (a.generator && b.generator) return tv_divergence(*a.generator, *b.generator, options);
  if (options.method == TvMethod::analytic_gaussian) {
    throw InvalidSpecError("analytic divergence needs generator specs for '" + a.name + "' and '" + b.name + "'");
  }
  return tv_from_samples(a.samples, b.samples, options.seed);
}

// ---------------------------------------------------------------------------

void to_json(Json& j, const BoundReport& r) {
  Json targets = Json::array();
  for (std::size_t t = 0; t < r.targets.size(); ++t) {
    targets.push_back(Json{{"name", r.targets[t]},
                           {"divergence", r.divergence[t]},
                           {"source_model_query_loss", r.target_loss[t]},
                           {"target_trained_query_loss", r.target_best_loss[t]}});
  }
  j = Json{{"sam_loss", r.sam_loss},
           {"erm_min", r.erm_min},
           {"sam_erm_gap", r.sam_erm_gap},
           {"targets", std::move(targets)},
           {"expected_divergence", r.expected_divergence},
           {"target_gap", r.target_gap},
           {"estimators",
            Json{{"erm_min", "full-batch loss after an ERM run with the same budget"},
                 {"target_gap", "episodic query loss of the source model minus that of a pooled-target model"}}},
           {"not_computed", Json::array({"v", "v_k", "K", "delta", "diam(Theta)"})}};
}

BoundReport bound_report(const nn::Model& source_model, const data::Domain& source,
                         std::span<const data::Domain> targets, const BoundOptions& options) {
  if (targets.empty()) throw InvalidSpecError("bound_report needs at least one target domain");
  const optim::TrainConfig& cfg = options.config;
  optim::validate(cfg);
  BoundReport r;

  const nn::Batch all = optim::indexed_batch(source);
  r.sam_loss = optim::sam_gradient(source_model, all, cfg.rho, cfg.weight_decay).loss;

  optim::TrainConfig erm_cfg = cfg;
  erm_cfg.objective = optim::ObjectiveKind::erm;
  const nn::Model erm_init = nn::Model::initialized(source_model.layer_dims(), source_model.activation(), cfg.seed);
  const nn::Model erm_model = optim::train(erm_init, source, erm_cfg).model;
  r.erm_min = optim::erm_objective(erm_model, all, cfg.weight_decay).loss;
  r.sam_erm_gap = r.sam_loss - r.erm_min;

  Matrix pooled_x(0, source.dim());
  std::vector<double> px;
  std::vector<int> py;
  for (const auto& t : targets) {
    px.insert(px.end(), t.samples.flat().begin(), t.samples.flat().end());
    py.insert(py.end(), t.labels.begin(), t.labels.end());
  }
  const std::size_t rows = py.size();
  const data::Domain pooled = data::make_domain("pooled-targets", Matrix(rows, source.dim(), std::move(px)), std::move(py));
  std::vector<std::size_t> dims = source_model.layer_dims();
  dims.back() = pooled.num_classes();
  const nn::Model best = optim::train(nn::Model::initialized(dims, source_model.activation(), cfg.seed), pooled, cfg).model;

  double div_sum = 0.0, gap_sum = 0.0;
  for (const auto& t : targets) {
    r.targets.push_back(t.name);
    r.divergence.push_back(tv_divergence(source, t, options.divergence));
    div_sum += r.divergence.back().value;
    std::vector<double> own(options.tasks), ref(options.tasks);
    kernels::for_each_index(options.tasks, [&](std::size_t i) {
      const data::Episode ep = data::sample_episode(t, options.protocol, i);
      own[i] = select::episode_query_loss(source_model, ep);
      ref[i] = select::episode_query_loss(best, ep);
    });
    const double m = static_cast<double>(std::max<std::size_t>(options.tasks, 1));
    r.target_loss.push_back(std::accumulate(own.begin(), own.end(), 0.0) / m);
    r.target_best_loss.push_back(std::accumulate(ref.begin(), ref.end(), 0.0) / m);
    gap_sum += r.target_loss.back() - r.target_best_loss.back();
  }
  const double nt = static_cast<double>(targets.size());
  r.expected_divergence = div_sum / nt;
  r.target_gap = gap_sum / nt;
  return r;
}

}  // namespace ffsc::flatness
