#pragma once

// Curvature of the training loss (Hessian trace and leading eigenvalues via
// finite-difference Hessian-vector products), loss-landscape slices, total
// variation between domains, and the terms of the transfer bound.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ffsc/data.hpp"
#include "ffsc/nn.hpp"
#include "ffsc/objective.hpp"
#include "ffsc/optim.hpp"
#include "ffsc/rng.hpp"
#include "ffsc/serialize.hpp"

namespace ffsc::flatness {

/// 1e-4 * (1 + |theta|).
double default_hvp_step(std::span<const double> theta);

/// (grad(theta + h v/|v|) - grad(theta - h v/|v|)) |v| / (2h), unregularized
/// unless `weight_decay` is given. h <= 0 selects default_hvp_step.
std::vector<double> hvp(const Objective& objective, std::span<const double> theta,
                        std::span<const double> v, double h = 0.0, double weight_decay = 0.0);
std::vector<double> hvp(const nn::Model& model, const nn::Batch& batch, std::span<const double> v,
                        double h = 0.0);

struct TraceOptions {
  std::size_t probes = 100;
  /// Enumerate the standard basis instead of random probes (at most 512
  /// parameters).
  bool exact = false;
  std::uint64_t seed = 0;
  double step = 0.0;
};

struct TraceEstimate {
  double estimate = 0.0;
  double stderr_ = 0.0;  // zero in exact mode
  std::size_t probes = 0;
  bool exact = false;
};

/// Hutchinson estimator with Rademacher probes; probe i draws from stream i
/// of the seed, so results do not depend on the thread schedule.
TraceEstimate hessian_trace(const Objective& objective, std::span<const double> theta,
                            const TraceOptions& options = {});

struct EigenOptions {
  std::size_t k = 2;
  std::size_t iterations = 1000;
  double tolerance = 1e-10;
  std::uint64_t seed = 0;
  double step = 0.0;
};

struct EigenResult {
  std::vector<double> values;  // by decreasing magnitude, signs kept
  std::vector<bool> converged;
  std::vector<std::size_t> iterations;

  bool all_converged() const;
};

/// Power iteration on the Hessian with deflation of the eigenpairs already
/// found. Convergence is when successive Rayleigh quotients differ by less
/// than tolerance * max(1, |lambda|); unconverged values are flagged.
EigenResult top_eigenvalues(const Objective& objective, std::span<const double> theta,
                            const EigenOptions& options = {});

struct FlatnessOptions {
  TraceOptions trace;
  EigenOptions eigen;
  std::string batch_id;
};

struct FlatnessReport {
  TraceEstimate trace;
  EigenResult eigen;
  double hvp_step = 0.0;
  std::size_t parameter_count = 0;
  std::string batch_id;
};

FlatnessReport flatness_report(const Objective& objective, std::span<const double> theta,
                               const FlatnessOptions& options);
/// Describes a batch by its size and a hash of its contents.
std::string batch_fingerprint(const nn::Batch& batch);

void to_json(Json& j, const FlatnessReport& r);

// ---------------------------------------------------------------------------
// Landscape

/// `count` orthonormal random directions of length `dim`.
std::vector<std::vector<double>> random_directions(std::size_t dim, std::size_t count, std::uint64_t seed);

struct LandscapeOptions {
  double half_range = 1.0;
  std::size_t steps = 21;  // odd, >= 3
  /// When set, also evaluate the sharpness-aware loss with this radius.
  std::optional<double> sam_rho;
  /// Grid points per axis used for the inner maximum.
  std::size_t sam_resolution = 9;
};

struct LandscapeGrid {
  std::vector<double> c1, c2;   // c2 = {0} for one direction
  std::vector<double> erm;      // row-major [c2][c1]
  std::vector<double> sam;      // empty unless requested

  /// Columns c1,c2,erm_loss,sam_loss; sam_loss empty when absent.
  std::string csv() const;
};

/// Loss on theta + c1 d1 (+ c2 d2) over a symmetric grid whose center is
/// theta itself. The sharpness-aware value at each point is the largest loss
/// found in the rho-ball around it (center, first-order point, and a grid in
/// the slice plane), so it never falls below the plain loss.
LandscapeGrid landscape_slice(const Objective& objective, std::span<const double> theta,
                              std::span<const std::vector<double>> directions,
                              const LandscapeOptions& options);

// ---------------------------------------------------------------------------
// Divergence

enum class TvMethod { analytic_gaussian, monte_carlo };

std::string to_string(TvMethod m);
TvMethod tv_method_from_string(const std::string& s);

struct TvOptions {
  TvMethod method = TvMethod::analytic_gaussian;
  std::size_t samples = 20000;  // per distribution
  std::uint64_t seed = 0;
};

struct TvResult {
  double value = 0.0;  // in [0, 2]
  TvMethod method = TvMethod::analytic_gaussian;
  std::string detail;
};

void to_json(Json& j, const TvResult& r);

/// Div = 2 sup_A |P(A) - Q(A)|. analytic_gaussian uses the known densities:
/// identical mixtures give exactly 0, single equal-variance components the
/// closed form 2(2 Phi(|mu_p - mu_q| / (2 sigma)) - 1), and anything else a
/// seeded importance-sampling integral. monte_carlo only sees samples and
/// reports a held-out lower estimate from the best threshold on a learned
/// discriminant.
TvResult tv_divergence(const data::GaussianMixture& p, const data::GaussianMixture& q, const TvOptions& options);
/// Uses the generators when present; monte_carlo on domains without one uses
/// their samples. analytic_gaussian without generators is an InvalidSpecError.
TvResult tv_divergence(const data::Domain& a, const data::Domain& b, const TvOptions& options);
/// Monte Carlo estimate from two sample sets.
TvResult tv_from_samples(const Matrix& a, const Matrix& b, std::uint64_t seed);

Matrix sample_mixture(const data::GaussianMixture& mixture, std::size_t n, Rng& rng);

double normal_cdf(double x);

// ---------------------------------------------------------------------------
// Bound report

struct BoundOptions {
  optim::TrainConfig config;  // configuration of the sharpness-aware run
  data::EpisodeProtocol protocol;
  std::size_t tasks = 20;
  TvOptions divergence;
};

struct BoundReport {
  double sam_loss = 0.0;
  double erm_min = 0.0;
  double sam_erm_gap = 0.0;
  std::vector<std::string> targets;
  std::vector<TvResult> divergence;
  double expected_divergence = 0.0;
  std::vector<double> target_loss;       // episodic query loss of the source model
  std::vector<double> target_best_loss;  // same for a model trained on the pooled targets
  double target_gap = 0.0;
};

void to_json(Json& j, const BoundReport& r);

/// sam_loss: first-order sharpness-aware objective of `source_model` on all
/// of `source`. erm_min: final full-batch loss of an ERM run with the same
/// budget and architecture. target_gap: mean episodic query loss (soft
/// nearest-centroid cross-entropy) of the source model minus that of a model
/// trained on the pooled target domains with the same budget.
BoundReport bound_report(const nn::Model& source_model, const data::Domain& source,
                         std::span<const data::Domain> targets, const BoundOptions& options);

}  // namespace ffsc::flatness
