#pragma once

// Transferability scoring, per-task backbone selection, nearest-centroid
// classification and adapter-based adaptation on a support set.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ffsc/data.hpp"
#include "ffsc/fusion.hpp"
#include "ffsc/matrix.hpp"
#include "ffsc/nn.hpp"
#include "ffsc/serialize.hpp"

namespace ffsc::select {

/// Penultimate activations of a model with gates off. StateError when the
/// gates are on.
Matrix extract_features(const nn::Model& model, const Matrix& inputs);

struct ParcOptions {
  /// Feature distances closer than this are ranked as ties.
  double tie_tolerance = 1e-8;
};

/// 100 x Spearman correlation between the pairwise feature distances
/// (1 - Pearson correlation of feature rows) and the pairwise label
/// distances (0 for same class, 1 otherwise), over all unordered pairs.
double parc_score(const Matrix& features, std::span<const int> labels, const ParcOptions& options = {});

/// Average ranks (1-based) of `values`; values whose sorted neighbours differ
/// by at most `tolerance` share a rank.
std::vector<double> average_ranks(std::span<const double> values, double tolerance = 0.0);

struct Candidate {
  std::string name;
  nn::Model model;
};

struct CandidateScore {
  std::string name;
  std::optional<double> score;  // empty when the features were degenerate
  std::string error;
};

struct SelectionReport {
  std::vector<CandidateScore> scores;  // in candidate order
  std::string chosen;
  bool tie_broken = false;  // several candidates shared the best score
};

void to_json(Json& j, const SelectionReport& r);

/// Scores every candidate on the support set and picks the highest score;
/// equal scores resolve to the lexicographically smallest name. Models whose
/// low-rank adapters are switched on are merged first. Throws
/// SelectionFailureError when no candidate yields a score.
SelectionReport select_backbone(std::span<const Candidate> candidates, const nn::Batch& support,
                                const ParcOptions& options = {});
SelectionReport select_backbone(const fusion::BackboneBank& bank, const nn::Batch& support,
                                const ParcOptions& options = {});

/// Loads every bank entry in name order.
std::vector<Candidate> load_candidates(const fusion::BackboneBank& bank);

/// Squared-Euclidean nearest class mean. Ties go to the smallest class ID.
std::vector<int> ncc_classify(const Matrix& support_features, std::span<const int> support_labels,
                              const Matrix& query_features);

struct AdaptConfig {
  std::size_t steps = 40;
  double lr = 0.1;
  double momentum = 0.9;
  /// The adapter gradient is rescaled to at most this norm; 0 disables.
  double max_grad_norm = 1.0;
  nn::AdapterSpec adapter{nn::AdapterKind::full_residual, 0};
  std::uint64_t seed = 0;
};

void to_json(Json& j, const AdaptConfig& c);
void from_json(const Json& j, AdaptConfig& c);

struct AdaptResult {
  nn::Model model;  // gates on
  std::vector<int> predictions;
  std::vector<double> loss;  // per step
};

/// Prototype cross-entropy on the support set: logits are negative squared
/// distances to class means that are recomputed from the current features.
/// Returns the loss and accumulates its gradient into `grad` (flat order).
double prototype_loss(const nn::Model& model, const nn::Batch& support, std::span<double> grad);

/// Trains only the adapter parameters (attaching zero-initialized ones when
/// the backbone has none) on the support set, then classifies the query by
/// nearest centroid in the adapted feature space. The backbone is untouched.
AdaptResult adapt_task(const nn::Model& backbone, const data::Episode& episode, const AdaptConfig& cfg);

/// Soft nearest-centroid cross-entropy of the query given the support, in
/// the model's current feature space (gates as they are).
double episode_query_loss(const nn::Model& model, const data::Episode& episode);

double accuracy(std::span<const int> predictions, std::span<const int> labels);

}  // namespace ffsc::select
