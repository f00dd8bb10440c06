#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ffsc/data.hpp"
#include "ffsc/nn.hpp"
#include "ffsc/objective.hpp"

namespace ffsc::optim {

enum class ObjectiveKind { erm, sam };

std::string to_string(ObjectiveKind k);
ObjectiveKind objective_from_string(const std::string& s);

struct TrainConfig {
  std::size_t batch_size = 32;
  double base_lr = 0.03;
  double min_lr = 0.0;
  std::size_t total_iterations = 1000;
  std::size_t restart_period = 1000;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double rho = 0.05;
  ObjectiveKind objective = ObjectiveKind::sam;
  std::uint64_t seed = 0;

  bool operator==(const TrainConfig&) const = default;
};

void validate(const TrainConfig& cfg);

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Mean cross-entropy + (alpha/2)|theta|^2; same as nn::forward_backward.
nn::LossGrad erm_objective(const nn::Model& model, const nn::Batch& batch, double weight_decay);
LossGrad erm_objective(const Objective& objective, std::span<const double> theta,
                       double weight_decay);

struct SamResult {
  double loss = 0.0;                 // L(theta + eps) + (alpha/2)|theta|^2
  std::vector<double> grad;          // grad L(theta + eps) + alpha * theta
  std::vector<double> perturbation;  // eps = rho * g / |g|, g = grad L(theta)
};

/// First-order sharpness-aware objective. The perturbation uses the gradient
/// of the unregularized loss and is not differentiated through. With rho = 0
/// or a zero gradient the result is exactly erm_objective.
SamResult sam_gradient(const Objective& objective, std::span<const double> theta, double rho,
                       double weight_decay);
SamResult sam_gradient(const nn::Model& model, const nn::Batch& batch, double rho,
                       double weight_decay);

/// v' = momentum * v + grad;  params' = params - lr * v'. In place.
void sgd_step(std::span<double> params, std::span<const double> grad, double lr, double momentum,
              std::span<double> velocity);

/// Cosine annealing with warm restarts every restart_period iterations.
double cosine_lr(std::size_t iteration, const TrainConfig& cfg);

struct TrainHistory {
  std::vector<double> loss;
  std::vector<double> lr;
  std::vector<double> grad_norm;
  std::vector<double> final_parameters;
  double wall_seconds = 0.0;

  /// Equality ignoring wall time.
  bool same_trajectory(const TrainHistory& other) const;
};

struct TrainOptions {
  /// Coordinates that receive updates; empty means all.
  std::vector<bool> trainable;
};

struct TrainResult {
  nn::Model model;
  TrainHistory history;
};

/// Mini-batch SGD on the domain's samples. Labels are mapped to head outputs
/// through the domain's sorted class_ids, so the head width must equal the
/// class count. Batches are drawn uniformly with replacement from an RNG
/// seeded by cfg.seed.
TrainResult train(const nn::Model& model, const data::Domain& dataset, const TrainConfig& cfg,
                  const TrainOptions& options = {});

/// Domain rows as a batch whose labels index the domain's class_ids.
nn::Batch indexed_batch(const data::Domain& domain);

/// Exact inner maximum of the sharpness-aware objective along given
/// orthonormal directions: max over |c| <= rho of L(theta + sum c_i d_i),
/// evaluated on a grid with `resolution` points per axis plus the
/// first-order point theta + eps*. Never below L(theta).
double ball_max_loss(const Objective& objective, std::span<const double> theta, double rho,
                     std::span<const std::vector<double>> directions, std::size_t resolution,
                     double weight_decay = 0.0);

}  // namespace ffsc::optim
