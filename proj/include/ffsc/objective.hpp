#pragma once

// Differentiable losses over a flat parameter vector. The network loss is one
// implementation; closed-form losses (quadratics, scalar functions) plug into
// the same optimizers and curvature tools, which is how those are verified.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "ffsc/matrix.hpp"
#include "ffsc/nn.hpp"

namespace ffsc {

class Objective {
 public:
  virtual ~Objective() = default;

  virtual std::size_t dimension() const = 0;

  /// Loss at theta plus (alpha/2) * sum of squares over regularized
  /// coordinates. Writes the gradient of that total into `grad`.
  virtual double evaluate(std::span<const double> theta, double weight_decay,
                          std::span<double> grad) const = 0;

  /// Coordinates covered by the regularizer. Empty means all.
  virtual std::vector<bool> regularized() const { return {}; }
};

/// Cross-entropy of a model on a fixed batch. Theta replaces the model's
/// parameter vector; the architecture (adapters, gates) comes from `shape`.
/// Stateless, so concurrent evaluate() calls are safe.
class ModelObjective final : public Objective {
 public:
  ModelObjective(nn::Model shape, nn::Batch batch);

  std::size_t dimension() const override { return shape_.parameter_count(); }
  double evaluate(std::span<const double> theta, double weight_decay,
                  std::span<double> grad) const override;
  std::vector<bool> regularized() const override { return shape_.active_mask(); }

  const nn::Model& shape() const { return shape_; }
  const nn::Batch& batch() const { return batch_; }

 private:
  nn::Model shape_;
  nn::Batch batch_;
};

/// Restricts another objective to a subset of coordinates: gradients of
/// frozen coordinates are reported as zero.
class MaskedObjective final : public Objective {
 public:
  MaskedObjective(const Objective& inner, std::vector<bool> trainable);

  std::size_t dimension() const override { return inner_.dimension(); }
  double evaluate(std::span<const double> theta, double weight_decay,
                  std::span<double> grad) const override;
  /// Only trainable coordinates are regularized.
  std::vector<bool> regularized() const override;

 private:
  const Objective& inner_;
  std::vector<bool> trainable_;
};

/// L(theta) = 1/2 theta^T A theta + b^T theta with symmetric A.
class QuadraticObjective final : public Objective {
 public:
  explicit QuadraticObjective(Matrix hessian, std::vector<double> linear = {});

  std::size_t dimension() const override { return a_.rows(); }
  double evaluate(std::span<const double> theta, double weight_decay,
                  std::span<double> grad) const override;
  const Matrix& hessian() const { return a_; }

 private:
  Matrix a_;
  std::vector<double> b_;
};

/// One-dimensional loss given by value and derivative callbacks.
class ScalarObjective final : public Objective {
 public:
  ScalarObjective(std::function<double(double)> value, std::function<double(double)> derivative);

  std::size_t dimension() const override { return 1; }
  double evaluate(std::span<const double> theta, double weight_decay,
                  std::span<double> grad) const override;

 private:
  std::function<double(double)> value_;
  std::function<double(double)> derivative_;
};

/// Adds (alpha/2)|theta|^2 over the objective's regularized coordinates to
/// `loss` and alpha * theta to `grad`. Returns the new loss.
double add_weight_decay(const Objective& objective, std::span<const double> theta, double alpha,
                        double loss, std::span<double> grad);

double l2_norm(std::span<const double> v);

}  // namespace ffsc
