#include "ffsc/objective.hpp"

#include <algorithm>
#include <cmath>

namespace ffsc {

double l2_norm(std::span<const double> v) {
  double scale = 0.0;
  for (double x : v) scale = std::max(scale, std::abs(x));
  if (scale == 0.0 || !std::isfinite(scale)) return scale;
  double ss = 0.0;
  for (double x : v) {
    const double y = x / scale;
    ss += y * y;
  }
  return scale * std::sqrt(ss);
}

double add_weight_decay(const Objective& objective, std::span<const double> theta, double alpha,
                        double loss, std::span<double> grad) {
  if (alpha == 0.0) return loss;
  const auto mask = objective.regularized();
  double sq = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    sq += theta[i] * theta[i];
    grad[i] += alpha * theta[i];
  }
  return loss + 0.5 * alpha * sq;
}

ModelObjective::ModelObjective(nn::Model shape, nn::Batch batch)
    : shape_(std::move(shape)), batch_(std::move(batch)) {}

double ModelObjective::evaluate(std::span<const double> theta, double weight_decay,
                                std::span<double> grad) const {
  const nn::Model m = nn::unflatten(shape_, theta);
  nn::LossGrad r = nn::forward_backward(m, batch_, weight_decay);
  if (grad.size() != r.grad.size()) throw StructuralError("gradient buffer length mismatch");
  std::copy(r.grad.begin(), r.grad.end(), grad.begin());
  return r.loss;
}

MaskedObjective::MaskedObjective(const Objective& inner, std::vector<bool> trainable)
    : inner_(inner), trainable_(std::move(trainable)) {
  if (trainable_.size() != inner_.dimension()) throw StructuralError("trainable mask length mismatch");
}

double MaskedObjective::evaluate(std::span<const double> theta, double weight_decay,
                                 std::span<double> grad) const {
  const double loss = inner_.evaluate(theta, weight_decay, grad);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!trainable_[i]) grad[i] = 0.0;
  }
  return loss;
}

std::vector<bool> MaskedObjective::regularized() const {
  std::vector<bool> mask = inner_.regularized();
  if (mask.empty()) return trainable_;
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = mask[i] && trainable_[i];
  return mask;
}

QuadraticObjective::QuadraticObjective(Matrix hessian, std::vector<double> linear)
    : a_(std::move(hessian)), b_(std::move(linear)) {
  if (a_.rows() != a_.cols()) throw StructuralError("quadratic objective needs a square matrix");
  if (b_.empty()) b_.assign(a_.rows(), 0.0);
  if (b_.size() != a_.rows()) throw StructuralError("linear term length mismatch");
}

double QuadraticObjective::evaluate(std::span<const double> theta, double weight_decay,
                                    std::span<double> grad) const {
  const std::size_t n = a_.rows();
  if (theta.size() != n || grad.size() != n) throw StructuralError("quadratic objective: length mismatch");
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double ai = 0.0;
    const auto row = a_.row(i);
    for (std::size_t j = 0; j < n; ++j) ai += row[j] * theta[j];
    grad[i] = ai + b_[i];
    loss += theta[i] * (0.5 * ai + b_[i]);
  }
  return add_weight_decay(*this, theta, weight_decay, loss, grad);
}

ScalarObjective::ScalarObjective(std::function<double(double)> value,
                                 std::function<double(double)> derivative)
    : value_(std::move(value)), derivative_(std::move(derivative)) {}

double ScalarObjective::evaluate(std::span<const double> theta, double weight_decay,
                                 std::span<double> grad) const {
  if (theta.size() != 1 || grad.size() != 1) throw StructuralError("scalar objective: length mismatch");
  grad[0] = derivative_(theta[0]);
  return add_weight_decay(*this, theta, weight_decay, value_(theta[0]), grad);
}

}  // namespace ffsc
