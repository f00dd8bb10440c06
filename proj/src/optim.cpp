#include "ffsc/optim.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <sstream>

#include "ffsc/rng.hpp"

namespace ffsc::optim {

std::string to_string(ObjectiveKind k) { return k == ObjectiveKind::sam ? "sam" : "erm"; }

ObjectiveKind objective_from_string(const std::string& s) {
  if (s == "sam") return ObjectiveKind::sam;
  if (s == "erm") return ObjectiveKind::erm;
  throw InvalidSpecError("unknown objective '" + s + "' (expected erm or sam)");
}

void validate(const TrainConfig& c) {
  if (c.batch_size == 0) throw InvalidSpecError("batch_size must be positive");
  if (!(c.base_lr > 0.0)) throw InvalidSpecError("base_lr must be positive");
  if (!(c.min_lr >= 0.0) || c.min_lr > c.base_lr) throw InvalidSpecError("need 0 <= min_lr <= base_lr");
  if (c.restart_period == 0) throw InvalidSpecError("restart_period must be positive");
  if (c.restart_period > c.total_iterations && c.total_iterations > 0) {
    throw InvalidSpecError("restart_period must not exceed total_iterations");
  }
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw InvalidSpecError("momentum must be in [0, 1)");
  if (!(c.weight_decay >= 0.0)) throw InvalidSpecError("weight_decay must be >= 0");
  if (!(c.rho >= 0.0)) throw InvalidSpecError("rho must be >= 0");
}

nn::LossGrad erm_objective(const nn::Model& model, const nn::Batch& batch, double weight_decay) {
  return nn::forward_backward(model, batch, weight_decay);
}

LossGrad erm_objective(const Objective& objective, std::span<const double> theta,
                       double weight_decay) {
  LossGrad r{0.0, std::vector<double>(objective.dimension())};
  r.loss = objective.evaluate(theta, weight_decay, r.grad);
  return r;
}

SamResult sam_gradient(const Objective& objective, std::span<const double> theta, double rho,
                       double weight_decay) {
  if (!(rho >= 0.0)) throw InvalidSpecError("rho must be >= 0");
  const std::size_t n = objective.dimension();
  SamResult out;
  out.perturbation.assign(n, 0.0);
  auto fall_back = [&] {
    LossGrad erm = erm_objective(objective, theta, weight_decay);
    out.loss = erm.loss;
    out.grad = std::move(erm.grad);
    return out;
  };
  if (rho == 0.0) return fall_back();

  std::vector<double> g(n);
  objective.evaluate(theta, 0.0, g);
  const double gnorm = l2_norm(g);
  if (!std::isfinite(gnorm)) throw NumericError("non-finite gradient in sharpness-aware step");
  if (gnorm == 0.0) return fall_back();

  std::vector<double> perturbed(theta.begin(), theta.end());
  const double scale = rho / gnorm;
  for (std::size_t i = 0; i < n; ++i) {
    out.perturbation[i] = scale * g[i];
    perturbed[i] += out.perturbation[i];
  }
  out.grad.assign(n, 0.0);
  const double loss = objective.evaluate(perturbed, 0.0, out.grad);
  out.loss = add_weight_decay(objective, theta, weight_decay, loss, out.grad);
  for (double v : out.grad) {
    if (!std::isfinite(v)) throw NumericError("non-finite gradient at perturbed point");
  }
  return out;
}

SamResult sam_gradient(const nn::Model& model, const nn::Batch& batch, double rho,
                       double weight_decay) {
  const ModelObjective obj(model, batch);
  return sam_gradient(obj, model.parameters(), rho, weight_decay);
}

void sgd_step(std::span<double> params, std::span<const double> grad, double lr, double momentum,
              std::span<double> velocity) {
  if (params.size() != grad.size() || params.size() != velocity.size()) {
    throw StructuralError("sgd_step: parameter, gradient and velocity lengths differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i];
    params[i] -= lr * velocity[i];
  }
}

double cosine_lr(std::size_t iteration, const TrainConfig& cfg) {
  const double phase = static_cast<double>(iteration % cfg.restart_period) /
                       static_cast<double>(cfg.restart_period);
  return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * phase));
}

bool TrainHistory::same_trajectory(const TrainHistory& o) const {
  return loss == o.loss && lr == o.lr && grad_norm == o.grad_norm &&
         final_parameters == o.final_parameters;
}

nn::Batch indexed_batch(const data::Domain& domain) {
  nn::Batch b{domain.samples, {}};
  b.labels.reserve(domain.size());
  for (int y : domain.labels) b.labels.push_back(domain.class_index(y));
  return b;
}

TrainResult train(const nn::Model& model, const data::Domain& dataset, const TrainConfig& cfg,
                  const TrainOptions& options) {
  validate(cfg);
  if (dataset.size() == 0) throw InvalidSpecError("training set is empty");
  if (model.output_dim() != dataset.num_classes()) {
    std::ostringstream os;
    os << "head has " << model.output_dim() << " outputs but '" << dataset.name << "' has "
       << dataset.num_classes() << " classes";
    throw StructuralError(os.str());
  }
  if (!options.trainable.empty() && options.trainable.size() != model.parameter_count()) {
    throw StructuralError("trainable mask length mismatch");
  }
  const auto t0 = std::chrono::steady_clock::now();
  const nn::Batch all = indexed_batch(dataset);

  TrainResult result{model, {}};
  auto& h = result.history;
  h.loss.reserve(cfg.total_iterations);
  h.lr.reserve(cfg.total_iterations);
  h.grad_norm.reserve(cfg.total_iterations);

  std::vector<double> theta = nn::param_vector(model);
  std::vector<double> velocity(theta.size(), 0.0);
  Rng rng = make_rng(cfg.seed, 0x7a1);
  std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
  std::vector<std::size_t> rows(cfg.batch_size);
  nn::Model shape = model;

  for (std::size_t it = 0; it < cfg.total_iterations; ++it) {
    for (auto& r : rows) r = pick(rng);
    nn::Batch batch{gather_rows(all.inputs, rows), {}};
    batch.labels.reserve(rows.size());
    for (auto r : rows) batch.labels.push_back(all.labels[r]);

    const ModelObjective base(shape, std::move(batch));
    const MaskedObjective masked(base, options.trainable.empty()
                                           ? std::vector<bool>(theta.size(), true)
                                           : options.trainable);
    SamResult step;
    try {
      if (cfg.objective == ObjectiveKind::sam) {
        step = sam_gradient(masked, theta, cfg.rho, cfg.weight_decay);
      } else {
        LossGrad erm = erm_objective(masked, theta, cfg.weight_decay);
        step.loss = erm.loss;
        step.grad = std::move(erm.grad);
      }
    } catch (const NumericError& e) {
      throw NumericError("iteration " + std::to_string(it) + ": " + e.what());
    }
    const double lr = cosine_lr(it, cfg);
    sgd_step(theta, step.grad, lr, cfg.momentum, velocity);
    h.loss.push_back(step.loss);
    h.lr.push_back(lr);
    h.grad_norm.push_back(l2_norm(step.grad));
  }
  result.model = nn::unflatten(model, theta);
  h.final_parameters = std::move(theta);
  h.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

double ball_max_loss(const Objective& objective, std::span<const double> theta, double rho,
                     std::span<const std::vector<double>> directions, std::size_t resolution,
                     double weight_decay) {
  if (directions.empty() || directions.size() > 2) {
    throw InvalidSpecError("ball_max_loss supports one or two directions");
  }
  if (resolution < 2) throw InvalidSpecError("ball_max_loss resolution must be >= 2");
  const std::size_t n = objective.dimension();
  for (const auto& d : directions) {
    if (d.size() != n) throw StructuralError("direction length mismatch");
  }
  std::vector<double> grad(n), point(n);
  auto loss_at = [&](std::span<const double> p) { return objective.evaluate(p, 0.0, grad); };

  double best = loss_at(theta);
  const double gnorm = l2_norm(grad);
  if (rho > 0.0 && gnorm > 0.0) {
    for (std::size_t i = 0; i < n; ++i) point[i] = theta[i] + rho * grad[i] / gnorm;
    best = std::max(best, loss_at(point));
  }
  if (rho > 0.0) {
    const double step = 2.0 * rho / static_cast<double>(resolution - 1);
    const std::size_t outer = directions.size() == 2 ? resolution : 1;
    for (std::size_t a = 0; a < outer; ++a) {
      const double ca = directions.size() == 2 ? -rho + step * static_cast<double>(a) : 0.0;
      for (std::size_t b = 0; b < resolution; ++b) {
        const double cb = -rho + step * static_cast<double>(b);
        if (ca * ca + cb * cb > rho * rho * (1.0 + 1e-12)) continue;
        for (std::size_t i = 0; i < n; ++i) {
          point[i] = theta[i] + cb * directions[0][i];
          if (directions.size() == 2) point[i] += ca * directions[1][i];
        }
        best = std::max(best, loss_at(point));
      }
    }
  }
  std::vector<double> scratch(n, 0.0);
  return add_weight_decay(objective, theta, weight_decay, best, scratch);
}

}  // namespace ffsc::optim
