#include "ffsc/select.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ffsc/kernels.hpp"

namespace ffsc::select {

namespace {

Matrix features_of(const nn::Model& model, const Matrix& inputs) {
  if (inputs.cols() != model.input_dim()) {
    throw StructuralError("inputs have " + std::to_string(inputs.cols()) + " columns, model expects " +
                          std::to_string(model.input_dim()));
  }
  nn::ForwardCache cache = nn::forward_pass(model, inputs, model.num_layers() - 1);
  return std::move(cache.inputs[cache.layers_run]);
}

std::vector<int> sorted_classes(std::span<const int> labels) {
  std::vector<int> c(labels.begin(), labels.end());
  std::sort(c.begin(), c.end());
  c.erase(std::unique(c.begin(), c.end()), c.end());
  return c;
}

std::size_t index_of(const std::vector<int>& classes, int label) {
  return static_cast<std::size_t>(std::lower_bound(classes.begin(), classes.end(), label) - classes.begin());
}

// Class means with rows summed in lexicographic order, so the result does not
// depend on the order of the support rows.
Matrix class_means(const Matrix& features, std::span<const int> labels, const std::vector<int>& classes) {
  const std::size_t d = features.cols();
  Matrix means(classes.size(), d);
  std::vector<std::vector<std::size_t>> members(classes.size());
  for (std::size_t i = 0; i < labels.size(); ++i) members[index_of(classes, labels[i])].push_back(i);
  for (std::size_t k = 0; k < classes.size(); ++k) {
    auto& rows = members[k];
    std::sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) {
      const auto ra = features.row(a), rb = features.row(b);
      return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
    });
    auto mean = means.row(k);
    for (std::size_t r : rows) {
      const auto f = features.row(r);
      for (std::size_t j = 0; j < d; ++j) mean[j] += f[j];
    }
    const double inv = 1.0 / static_cast<double>(rows.size());
    for (double& v : mean) v *= inv;
  }
  return means;
}

void check_features(const Matrix& features) {
  for (double v : features.flat()) {
    if (!std::isfinite(v)) throw NumericError("non-finite feature value");
  }
}

}  // namespace

Matrix extract_features(const nn::Model& model, const Matrix& inputs) {
  if (model.gates_on()) throw StateError("extract_features needs adapter gates off");
  return features_of(model, inputs);
}

std::vector<double> average_ranks(std::span<const double> values, double tolerance) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t start = 0;
  while (start < order.size()) {
    std::size_t end = start + 1;
    while (end < order.size() && values[order[end]] - values[order[end - 1]] <= tolerance) ++end;
    const double rank = 0.5 * static_cast<double>(start + end - 1) + 1.0;
    for (std::size_t i = start; i < end; ++i) ranks[order[i]] = rank;
    start = end;
  }
  return ranks;
}

double parc_score(const Matrix& features, std::span<const int> labels, const ParcOptions& options) {
  const std::size_t n = features.rows(), d = features.cols();
  if (labels.size() != n) throw StructuralError("parc_score: label count differs from feature rows");
  if (n < 2) throw InsufficientDataError("parc_score needs at least two samples");
  const std::vector<int> classes = sorted_classes(labels);
  if (classes.size() < 2) throw DegenerateLabelError("parc_score needs at least two classes");
  if (classes.size() == n) throw DegenerateLabelError("parc_score needs at least one repeated class");
  check_features(features);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = features.row(i);
    if (std::all_of(r.begin(), r.end(), [&](double v) { return v == r[0]; })) {
      throw DegenerateFeatureError("feature row " + std::to_string(i) + " is constant");
    }
  }

  std::vector<double> dist(n * n);
  kernels::pearson_distance(features.flat(), dist, n, d);
  const std::size_t pairs = n * (n - 1) / 2;
  std::vector<double> df, dy;
  df.reserve(pairs);
  dy.reserve(pairs);
  for (std::size_t i = 1; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      df.push_back(dist[i * n + j]);
      dy.push_back(labels[i] == labels[j] ? 0.0 : 1.0);
    }
  }
  const std::vector<double> rf = average_ranks(df, options.tie_tolerance);
  const std::vector<double> ry = average_ranks(dy);

  // Doubled average ranks are integers; exact integer sums make the score
  // independent of pair order.
  __int128 sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t p = 0; p < pairs; ++p) {
    const auto x = static_cast<__int128>(std::llround(2.0 * rf[p]));
    const auto y = static_cast<__int128>(std::llround(2.0 * ry[p]));
    sx += x;
    sy += y;
    sxx += x * x;
    syy += y * y;
    sxy += x * y;
  }
  const auto np = static_cast<__int128>(pairs);
  const __int128 cov = np * sxy - sx * sy;
  const __int128 vx = np * sxx - sx * sx;
  const __int128 vy = np * syy - sy * sy;
  if (vx == 0) throw DegenerateFeatureError("all pairwise feature distances are tied");
  if (vy == 0) throw DegenerateLabelError("all pairwise label distances are tied");
  const double r = static_cast<double>(cov) /
                   (std::sqrt(static_cast<double>(vx)) * std::sqrt(static_cast<double>(vy)));
  return 100.0 * std::clamp(r, -1.0, 1.0);
}

void to_json(Json& j, const SelectionReport& r) {
  Json scores = Json::array();
  for (const auto& s : r.scores) {
    Json e{{"name", s.name}, {"score", s.score ? Json(*s.score) : Json(nullptr)}};
    if (!s.error.empty()) e["error"] = s.error;
    scores.push_back(std::move(e));
  }
  j = Json{{"scores", std::move(scores)}, {"chosen", r.chosen}, {"tie_broken", r.tie_broken}};
}

SelectionReport select_backbone(std::span<const Candidate> candidates, const nn::Batch& support,
                                const ParcOptions& options) {
  if (candidates.empty()) throw SelectionFailureError("no candidate backbones");
  SelectionReport report;
  std::optional<double> best;
  std::size_t at_best = 0;
  for (const auto& c : candidates) {
    CandidateScore s{c.name, std::nullopt, {}};
    try {
      const nn::Model& m = c.model;
      const Matrix f = m.gates_on() ? extract_features(fusion::merge_lora(m), support.inputs)
                                    : extract_features(m, support.inputs);
      s.score = parc_score(f, support.labels, options);
    } catch (const DegenerateFeatureError& e) {
      s.error = e.what();
    } catch (const NumericError& e) {
      s.error = e.what();
    }
    if (s.score) {
      if (!best || *s.score > *best) {
        best = s.score;
        report.chosen = c.name;
        at_best = 1;
      } else if (*s.score == *best) {
        ++at_best;
        report.chosen = std::min(report.chosen, c.name);
      }
    }
    report.scores.push_back(std::move(s));
  }
  if (!best) throw SelectionFailureError("every candidate produced degenerate features");
  report.tie_broken = at_best > 1;
  return report;
}

std::vector<Candidate> load_candidates(const fusion::BackboneBank& bank) {
  std::vector<Candidate> out;
  for (const auto& e : bank.list()) out.push_back({e.name, bank.get(e.name).model});
  return out;
}

SelectionReport select_backbone(const fusion::BackboneBank& bank, const nn::Batch& support,
                                const ParcOptions& options) {
  const auto candidates = load_candidates(bank);
  return select_backbone(candidates, support, options);
}

std::vector<int> ncc_classify(const Matrix& support_features, std::span<const int> support_labels,
                              const Matrix& query_features) {
  if (support_features.rows() == 0) throw InsufficientDataError("nearest-centroid needs a non-empty support set");
  if (support_labels.size() != support_features.rows()) {
    throw StructuralError("support label count differs from feature rows");
  }
  if (query_features.cols() != support_features.cols()) {
    throw StructuralError("query and support features differ in width");
  }
  const std::vector<int> classes = sorted_classes(support_labels);
  const Matrix means = class_means(support_features, support_labels, classes);
  const std::size_t q = query_features.rows(), c = classes.size();
  std::vector<double> dist(q * c);
  kernels::pairwise_sq_dist(query_features.flat(), means.flat(), dist, q, c, means.cols());
  std::vector<int> out(q);
  for (std::size_t i = 0; i < q; ++i) {
    std::size_t arg = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (dist[i * c + k] < dist[i * c + arg]) arg = k;
    }
    out[i] = classes[arg];
  }
  return out;
}

void to_json(Json& j, const AdaptConfig& c) {
  j = Json{{"steps", c.steps},
           {"lr", c.lr},
           {"momentum", c.momentum},
           {"max_grad_norm", c.max_grad_norm},
           {"adapter", c.adapter},
           {"seed", c.seed}};
}

void from_json(const Json& j, AdaptConfig& c) {
  c.steps = j.value("steps", c.steps);
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
  if (j.contains("adapter")) c.adapter = j.at("adapter").get<nn::AdapterSpec>();
  c.seed = j.value("seed", c.seed);
}

double prototype_loss(const nn::Model& model, const nn::Batch& support, std::span<double> grad) {
  if (grad.size() != model.parameter_count()) throw StructuralError("gradient buffer length mismatch");
  const nn::ForwardCache cache = nn::forward_pass(model, support.inputs, model.num_layers() - 1);
  const Matrix& f = cache.output();
  const std::size_t n = f.rows(), d = f.cols();
  const std::vector<int> classes = sorted_classes(support.labels);
  const std::size_t c = classes.size();
  const Matrix means = class_means(f, support.labels, classes);
  std::vector<std::size_t> counts(c, 0), target(n);
  for (std::size_t i = 0; i < n; ++i) {
    target[i] = index_of(classes, support.labels[i]);
    ++counts[target[i]];
  }

  std::vector<double> dist(n * c);
  kernels::pairwise_sq_dist(f.flat(), means.flat(), dist, n, c, d);
  Matrix g(n, c);  // dL/dz with z = -dist
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    double zmax = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < c; ++k) zmax = std::max(zmax, -dist[i * c + k]);
    double sum = 0.0;
    for (std::size_t k = 0; k < c; ++k) sum += std::exp(-dist[i * c + k] - zmax);
    loss += (zmax + std::log(sum) + dist[i * c + target[i]]) * inv_n;
    for (std::size_t k = 0; k < c; ++k) {
      g(i, k) = (std::exp(-dist[i * c + k] - zmax) / sum - (k == target[i] ? 1.0 : 0.0)) * inv_n;
    }
  }
  if (!std::isfinite(loss)) throw NumericError("non-finite prototype loss");

  // z_ik = -|f_i - m_k|^2 with m_k the mean of class k.
  Matrix dmean(c, d);
  Matrix df(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < c; ++k) {
      const double gik = g(i, k);
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = f(i, j) - means(k, j);
        df(i, j) -= 2.0 * gik * diff;
        dmean(k, j) += 2.0 * gik * diff;
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double share = 1.0 / static_cast<double>(counts[target[i]]);
    for (std::size_t j = 0; j < d; ++j) df(i, j) += dmean(target[i], j) * share;
  }
  nn::backward_pass(model, cache, df, grad);
  return loss;
}

AdaptResult adapt_task(const nn::Model& backbone, const data::Episode& episode, const AdaptConfig& cfg) {
  if (episode.support.inputs.rows() == 0 || episode.support.labels.size() != episode.support.inputs.rows()) {
    throw InvalidSpecError("episode has an empty or inconsistent support set");
  }
  if (episode.query.labels.size() != episode.query.inputs.rows()) {
    throw InvalidSpecError("episode query labels do not match its inputs");
  }
  nn::Model model = backbone.has_adapters() ? backbone : nn::attach_adapters(backbone, cfg.adapter, cfg.seed);
  model = nn::set_gates(model, true);

  AdaptResult result;
  const std::size_t first = model.base_parameter_count();
  const std::size_t count = model.parameter_count() - first;
  std::vector<double> grad(model.parameter_count());
  std::vector<double> velocity(count, 0.0);
  result.loss.reserve(cfg.steps);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    result.loss.push_back(prototype_loss(model, episode.support, grad));
    if (cfg.max_grad_norm > 0.0) {
      const auto g = std::span<double>(grad).subspan(first, count);
      const double norm = std::sqrt(std::inner_product(g.begin(), g.end(), g.begin(), 0.0));
      if (norm > cfg.max_grad_norm) {
        for (double& x : g) x *= cfg.max_grad_norm / norm;
      }
    }
    optim::sgd_step(model.parameters().subspan(first, count), std::span<const double>(grad).subspan(first, count),
                    cfg.lr, cfg.momentum, velocity);
  }
  result.predictions = ncc_classify(features_of(model, episode.support.inputs), episode.support.labels,
                                    features_of(model, episode.query.inputs));
  result.model = std::move(model);
  return result;
}

double episode_query_loss(const nn::Model& model, const data::Episode& episode) {
  const Matrix fs = features_of(model, episode.support.inputs);
  const Matrix fq = features_of(model, episode.query.inputs);
  const std::vector<int> classes = sorted_classes(episode.support.labels);
  const Matrix means = class_means(fs, episode.support.labels, classes);
  const std::size_t q = fq.rows(), c = classes.size();
  if (q == 0) throw InsufficientDataError("episode has an empty query set");
  std::vector<double> dist(q * c);
  kernels::pairwise_sq_dist(fq.flat(), means.flat(), dist, q, c, fq.cols());
  double loss = 0.0;
  for (std::size_t i = 0; i < q; ++i) {
    const int y = episode.query.labels[i];
    const std::size_t t = index_of(classes, y);
    if (t == c || classes[t] != y) throw StructuralError("query class missing from the support set");
    double zmax = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < c; ++k) zmax = std::max(zmax, -dist[i * c + k]);
    double sum = 0.0;
    for (std::size_t k = 0; k < c; ++k) sum += std::exp(-dist[i * c + k] - zmax);
    loss += zmax + std::log(sum) + dist[i * c + t];
  }
  return loss / static_cast<double>(q);
}

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) throw StructuralError("prediction and label counts differ");
  if (labels.empty()) throw InsufficientDataError("accuracy of an empty set");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

}  // namespace ffsc::select
