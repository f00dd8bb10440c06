#include "ffsc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>

#include "ffsc/error.hpp"
#include "ffsc/fusion.hpp"
#include "ffsc/kernels.hpp"

namespace ffsc::eval {

namespace fs = std::filesystem;

namespace {

bool all_equal(std::span<const double> v) {
  return std::adjacent_find(v.begin(), v.end(), std::not_equal_to<>()) == v.end();
}

/// Mean and sample standard deviation; exact for constant input.
std::pair<double, double> mean_sd(std::span<const double> values) {
  const std::size_t n = values.size();
  if (all_equal(values)) return {values.front(), 0.0};
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(n - 1))};
}

}  // namespace

Interval ci95(std::span<const double> values) {
  const std::size_t n = values.size();
  if (n < 2) throw InsufficientDataError("ci95 needs at least two values");
  const auto [mean, sd] = mean_sd(values);
  return {mean, 1.96 * sd / std::sqrt(static_cast<double>(n))};
}

namespace {

double beta_continued_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-15;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < eps) return h;
  }
  throw NumericError("incomplete beta continued fraction did not converge");
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw InvalidSpecError("incomplete beta needs a, b > 0");
  if (!(x >= 0.0 && x <= 1.0)) throw InvalidSpecError("incomplete beta needs x in [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double front =
      std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x));
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_two_sided_p(double t, double df) {
  if (!(df > 0.0)) throw InvalidSpecError("t distribution needs df > 0");
  if (std::isnan(t)) throw NumericError("t statistic is NaN");
  if (std::isinf(t)) return 0.0;
  return incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
}

TTestResult paired_ttest(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw StructuralError("paired t-test needs samples of equal length");
  const std::size_t n = a.size();
  if (n < 2) throw InsufficientDataError("paired t-test needs at least two pairs");
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  const auto [mean, sd] = mean_sd(d);

  TTestResult r;
  r.df = n - 1;
  r.mean_difference = mean;
  if (sd == 0.0) {
    r.degenerate = true;
    if (mean == 0.0) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = std::copysign(std::numeric_limits<double>::infinity(), mean);
      r.p = 0.0;
    }
  } else {
    r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
    r.p = student_t_two_sided_p(r.t, static_cast<double>(r.df));
  }
  r.significant = r.p < 0.05;
  return r;
}

void to_json(Json& j, const TTestResult& r) {
  j = Json{{"t", std::isfinite(r.t) ? Json(r.t) : Json(r.t > 0 ? "inf" : "-inf")},
           {"df", r.df},
           {"p", r.p},
           {"significant", r.significant},
           {"degenerate", r.degenerate},
           {"mean_difference", r.mean_difference}};
}

std::string to_string(Mode m) { return m == Mode::seen ? "seen" : "unseen"; }

Mode mode_from_string(const std::string& s) {
  if (s == "seen") return Mode::seen;
  if (s == "unseen") return Mode::unseen;
  throw InvalidSpecError("unknown evaluation mode '" + s + "' (expected seen or unseen)");
}

void to_json(Json& j, const EvalReport& r) {
  Json domains = Json::array();
  for (const auto& d : r.domains) {
    Json e{{"domain", d.domain},
           {"n_tasks", d.tasks},
           {"mean", d.mean},
           {"ci95", d.ci95 ? Json(*d.ci95) : Json(nullptr)},
           {"accuracies", d.accuracies}};
    if (!d.selected.empty()) {
      e["selected"] = d.selected;
      e["selection_fallbacks"] = d.selection_fallbacks;
    }
    domains.push_back(std::move(e));
  }
  j = Json{{"domains", std::move(domains)},
           {"protocol", r.protocol},
           {"seed", r.protocol.seed},
           {"tasks", r.tasks},
           {"mode", to_string(r.mode)},
           {"backbones", r.backbones},
           {"adapt", r.adapt}};
}

void from_json(const Json& j, EvalReport& r) {
  r = EvalReport{};
  j.at("protocol").get_to(r.protocol);
  j.at("tasks").get_to(r.tasks);
  r.mode = mode_from_string(j.at("mode").get<std::string>());
  j.at("backbones").get_to(r.backbones);
  j.at("adapt").get_to(r.adapt);
  for (const auto& e : j.at("domains")) {
    DomainResult d;
    e.at("domain").get_to(d.domain);
    e.at("n_tasks").get_to(d.tasks);
    e.at("mean").get_to(d.mean);
    if (!e.at("ci95").is_null()) d.ci95 = e.at("ci95").get<double>();
    e.at("accuracies").get_to(d.accuracies);
    if (e.contains("selected")) e.at("selected").get_to(d.selected);
    if (e.contains("selection_fallbacks")) e.at("selection_fallbacks").get_to(d.selection_fallbacks);
    if (d.accuracies.size() != d.tasks) {
      throw StructuralError("report domain '" + d.domain + "' lists " + std::to_string(d.accuracies.size()) +
                            " accuracies for " + std::to_string(d.tasks) + " tasks");
    }
    r.domains.push_back(std::move(d));
  }
}

namespace {

nn::Model evaluation_model(const nn::Model& model) {
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    if (model.adapter(l) && model.adapter(l)->kind == nn::AdapterKind::low_rank) return fusion::merge_lora(model);
  }
  return model;
}

std::uint64_t task_seed(std::uint64_t seed, std::uint64_t task) {
  return seed ^ (0x9e3779b97f4a7c15ull * (task + 1));
}

}  // namespace

EvalReport evaluate(std::span<const select::Candidate> candidates, std::span<const data::Domain> domains,
                    const EvalOptions& options) {
  if (options.tasks < 1) throw InvalidSpecError("evaluation needs at least one task");
  if (candidates.empty()) throw InvalidSpecError("evaluation needs at least one backbone");
  if (domains.empty()) throw InvalidSpecError("evaluation needs at least one domain");
  if (options.mode == Mode::seen && candidates.size() != 1) {
    throw InvalidSpecError("seen-domain evaluation takes exactly one backbone, got " +
                           std::to_string(candidates.size()));
  }
  data::validate(options.protocol);

  std::vector<select::Candidate> models;
  models.reserve(candidates.size());
  for (const auto& c : candidates) models.push_back({c.name, evaluation_model(c.model)});
  std::sort(models.begin(), models.end(), [](const auto& a, const auto& b) { return a.name < b.name; });

  const std::size_t tasks = options.tasks, total = domains.size() * tasks;
  std::vector<double> acc(total);
  std::vector<std::string> chosen(total), failure(total);
  std::vector<char> fallback(total, 0);
  kernels::for_each_index(total, [&](std::size_t i) {
    const data::Domain& domain = domains[i / tasks];
    const std::size_t t = i % tasks;
    try {
      const data::Episode episode = data::sample_episode(domain, options.protocol, t);
      const nn::Model* model = &models.front().model;
      if (options.mode == Mode::unseen) {
        try {
          chosen[i] = select::select_backbone(models, episode.support, options.parc).chosen;
        } catch (const DegenerateLabelError&) {
          chosen[i] = models.front().name;
          fallback[i] = 1;
        }
        model = &std::find_if(models.begin(), models.end(), [&](const auto& c) { return c.name == chosen[i]; })->model;
      }
      select::AdaptConfig cfg = options.adapt;
      cfg.seed = task_seed(cfg.seed, t);
      const auto result = select::adapt_task(*model, episode, cfg);
      acc[i] = select::accuracy(result.predictions, episode.query.labels);
    } catch (const std::exception& e) {
      failure[i] = e.what();
    }
  });
  for (std::size_t i = 0; i < total; ++i) {
    if (!failure[i].empty()) {
      throw TaskFailureError("domain '" + domains[i / tasks].name + "' task " + std::to_string(i % tasks) + ": " +
                             failure[i]);
    }
  }

  EvalReport report;
  report.protocol = options.protocol;
  report.tasks = tasks;
  report.mode = options.mode;
  report.adapt = options.adapt;
  for (const auto& c : models) report.backbones.push_back(c.name);
  for (std::size_t k = 0; k < domains.size(); ++k) {
    DomainResult d;
    d.domain = domains[k].name;
    d.tasks = tasks;
    d.accuracies.assign(acc.begin() + static_cast<std::ptrdiff_t>(k * tasks),
                        acc.begin() + static_cast<std::ptrdiff_t>((k + 1) * tasks));
    d.mean = std::accumulate(d.accuracies.begin(), d.accuracies.end(), 0.0) / static_cast<double>(tasks);
    if (tasks >= 2) d.ci95 = ci95(d.accuracies).half_width;
    if (options.mode == Mode::unseen) {
      d.selected.assign(chosen.begin() + static_cast<std::ptrdiff_t>(k * tasks),
                        chosen.begin() + static_cast<std::ptrdiff_t>((k + 1) * tasks));
      d.selection_fallbacks = static_cast<std::size_t>(
          std::count(fallback.begin() + static_cast<std::ptrdiff_t>(k * tasks),
                     fallback.begin() + static_cast<std::ptrdiff_t>((k + 1) * tasks), 1));
    }
    report.domains.push_back(std::move(d));
  }
  return report;
}

ReportFormat report_format_from_string(const std::string& s) {
  if (s == "json") return ReportFormat::json;
  if (s == "csv") return ReportFormat::csv;
  throw InvalidSpecError("unknown report format '" + s + "' (expected json or csv)");
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

std::string six_digits(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

std::string render_report(const EvalReport& report, ReportFormat format) {
  if (format == ReportFormat::json) return Json(report).dump(2) + "\n";
  std::string out = "domain,n_tasks,mean,ci95\n";
  for (const auto& d : report.domains) {
    out += csv_field(d.domain) + "," + std::to_string(d.tasks) + "," + six_digits(d.mean) + "," +
           (d.ci95 ? six_digits(*d.ci95) : std::string()) + "\n";
  }
  return out;
}

void emit_report(const EvalReport& report, ReportFormat format, const fs::path& path) {
  write_text_file(path, render_report(report, format));
}

EvalReport load_report(const fs::path& path) {
  const Json j = read_json_file(path.string());
  try {
    return j.get<EvalReport>();
  } catch (const Json::exception& e) {
    throw IoError("'" + path.string() + "' is not an evaluation report: " + e.what());
  }
}

void to_json(Json& j, const Comparison& c) { j = Json{{"domains", c.domains}, {"ttest", c.test}}; }

Comparison compare_reports(const EvalReport& a, const EvalReport& b) {
  if (Json(a.protocol) != Json(b.protocol)) {
    throw InvalidSpecError("reports were produced with different episode protocols");
  }
  std::map<std::string, const DomainResult*> other;
  for (const auto& d : b.domains) other[d.domain] = &d;
  Comparison c;
  std::vector<double> xa, xb;
  for (const auto& d : a.domains) {
    const auto it = other.find(d.domain);
    if (it == other.end()) continue;
    if (it->second->accuracies.size() != d.accuracies.size()) {
      throw StructuralError("domain '" + d.domain + "' has different task counts in the two reports");
    }
    c.domains.push_back(d.domain);
    xa.insert(xa.end(), d.accuracies.begin(), d.accuracies.end());
    xb.insert(xb.end(), it->second->accuracies.begin(), it->second->accuracies.end());
  }
  if (c.domains.empty()) throw StructuralError("the reports share no domain");
  c.test = paired_ttest(xa, xb);
  return c;
}

}  // namespace ffsc::eval
