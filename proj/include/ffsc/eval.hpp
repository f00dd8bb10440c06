#pragma once

// Episodic evaluation, confidence intervals, the paired t-test and report
// files.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ffsc/data.hpp"
#include "ffsc/select.hpp"
#include "ffsc/serialize.hpp"

namespace ffsc::eval {

struct Interval {
  double mean = 0.0;
  double half_width = 0.0;
};

/// Mean and 1.96 * sample std (ddof = 1) / sqrt(T). Needs T >= 2.
Interval ci95(std::span<const double> values);

struct TTestResult {
  double t = 0.0;  // +-inf when the differences are constant and nonzero
  std::size_t df = 0;
  double p = 1.0;  // two-sided
  bool significant = false;  // p < 0.05
  bool degenerate = false;   // the differences have zero variance
  double mean_difference = 0.0;
};

void to_json(Json& j, const TTestResult& r);

/// Paired two-sided t-test on d = a - b.
TTestResult paired_ttest(std::span<const double> a, std::span<const double> b);

/// Regularized incomplete beta I_x(a, b) by continued fraction.
double incomplete_beta(double a, double b, double x);
/// P(|T| >= |t|) for Student's t with `df` degrees of freedom.
double student_t_two_sided_p(double t, double df);

enum class Mode { seen, unseen };

std::string to_string(Mode m);
Mode mode_from_string(const std::string& s);

struct EvalOptions {
  std::size_t tasks = 100;
  data::EpisodeProtocol protocol;
  Mode mode = Mode::seen;
  select::AdaptConfig adapt{.steps = 0};
  select::ParcOptions parc;
};

struct DomainResult {
  std::string domain;
  std::size_t tasks = 0;
  double mean = 0.0;
  std::optional<double> ci95;  // absent for a single task
  std::vector<double> accuracies;
  std::vector<std::string> selected;  // per task, unseen mode only
  /// Tasks whose support had no repeated class, so the score was undefined
  /// and the first backbone by name was used.
  std::size_t selection_fallbacks = 0;
};

struct EvalReport {
  std::vector<DomainResult> domains;
  data::EpisodeProtocol protocol;
  std::size_t tasks = 0;
  Mode mode = Mode::seen;
  std::vector<std::string> backbones;
  select::AdaptConfig adapt;
};

void to_json(Json& j, const EvalReport& r);
void from_json(const Json& j, EvalReport& r);

/// For every domain and task index: sample the episode, pick a backbone
/// (the only candidate in seen mode, select_backbone on the support in unseen
/// mode; the first by name when every support class is a singleton), adapt
/// on the support when adapt.steps > 0 and classify the query
/// by nearest centroid. Tasks run in parallel; each depends only on
/// (protocol.seed, task index), so the report is identical for any schedule.
/// A failing task is reported as TaskFailureError naming the domain and task.
EvalReport evaluate(std::span<const select::Candidate> candidates, std::span<const data::Domain> domains,
                    const EvalOptions& options);

enum class ReportFormat { json, csv };

ReportFormat report_format_from_string(const std::string& s);

/// JSON is the full report; CSV has columns domain,n_tasks,mean,ci95 with six
/// significant digits.
std::string render_report(const EvalReport& report, ReportFormat format);
void emit_report(const EvalReport& report, ReportFormat format, const std::filesystem::path& path);
EvalReport load_report(const std::filesystem::path& path);

struct Comparison {
  std::vector<std::string> domains;  // domains present in both reports
  TTestResult test;                  // over the concatenated per-task accuracies
};

void to_json(Json& j, const Comparison& c);

/// Pairs per-task accuracies of matching domains (same task counts required).
Comparison compare_reports(const EvalReport& a, const EvalReport& b);

}  // namespace ffsc::eval
