#pragma once

// Evaluation statistics: confusion metrics, ROC AUC, detection delay,
// Welch's t-test, Cohen's d, bootstrap intervals, Kruskal-Wallis, and the
// report / plot-data writers.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace tg::stats {

struct MetricReport {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double auc = 0.0;
    bool has_auc = false;
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
    double mean_delay = 0.0;
    std::int64_t detected = 0;  // streams with a delay
    std::int64_t missed = 0;    // streams that never fired after onset
    // Set when a zero denominator forced the value to 0.
    bool precision_undefined = false;
    bool recall_undefined = false;

    std::int64_t total() const { return tp + fp + tn + fn; }
};

MetricReport classification_metrics(std::span<const int> labels, std::span<const int> predictions);

/// Mann-Whitney AUC with midranks for ties. Throws when a class is missing.
double roc_auc(std::span<const int> labels, std::span<const double> scores);

/// First fired step at or after onset, minus onset; nullopt when none.
std::optional<double> detection_delay(std::int64_t onset, std::span<const std::int64_t> fired_steps);

struct DelaySummary {
    double mean = 0.0;  // over detected streams only
    std::int64_t detected = 0;
    std::int64_t missed = 0;
};

DelaySummary summarize_delays(std::span<const std::optional<double>> delays);

struct TestResult {
    double statistic = 0.0;
    double dof = 0.0;
    double p_value = 1.0;
    double effect_size = 0.0;
};

/// Two-tailed Welch t-test; effect_size holds the equal-n Cohen's d (b - a).
TestResult welch_t(std::span<const double> a, std::span<const double> b);

/// (mean_b - mean_a) / sqrt((std_a^2 + std_b^2) / 2)
double cohens_d(double mean_a, double std_a, double mean_b, double std_b);

/// Sample-size weighted pooled form.
double cohens_d(double mean_a, double std_a, std::int64_t n_a, double mean_b, double std_b, std::int64_t n_b);

/// Percentile bootstrap interval for the mean.
std::pair<double, double> bootstrap_ci(std::span<const double> sample, int n_resamples = 10000, double level = 0.95,
                                       std::uint64_t seed = 1);

/// H with midranks and tie correction, chi-square p with k-1 dof,
/// effect_size = eta^2 = (H - k + 1) / (n - k).
TestResult kruskal_wallis(const std::vector<std::vector<double>>& groups);

// Special functions.
double regularized_beta(double a, double b, double x);
double regularized_gamma_q(double a, double x);
/// Two-tailed P(|T| >= |t|) for Student's t with `dof` degrees of freedom.
double student_t_two_tailed(double t, double dof);
/// P(X >= x) for chi-square with k degrees of freedom.
double chi_square_sf(double x, double k);

// ---- report writers ----------------------------------------------------------

struct MetricRow {
    std::string model;
    MetricReport report;
};

/// Columns: model, accuracy, precision, recall, f1, auc, tp, fp, tn, fn, mean_delay, missed
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows);
void write_metrics_json(const std::filesystem::path& path, const std::vector<MetricRow>& rows);

struct ComparisonRow {
    std::string comparison;
    TestResult result;
};

/// Columns: comparison, t_statistic, dof, p_value, cohens_d
void write_ttest_csv(const std::filesystem::path& path, const std::vector<ComparisonRow>& rows);

struct PlotPoint {
    double x = 0.0;
    double y = 0.0;
    std::string series;
};

/// Columns: x, y, series
void write_plot_data(const std::filesystem::path& path, const std::vector<PlotPoint>& points);

}  // namespace tg::stats
