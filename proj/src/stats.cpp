#include "timeguard/stats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "timeguard/core/error.hpp"
#include "timeguard/core/rng.hpp"
#include "timeguard/io_util.hpp"

namespace tg::stats {

MetricReport classification_metrics(std::span<const int> labels, std::span<const int> predictions) {
    if (labels.size() != predictions.size())
        throw ValidationError("classification_metrics: " + std::to_string(labels.size()) + " labels vs " +
                              std::to_string(predictions.size()) + " predictions");
    if (labels.empty()) throw ValidationError("classification_metrics: empty input");
    MetricReport r;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int y = labels[i], p = predictions[i];
        if ((y != 0 && y != 1) || (p != 0 && p != 1)) throw ValidationError("classification_metrics: values must be 0 or 1");
        if (y && p) ++r.tp;
        else if (!y && p) ++r.fp;
        else if (!y && !p) ++r.tn;
        else ++r.fn;
    }
    const auto d = [](std::int64_t v) { return static_cast<double>(v); };
    r.accuracy = d(r.tp + r.tn) / d(r.total());
    r.precision_undefined = r.tp + r.fp == 0;
    r.recall_undefined = r.tp + r.fn == 0;
    r.precision = r.precision_undefined ? 0.0 : d(r.tp) / d(r.tp + r.fp);
    r.recall = r.recall_undefined ? 0.0 : d(r.tp) / d(r.tp + r.fn);
    r.f1 = r.precision + r.recall > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
    return r;
}

namespace {

// Midranks (1-based) of the values.
std::vector<double> midranks(std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

double mean_of(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double sample_var(std::span<const double> v, double mean) {
    double s = 0.0;
    for (double x : v) s += (x - mean) * (x - mean);
    return s / static_cast<double>(v.size() - 1);
}

// Continued fraction for the incomplete beta (modified Lentz).
double beta_cf(double a, double b, double x) {
    constexpr double tiny = 1e-300;
    constexpr double eps = 1e-16;
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
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < eps) return h;
    }
    throw RuntimeError("incomplete beta: continued fraction did not converge");
}

}  // namespace

double roc_auc(std::span<const int> labels, std::span<const double> scores) {
    if (labels.size() != scores.size()) throw ValidationError("roc_auc: length mismatch");
    const auto ranks = midranks(scores);
    double pos_rank = 0.0;
    std::int64_t n_pos = 0, n_neg = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == 1) {
            pos_rank += ranks[i];
            ++n_pos;
        } else if (labels[i] == 0) {
            ++n_neg;
        } else {
            throw ValidationError("roc_auc: labels must be 0 or 1");
        }
    }
    if (n_pos == 0 || n_neg == 0) throw ValidationError("roc_auc: both classes must be present");
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (pos_rank - np * (np + 1.0) / 2.0) / (np * nn);
}

std::optional<double> detection_delay(std::int64_t onset, std::span<const std::int64_t> fired_steps) {
    if (onset < 0) throw ValidationError("detection_delay: onset must be >= 0");
    std::optional<std::int64_t> first;
    for (auto s : fired_steps)
        if (s >= onset && (!first || s < *first)) first = s;
    if (!first) return std::nullopt;
    return static_cast<double>(*first - onset);
}

DelaySummary summarize_delays(std::span<const std::optional<double>> delays) {
    DelaySummary s;
    double sum = 0.0;
    for (const auto& d : delays) {
        if (d) {
            sum += *d;
            ++s.detected;
        } else {
            ++s.missed;
        }
    }
    s.mean = s.detected ? sum / static_cast<double>(s.detected) : std::numeric_limits<double>::quiet_NaN();
    return s;
}

double regularized_beta(double a, double b, double x) {
    if (!(a > 0.0 && b > 0.0)) throw ValidationError("regularized_beta: a, b must be > 0");
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double front =
        std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x));
    if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_cf(a, b, x) / a;
    return 1.0 - front * beta_cf(b, a, 1.0 - x) / b;
}

double regularized_gamma_q(double a, double x) {
    if (!(a > 0.0)) throw ValidationError("regularized_gamma_q: a must be > 0");
    if (x <= 0.0) return 1.0;
    const double log_front = -x + a * std::log(x) - std::lgamma(a);
    if (x < a + 1.0) {
        // Series for P.
        double ap = a, sum = 1.0 / a, del = sum;
        for (int n = 0; n < 100000; ++n) {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if (std::abs(del) < std::abs(sum) * 1e-17) return 1.0 - sum * std::exp(log_front);
        }
        throw RuntimeError("incomplete gamma: series did not converge");
    }
    // Continued fraction for Q (modified Lentz).
    constexpr double tiny = 1e-300;
    double b = x + 1.0 - a, c = 1.0 / tiny, d = 1.0 / b, h = d;
    for (int i = 1; i <= 100000; ++i) {
        const double an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < 1e-16) return std::exp(log_front) * h;
    }
    throw RuntimeError("incomplete gamma: continued fraction did not converge");
}

double student_t_two_tailed(double t, double dof) {
    if (!(dof > 0.0)) throw ValidationError("student_t_two_tailed: dof must be > 0");
    if (std::isinf(t)) return 0.0;
    return regularized_beta(dof / 2.0, 0.5, dof / (dof + t * t));
}

double chi_square_sf(double x, double k) {
    if (!(k > 0.0)) throw ValidationError("chi_square_sf: dof must be > 0");
    return regularized_gamma_q(k / 2.0, x / 2.0);
}

TestResult welch_t(std::span<const double> a, std::span<const double> b) {
    if (a.size() < 2 || b.size() < 2) throw ValidationError("welch_t: each sample needs at least 2 values");
    const double ma = mean_of(a), mb = mean_of(b);
    const double va = sample_var(a, ma), vb = sample_var(b, mb);
    if (va == 0.0 && vb == 0.0) throw ValidationError("welch_t: both samples have zero variance");
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    const double sa = va / na, sb = vb / nb;
    TestResult r;
    r.statistic = (ma - mb) / std::sqrt(sa + sb);
    r.dof = (sa + sb) * (sa + sb) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    r.p_value = std::clamp(student_t_two_tailed(r.statistic, r.dof), 0.0, 1.0);
    r.effect_size = cohens_d(ma, std::sqrt(va), mb, std::sqrt(vb));
    return r;
}

double cohens_d(double mean_a, double std_a, double mean_b, double std_b) {
    if (std_a == 0.0 && std_b == 0.0) throw ValidationError("cohens_d: both standard deviations are zero");
    return (mean_b - mean_a) / std::sqrt((std_a * std_a + std_b * std_b) / 2.0);
}

double cohens_d(double mean_a, double std_a, std::int64_t n_a, double mean_b, double std_b, std::int64_t n_b) {
    if (n_a < 2 || n_b < 2) throw ValidationError("cohens_d: sample sizes must be >= 2");
    if (std_a == 0.0 && std_b == 0.0) throw ValidationError("cohens_d: both standard deviations are zero");
    const double na = static_cast<double>(n_a), nb = static_cast<double>(n_b);
    const double pooled = ((na - 1.0) * std_a * std_a + (nb - 1.0) * std_b * std_b) / (na + nb - 2.0);
    return (mean_b - mean_a) / std::sqrt(pooled);
}

std::pair<double, double> bootstrap_ci(std::span<const double> sample, int n_resamples, double level,
                                       std::uint64_t seed) {
    if (sample.empty()) throw ValidationError("bootstrap_ci: empty sample");
    if (n_resamples < 100) throw ValidationError("bootstrap_ci: need at least 100 resamples");
    if (!(level > 0.0 && level < 1.0)) throw ValidationError("bootstrap_ci: level must lie in (0, 1)");
    auto rng = make_rng(seed, Stream::bootstrap);
    const std::size_t n = sample.size();
    std::vector<double> means(static_cast<std::size_t>(n_resamples));
    for (auto& m : means) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += sample[static_cast<std::size_t>(rng() % n)];
        m = s / static_cast<double>(n);
    }
    std::sort(means.begin(), means.end());
    auto quantile = [&](double q) {
        const double pos = q * static_cast<double>(means.size() - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const auto hi = std::min(lo + 1, means.size() - 1);
        return means[lo] + (pos - static_cast<double>(lo)) * (means[hi] - means[lo]);
    };
    const double tail = (1.0 - level) / 2.0;
    return {quantile(tail), quantile(1.0 - tail)};
}

TestResult kruskal_wallis(const std::vector<std::vector<double>>& groups) {
    if (groups.size() < 2) throw ValidationError("kruskal_wallis: need at least 2 groups");
    std::vector<double> all;
    for (const auto& g : groups) {
        if (g.empty()) throw ValidationError("kruskal_wallis: empty group");
        all.insert(all.end(), g.begin(), g.end());
    }
    const double n = static_cast<double>(all.size());
    if (all.size() < 5) throw ValidationError("kruskal_wallis: need at least 5 observations");
    const auto ranks = midranks(all);
    double term = 0.0;
    std::size_t pos = 0;
    for (const auto& g : groups) {
        double r = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) r += ranks[pos++];
        term += r * r / static_cast<double>(g.size());
    }
    double h = 12.0 / (n * (n + 1.0)) * term - 3.0 * (n + 1.0);
    // Tie correction.
    std::vector<double> sorted = all;
    std::sort(sorted.begin(), sorted.end());
    double ties = 0.0;
    for (std::size_t i = 0; i < sorted.size();) {
        std::size_t j = i;
        while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
        const double t = static_cast<double>(j - i + 1);
        ties += t * t * t - t;
        i = j + 1;
    }
    const double correction = 1.0 - ties / (n * n * n - n);
    if (correction <= 0.0) throw ValidationError("kruskal_wallis: all observations are equal");
    h /= correction;
    const double k = static_cast<double>(groups.size());
    TestResult r;
    r.statistic = h;
    r.dof = k - 1.0;
    r.p_value = std::clamp(chi_square_sf(std::max(h, 0.0), r.dof), 0.0, 1.0);
    r.effect_size = (h - k + 1.0) / (n - k);
    return r;
}

// ---- writers -------------------------------------------------------------------

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeError("cannot write " + path.string());
    return out;
}

std::string num(double v) { return std::isfinite(v) ? io::format_double(v) : std::string(); }

}  // namespace

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
    auto out = open_out(path);
    out << "model,accuracy,precision,recall,f1,auc,tp,fp,tn,fn,mean_delay,missed\n";
    for (const auto& [model, r] : rows)
        out << model << ',' << num(r.accuracy) << ',' << num(r.precision) << ',' << num(r.recall) << ',' << num(r.f1)
            << ',' << (r.has_auc ? num(r.auc) : "") << ',' << r.tp << ',' << r.fp << ',' << r.tn << ',' << r.fn << ','
            << (r.detected ? num(r.mean_delay) : "") << ',' << r.missed << '\n';
}

void write_metrics_json(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [model, r] : rows) {
        nlohmann::json j{{"model", model},         {"accuracy", r.accuracy}, {"precision", r.precision},
                         {"recall", r.recall},     {"f1", r.f1},             {"tp", r.tp},
                         {"fp", r.fp},             {"tn", r.tn},             {"fn", r.fn},
                         {"detected", r.detected}, {"missed", r.missed}};
        j["auc"] = r.has_auc ? nlohmann::json(r.auc) : nlohmann::json(nullptr);
        j["mean_delay"] = r.detected ? nlohmann::json(r.mean_delay) : nlohmann::json(nullptr);
        arr.push_back(j);
    }
    auto out = open_out(path);
    out << arr.dump(2) << '\n';
}

void write_ttest_csv(const std::filesystem::path& path, const std::vector<ComparisonRow>& rows) {
    auto out = open_out(path);
    out << "comparison,t_statistic,dof,p_value,cohens_d\n";
    for (const auto& [name, r] : rows)
        out << name << ',' << num(r.statistic) << ',' << num(r.dof) << ',' << num(r.p_value) << ','
            << num(r.effect_size) << '\n';
}

void write_plot_data(const std::filesystem::path& path, const std::vector<PlotPoint>& points) {
    auto out = open_out(path);
    out << "x,y,series\n";
    for (const auto& p : points) out << num(p.x) << ',' << num(p.y) << ',' << p.series << '\n';
}

}  // namespace tg::stats
