#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "helpers.hpp"
#include "oracles.hpp"
#include "timeguard/core/error.hpp"
#include "timeguard/stats.hpp"

using namespace tg;
using namespace tg::stats;
using namespace tg::test;

namespace {

std::vector<double> normal_sample(std::mt19937_64& rng, std::size_t n, double mu, double sd) {
    std::vector<double> v(n);
    for (auto& x : v) x = mu + sd * normal_draw(rng);
    return v;
}

}  // namespace

// ---- classification ---------------------------------------------------------------

TEST_CASE("classification metrics examples") {
    const std::vector<int> y{1, 0, 1, 1, 0};
    auto r = classification_metrics(y, y);
    CHECK(r.accuracy == 1.0);
    CHECK(r.precision == 1.0);
    CHECK(r.recall == 1.0);
    CHECK(r.f1 == 1.0);

    const std::vector<int> zeros(6, 0);
    r = classification_metrics(zeros, zeros);
    CHECK(r.accuracy == 1.0);
    CHECK(r.precision == 0.0);
    CHECK(r.recall == 0.0);
    CHECK(r.precision_undefined);
    CHECK(r.recall_undefined);

    r = classification_metrics(std::vector<int>{1, 1, 0, 0}, std::vector<int>{1, 0, 1, 0});
    CHECK(r.tp == 1);
    CHECK(r.fn == 1);
    CHECK(r.fp == 1);
    CHECK(r.tn == 1);
    CHECK(r.accuracy == 0.5);
    CHECK(r.precision == 0.5);
    CHECK(r.recall == 0.5);
    CHECK(r.f1 == 0.5);
}

TEST_CASE("classification metrics errors") {
    CHECK_THROWS_AS(classification_metrics(std::vector<int>{1, 0}, std::vector<int>{1}), ValidationError);
    CHECK_THROWS_AS(classification_metrics(std::vector<int>{}, std::vector<int>{}), ValidationError);
    CHECK_THROWS_AS(classification_metrics(std::vector<int>{2}, std::vector<int>{1}), ValidationError);
}

TEST_CASE("metrics are recomputable from the confusion counts") {
    auto rng = make_rng(5, Stream::diag);
    for (int rep = 0; rep < 200; ++rep) {
        const std::size_t n = 1 + rng() % 50;
        std::vector<int> y(n), p(n);
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = static_cast<int>(rng() % 2);
            p[i] = static_cast<int>(rng() % 2);
        }
        const auto r = classification_metrics(y, p);
        CHECK(r.total() == static_cast<std::int64_t>(n));
        CHECK(r.accuracy == doctest::Approx(double(r.tp + r.tn) / n));
        if (r.tp + r.fp > 0) CHECK(r.precision == doctest::Approx(double(r.tp) / (r.tp + r.fp)));
        if (r.tp + r.fn > 0) CHECK(r.recall == doctest::Approx(double(r.tp) / (r.tp + r.fn)));
        if (r.tp > 0) CHECK(r.f1 == doctest::Approx(2.0 * r.tp / (2.0 * r.tp + r.fp + r.fn)));
        for (double v : {r.accuracy, r.precision, r.recall, r.f1}) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

// ---- AUC -------------------------------------------------------------------------

TEST_CASE("roc_auc examples") {
    const std::vector<int> y{0, 0, 1, 1};
    CHECK(roc_auc(y, std::vector<double>{0.1, 0.2, 0.3, 0.4}) == 1.0);
    CHECK(roc_auc(y, std::vector<double>{0.4, 0.3, 0.2, 0.1}) == 0.0);
    CHECK(roc_auc(y, std::vector<double>{0.7, 0.7, 0.7, 0.7}) == 0.5);
    CHECK_THROWS_AS(roc_auc(std::vector<int>{1, 1}, std::vector<double>{0.1, 0.2}), ValidationError);
}

TEST_CASE("roc_auc matches the pairwise oracle and is antisymmetric") {
    auto rng = make_rng(6, Stream::diag);
    for (int rep = 0; rep < 100; ++rep) {
        const std::size_t n = 4 + rng() % 40;
        std::vector<int> y(n);
        std::vector<double> s(n), neg(n);
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = i < 2 ? static_cast<int>(i) : static_cast<int>(rng() % 2);
            s[i] = static_cast<double>(rng() % 10) + (rep % 2 ? uniform_draw(rng) : 0.0);
            neg[i] = -s[i];
        }
        CHECK(roc_auc(y, s) == doctest::Approx(auc_oracle(y, s)).epsilon(1e-12));
        if (rep % 2) CHECK(roc_auc(y, s) == doctest::Approx(1.0 - roc_auc(y, neg)).epsilon(1e-12));
    }
}

// ---- delay -------------------------------------------------------------------------

TEST_CASE("detection delay examples") {
    CHECK(detection_delay(100, std::vector<std::int64_t>{102}) == 2.0);
    CHECK(detection_delay(100, std::vector<std::int64_t>{50, 99}) == std::nullopt);
    CHECK(detection_delay(100, std::vector<std::int64_t>{90, 105, 101}) == 1.0);
    CHECK_THROWS_AS(detection_delay(-1, std::vector<std::int64_t>{}), ValidationError);
}

TEST_CASE("delay summary equals brute-force average and counts misses") {
    auto rng = make_rng(7, Stream::diag);
    std::vector<std::optional<double>> delays;
    double sum = 0;
    int hits = 0, misses = 0;
    for (int i = 0; i < 500; ++i) {
        const std::int64_t onset = rng() % 1000;
        std::vector<std::int64_t> fires;
        const bool hit = rng() % 4 != 0;
        const std::int64_t delay = rng() % 20;
        if (onset > 0) fires.push_back(onset - 1);
        if (hit) fires.push_back(onset + delay);
        delays.push_back(detection_delay(onset, fires));
        if (hit) {
            sum += delay;
            ++hits;
        } else {
            ++misses;
        }
    }
    const auto s = summarize_delays(delays);
    CHECK(s.detected == hits);
    CHECK(s.missed == misses);
    CHECK(s.mean == doctest::Approx(sum / hits).epsilon(1e-12));
}

// ---- special functions ------------------------------------------------------------------

TEST_CASE("t and chi-square tails match tabulated and reference values") {
    // t(dof=10) two-tailed critical 2.228 -> 0.05; chi2(dof=2) 5.991 -> 0.05.
    CHECK(student_t_two_tailed(2.228138851986, 10) == doctest::Approx(0.05).epsilon(1e-9));
    CHECK(chi_square_sf(5.991464547108, 2) == doctest::Approx(0.05).epsilon(1e-9));
    CHECK(chi_square_sf(2.0, 2) == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
    CHECK(student_t_two_tailed(0.0, 3.5) == doctest::Approx(1.0).epsilon(1e-12));

    auto rng = make_rng(8, Stream::diag);
    for (int i = 0; i < 300; ++i) {
        const double dof = 0.5 + 60.0 * uniform_draw(rng);
        const double t = 8.0 * normal_draw(rng);
        boost::math::students_t td(dof);
        const double want_t = 2.0 * boost::math::cdf(boost::math::complement(td, std::abs(t)));
        CHECK(std::abs(student_t_two_tailed(t, dof) - want_t) <= 1e-10);

        const double k = 1.0 + static_cast<double>(rng() % 30);
        const double x = 3.0 * k * uniform_draw(rng);
        boost::math::chi_squared cd(k);
        CHECK(std::abs(chi_square_sf(x, k) - boost::math::cdf(boost::math::complement(cd, x))) <= 1e-10);
    }
}

// ---- Welch -----------------------------------------------------------------------------

TEST_CASE("welch_t examples") {
    const std::vector<double> a{1, 2, 3, 4, 5}, b{2, 3, 4, 5, 6};
    const auto r = welch_t(a, b);
    CHECK(r.statistic == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(r.dof == doctest::Approx(8.0).epsilon(1e-12));
    CHECK(r.p_value == doctest::Approx(0.3466).epsilon(1e-3));
    CHECK(std::abs(r.p_value - welch_oracle(a, b).p) <= 1e-10);

    const auto same = welch_t(a, a);
    CHECK(same.statistic == 0.0);
    CHECK(same.p_value == doctest::Approx(1.0).epsilon(1e-12));

    const auto swapped = welch_t(b, a);
    CHECK(swapped.statistic == -r.statistic);
    CHECK(swapped.p_value == doctest::Approx(r.p_value).epsilon(1e-14));

    CHECK_THROWS_AS(welch_t(std::vector<double>{1, 1}, std::vector<double>{2, 2}), ValidationError);
    CHECK_THROWS_AS(welch_t(std::vector<double>{1}, std::vector<double>{2, 3}), ValidationError);
}

TEST_CASE("welch_t matches the reference oracle on random fixtures") {
    auto rng = make_rng(9, Stream::diag);
    for (int rep = 0; rep < 100; ++rep) {
        const auto a = normal_sample(rng, 2 + rng() % 30, normal_draw(rng), 0.1 + uniform_draw(rng) * 3);
        const auto b = normal_sample(rng, 2 + rng() % 30, normal_draw(rng), 0.1 + uniform_draw(rng) * 3);
        const auto got = welch_t(a, b);
        const auto want = welch_oracle(a, b);
        CHECK(test::close(got.statistic, want.t, 1e-9, 1e-12));
        CHECK(test::close(got.dof, want.dof, 1e-9));
        CHECK(std::abs(got.p_value - want.p) <= 1e-9);
        CHECK(got.p_value >= 0.0);
        CHECK(got.p_value <= 1.0);
        CHECK(got.dof > 0.0);
    }
}

// ---- Cohen's d ---------------------------------------------------------------------------

TEST_CASE("cohens_d examples") {
    // sqrt((0.0025 + 0.0049) / 2) = sqrt(0.0037)
    const double d = cohens_d(0.15, 0.05, 0.32, 0.07);
    CHECK(d == doctest::Approx(0.17 / std::sqrt(0.0037)).epsilon(1e-12));
    CHECK(d == doctest::Approx(2.79).epsilon(0.005));
    CHECK(cohens_d(1.0, 0.5, 1.0, 0.7) == 0.0);
    CHECK(cohens_d(0.15 * 7, 0.05 * 7, 0.32 * 7, 0.07 * 7) == doctest::Approx(d).epsilon(1e-12));
    CHECK_THROWS_AS(cohens_d(0.0, 0.0, 1.0, 0.0), ValidationError);
    // Equal n: the weighted form reduces to the default.
    CHECK(cohens_d(0.15, 0.05, 20, 0.32, 0.07, 20) == doctest::Approx(d).epsilon(1e-12));
    CHECK(cohens_d(0.15, 0.05, 10, 0.32, 0.07, 30) ==
          doctest::Approx(0.17 / std::sqrt((9 * 0.0025 + 29 * 0.0049) / 38)).epsilon(1e-12));
}

// ---- bootstrap ------------------------------------------------------------------------------

TEST_CASE("bootstrap_ci examples") {
    const std::vector<double> c(20, 3.25);
    const auto [lo, hi] = bootstrap_ci(c, 1000, 0.95, 4);
    CHECK(lo == 3.25);
    CHECK(hi == 3.25);

    auto rng = make_rng(10, Stream::diag);
    const auto s = normal_sample(rng, 100, 0.0, 1.0);
    CHECK(bootstrap_ci(s, 2000, 0.95, 17) == bootstrap_ci(s, 2000, 0.95, 17));
    const auto [a, b] = bootstrap_ci(s, 10000, 0.95, 1);
    CHECK(std::abs((b - a) - 0.392) <= 0.15 * 0.392);

    CHECK_THROWS_AS(bootstrap_ci(std::vector<double>{}, 1000), ValidationError);
    CHECK_THROWS_AS(bootstrap_ci(s, 10), ValidationError);
}

TEST_CASE("bootstrap endpoints lie within the sample range") {
    auto rng = make_rng(11, Stream::diag);
    for (int rep = 0; rep < 30; ++rep) {
        const auto s = normal_sample(rng, 2 + rng() % 40, 0.0, 2.0);
        const auto [lo, hi] = bootstrap_ci(s, 500, 0.9, rep);
        CHECK(lo <= hi);
        CHECK(lo >= *std::min_element(s.begin(), s.end()));
        CHECK(hi <= *std::max_element(s.begin(), s.end()));
    }
}

// ---- Kruskal-Wallis -------------------------------------------------------------------------

TEST_CASE("kruskal_wallis examples") {
    const std::vector<std::vector<double>> g{{1, 2, 3}, {4, 5, 6}, {7, 8, 9}};
    const auto r = kruskal_wallis(g);
    CHECK(r.statistic == doctest::Approx(7.2).epsilon(1e-12));
    CHECK(r.dof == 2.0);
    CHECK(r.p_value == doctest::Approx(std::exp(-3.6)).epsilon(1e-10));
    CHECK(r.effect_size == doctest::Approx((7.2 - 2.0) / 6.0).epsilon(1e-12));

    const auto same = kruskal_wallis({{1, 2, 3, 4}, {1, 2, 3, 4}});
    CHECK(std::abs(same.statistic) <= 1e-12);
    CHECK(same.p_value == doctest::Approx(1.0).epsilon(1e-9));

    const auto perm = kruskal_wallis({g[2], g[0], g[1]});
    CHECK(perm.statistic == doctest::Approx(r.statistic).epsilon(1e-12));

    CHECK_THROWS_AS(kruskal_wallis({{2, 2, 2}, {2, 2, 2}}), ValidationError);
    CHECK_THROWS_AS(kruskal_wallis({{1, 2, 3}}), ValidationError);
    CHECK_THROWS_AS(kruskal_wallis({{1, 2}, {3}}), ValidationError);
}

TEST_CASE("kruskal_wallis matches the reference oracle on random fixtures") {
    auto rng = make_rng(12, Stream::diag);
    for (int rep = 0; rep < 100; ++rep) {
        const std::size_t k = 2 + rng() % 4;
        std::vector<std::vector<double>> groups(k);
        for (auto& g : groups) {
            g.resize(2 + rng() % 12);
            // Coarse values so ties are common.
            for (auto& v : g) v = static_cast<double>(rng() % 8) + (rep % 3 == 0 ? uniform_draw(rng) : 0.0);
        }
        const auto got = kruskal_wallis(groups);
        const auto [h, p] = kw_oracle(groups);
        CHECK(test::close(got.statistic, h, 1e-9, 1e-12));
        CHECK(std::abs(got.p_value - p) <= 1e-9);
    }
}

// ---- writers ----------------------------------------------------------------------------

TEST_CASE("report writers emit the documented columns") {
    const auto dir = std::filesystem::temp_directory_path() / "tg_test_stats";
    std::filesystem::remove_all(dir);
    MetricReport m = classification_metrics(std::vector<int>{1, 0}, std::vector<int>{1, 0});
    write_metrics_csv(dir / "m.csv", {{"stgat", m}});
    write_metrics_json(dir / "m.json", {{"stgat", m}});
    write_ttest_csv(dir / "t.csv", {{"a_vs_b", welch_t(std::vector<double>{1, 2, 3}, std::vector<double>{2, 3, 5})}});
    write_plot_data(dir / "p.csv", {{1.0, 2.0, "s"}});

    auto first_line = [](const std::filesystem::path& p) {
        std::ifstream in(p);
        std::string l;
        std::getline(in, l);
        return l;
    };
    CHECK(first_line(dir / "m.csv") == "model,accuracy,precision,recall,f1,auc,tp,fp,tn,fn,mean_delay,missed");
    CHECK(first_line(dir / "t.csv") == "comparison,t_statistic,dof,p_value,cohens_d");
    CHECK(first_line(dir / "p.csv") == "x,y,series");
    std::ifstream js(dir / "m.json");
    std::stringstream ss;
    ss << js.rdbuf();
    CHECK(ss.str().find("\"f1\": 1.0") != std::string::npos);
    std::filesystem::remove_all(dir);
}
