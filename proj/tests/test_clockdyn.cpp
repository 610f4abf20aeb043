#include <doctest.h>

#include <cmath>
#include <cstdint>

#include "timeguard/clockdyn.hpp"
#include "timeguard/core/rng.hpp"

using namespace tg;
using namespace tg::clockdyn;

namespace {
constexpr std::int64_t T0 = 2147483648LL;
}

TEST_CASE("time constants") {
    TimeConstants c;
    CHECK(c.T0 == T0);
    CHECK(c.dt == 1.0);
    CHECK(kEpochLimit == (std::int64_t{1} << 31));
}

TEST_CASE("ou_drift_step examples") {
    ClockParams p;
    p.alpha = 0.99;
    p.sigma = 0.0;
    CHECK(ou_drift_step(0.0, p, 1.0, 123.0) == 0.0);
    p.alpha = 0.5;
    CHECK(ou_drift_step(1.0, p, 1.0, 0.0) == 0.5);
    p.alpha = 0.9;
    p.sigma = 0.2;
    CHECK(ou_drift_step(1.0, p, 4.0, 0.5) == doctest::Approx(0.9 + 0.2 * 2.0 * 0.5).epsilon(1e-15));
}

TEST_CASE("ou_drift_step: stationary variance of the AR(1) recursion") {
    ClockParams p;
    p.alpha = 0.9;
    p.sigma = 0.1;
    const double expected = p.sigma * p.sigma * 1.0 / (1.0 - p.alpha * p.alpha);  // 0.05263...
    auto rng = make_rng(42, Stream::clock);
    double delta = 0.0;
    for (int i = 0; i < 1000; ++i) delta = ou_drift_step(delta, p, 1.0, normal_draw(rng));  // burn-in
    const int n = 1000000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        delta = ou_drift_step(delta, p, 1.0, normal_draw(rng));
        sum += delta;
        sq += delta * delta;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(std::abs(var - expected) / expected < 0.02);
}

TEST_CASE("ou_drift_step: zero diffusion decays geometrically") {
    ClockParams p;
    p.alpha = 0.97;
    p.sigma = 0.0;
    double delta = 1.5;
    for (int t = 1; t <= 500; ++t) {
        delta = ou_drift_step(delta, p, 1.0, 1.0);
        const double closed = std::pow(0.97, t) * 1.5;
        CHECK(std::abs(delta - closed) <= 1e-12 * closed);
    }
}

TEST_CASE("offset_step examples") {
    ClockParams p;
    p.shock_prob = 0.0;
    p.jitter_scale = 0.0;
    CHECK(offset_step(0.0, p, 0.3, 1.7) == 0.0);
    p.shock_prob = 0.05;
    p.shock_scale = 1.0;
    CHECK(offset_step(2.0, p, 0.01, -3.0) == -1.0);
    p.jitter_scale = 0.1;
    CHECK(offset_step(2.0, p, 0.5, -3.0) == doctest::Approx(1.7));
}

TEST_CASE("offset_step: shock frequency") {
    ClockParams p;
    p.shock_prob = 0.05;
    auto rng = make_rng(7, Stream::clock);
    int shocks = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) shocks += is_shock(p, uniform_draw(rng)) ? 1 : 0;
    CHECK(std::abs(static_cast<double>(shocks) / n - 0.05) <= 0.005);
}

TEST_CASE("overflow_indicator examples") {
    CHECK(overflow_indicator(2147483647.0, T0) == 0);
    CHECK(overflow_indicator(2147483648.0, T0) == 1);
    CHECK(overflow_indicator(0.0, T0) == 0);
}

TEST_CASE("compose_timestamp examples") {
    CHECK(compose_timestamp(100.0, ClockState{0.5, -0.2, 0, 0.0}, T0) == doctest::Approx(100.3).epsilon(1e-15));
    CHECK(compose_timestamp(100.0, ClockState{0.5, -0.2, 1, 0.0}, T0) == doctest::Approx(2147483748.3).epsilon(1e-15));
    CHECK(compose_timestamp(0.0, ClockState{}, T0) == 0.0);
}

TEST_CASE("distortion examples") {
    CHECK(distortion(100.3, 100.0) == doctest::Approx(0.3));
    CHECK(incremental_distortion(0.3, 0.3) == 0.0);
    // Latching the overflow with delta, eta unchanged jumps the distortion by T0.
    ClockState before{0.01, -0.02, 0, 0.0};
    ClockState after = before;
    after.overflow = 1;
    const double t = 1000.0;
    const double psi0 = distortion(compose_timestamp(t, before, T0), t);
    const double psi1 = distortion(compose_timestamp(t + 1.0, after, T0), t + 1.0);
    CHECK(incremental_distortion(psi1, psi0) == doctest::Approx(2147483648.0).epsilon(1e-15));
}

TEST_CASE("distortion reconstructs delta + eta + o T0") {
    auto rng = make_rng(3, Stream::diag);
    for (int i = 0; i < 1000; ++i) {
        const double t = 1.7e9 * uniform_draw(rng);
        ClockState s{0.01 * normal_draw(rng), 0.05 * normal_draw(rng), static_cast<int>(rng() % 2), 0.0};
        const double want = s.delta + s.eta + s.overflow * 2147483648.0;
        const double got = distortion(compose_timestamp(t, s, T0), t);
        // t + x - t is exact only up to the rounding of the sum.
        CHECK(std::abs(got - want) <= 1e-12 * std::max(1.0, t + std::abs(want)));
    }
}

TEST_CASE("wrap32 examples and properties") {
    CHECK(wrap32(2147483647) == 2147483647);
    CHECK(wrap32(2147483648LL) == -2147483648LL);
    CHECK(wrap32(-1) == -1);
    auto rng = make_rng(11, Stream::diag);
    for (int i = 0; i < 10000; ++i) {
        const auto x = static_cast<std::int64_t>(rng() >> 2) - (std::int64_t{1} << 61);
        const auto w = wrap32(x);
        CHECK(wrap32(w) == w);
        CHECK(wrap32(x + (std::int64_t{1} << 32)) == w);
        CHECK((x - w) % (std::int64_t{1} << 32) == 0);
    }
}

TEST_CASE("advance latches the overflow flag") {
    ClockParams p;
    p.sigma = 0.0;
    p.shock_prob = 0.0;
    p.jitter_scale = 0.0;
    TimeConstants c;
    ClockState s;
    s.tau_prev = 2147483640.0;
    int prev = 0;
    for (int step = 0; step < 20; ++step) {
        const double t = 2147483641.0 + step;
        advance(s, t, p, c, 0.0, 0.5, 0.0);
        CHECK(s.overflow >= prev);
        prev = s.overflow;
    }
    CHECK(s.overflow == 1);
}

TEST_CASE("zero scales and no overflow keep the distortion constant") {
    ClockParams p;
    p.sigma = 0.0;
    p.shock_prob = 0.0;
    p.jitter_scale = 0.0;
    p.shock_scale = 0.0;
    TimeConstants c;
    ClockState s;
    double psi_prev = 0.0;
    for (int step = 0; step < 100; ++step) {
        const double t = 1000.0 + step;
        const double psi = distortion(advance(s, t, p, c, 1.0, 0.0, 1.0), t);
        if (step > 0) CHECK(incremental_distortion(psi, psi_prev) == 0.0);
        psi_prev = psi;
    }
}

TEST_CASE("clock parameter validation") {
    ClockParams p;
    p.alpha = 0.0;
    CHECK_THROWS(p.validate());
    p = ClockParams{};
    p.shock_prob = 1.5;
    CHECK_THROWS(p.validate());
    p = ClockParams{};
    p.sigma = -1.0;
    CHECK_THROWS(p.validate());
    CHECK_NOTHROW(ClockParams{}.validate());
}
