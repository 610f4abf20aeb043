#include <doctest.h>

#include <cmath>
#include <sstream>

#include "timeguard/core/error.hpp"
#include "timeguard/core/rng.hpp"
#include "timeguard/detector.hpp"

using namespace tg;
using namespace tg::detector;

namespace {

const std::array<double, 4> kZeroW{0, 0, 0, 0};

std::vector<StepInput> random_stream(std::uint64_t seed, std::size_t n) {
    auto rng = make_rng(seed, Stream::diag);
    std::vector<StepInput> s(n);
    double tau = 1000.0;
    for (auto& in : s) {
        in.p_hat = uniform_draw(rng);
        in.delta_hat = 0.1 * normal_draw(rng);
        tau += 1.0 + 0.05 * normal_draw(rng);
        in.tau = tau;
    }
    return s;
}

}  // namespace

TEST_CASE("llr examples") {
    CHECK(llr(0.5) == 0.0);
    CHECK(llr(0.9) == doctest::Approx(std::log(9.0)).epsilon(1e-15));
    CHECK(llr(0.9) == doctest::Approx(2.1972245773362196).epsilon(1e-14));
    CHECK(std::isfinite(llr(0.0)));
    CHECK(std::isfinite(llr(1.0)));
    CHECK(llr(0.0) == doctest::Approx(std::log(1e-12)).epsilon(1e-6));
    auto rng = make_rng(1, Stream::diag);
    for (int i = 0; i < 1000; ++i) {
        const double p = 1e-6 + (1 - 2e-6) * uniform_draw(rng);
        CHECK(llr(p) == doctest::Approx(-llr(1.0 - p)).epsilon(1e-9));
    }
}

TEST_CASE("accumulate_score examples") {
    DetectorParams p;
    p.score_window = 4;
    DetectorState s;
    for (int i = 0; i < 10; ++i) CHECK(accumulate_score(s, p, 0.0) == 0.0);
    DetectorState c;
    double last = 0;
    for (int i = 0; i < 10; ++i) last = accumulate_score(c, p, 0.75);
    CHECK(last == 3.0);
    CHECK(c.llr_buffer.size() == 4);
}

TEST_CASE("windowed score equals the brute-force sum at every step") {
    auto rng = make_rng(2, Stream::diag);
    for (int T : {1, 3, 7, 50}) {
        DetectorParams p;
        p.score_window = T;
        DetectorState s;
        std::vector<double> all;
        for (int i = 0; i < 100000; ++i) {
            const double l = 5.0 * normal_draw(rng);
            all.push_back(l);
            const double got = accumulate_score(s, p, l);
            double want = 0.0;
            const std::size_t from = all.size() > static_cast<std::size_t>(T) ? all.size() - T : 0;
            for (std::size_t k = from; k < all.size(); ++k) want += all[k];
            REQUIRE(got == want);
            REQUIRE(s.llr_buffer.size() <= static_cast<std::size_t>(T));
        }
    }
}

TEST_CASE("cumulative mode is the running sum") {
    DetectorParams p;
    p.score_window = 0;
    DetectorState s;
    double want = 0.0;
    auto rng = make_rng(3, Stream::diag);
    for (int i = 0; i < 1000; ++i) {
        const double l = normal_draw(rng);
        want += l;
        CHECK(accumulate_score(s, p, l) == want);
    }
}

TEST_CASE("adaptive_threshold examples") {
    DetectorParams p;
    p.theta0 = 2.0;
    p.gamma = 1.0;
    DetectorState s;
    s.score_history = {4.0, 4.0, 4.0};
    CHECK(adaptive_threshold(s, p) == 2.0);
    s.score_history = {0.0, 2.0};
    CHECK(adaptive_threshold(s, p) == doctest::Approx(3.0).epsilon(1e-15));
    s.score_history = {5.0};
    CHECK(adaptive_threshold(s, p) == 2.0);
    p.gamma = 0.0;
    s.score_history = {0.0, 100.0, -50.0};
    CHECK(adaptive_threshold(s, p) == 2.0);
}

TEST_CASE("constant score histories give exactly theta0") {
    DetectorParams p;
    p.gamma = 3.0;
    auto rng = make_rng(4, Stream::diag);
    for (int trial = 0; trial < 2000; ++trial) {
        DetectorState s;
        const double c = 10.0 * normal_draw(rng);
        s.score_history.assign(2 + rng() % 40, c);
        REQUIRE(adaptive_threshold(s, p) == p.theta0);
    }
    DetectorState s;
    s.score_history.assign(3, 0.1);
    CHECK(adaptive_threshold(s, p) == p.theta0);
}

TEST_CASE("threshold never drops below theta0 and history is bounded") {
    DetectorParams p;
    p.gamma = 0.7;
    p.var_window = 6;
    DetectorState s;
    for (const auto& in : random_stream(4, 2000)) {
        const auto d = decide_step(s, in, p, kZeroW);
        CHECK(d.theta >= p.theta0);
        CHECK(s.score_history.size() <= 6);
        CHECK(s.llr_buffer.size() <= static_cast<std::size_t>(p.score_window));
    }
}

TEST_CASE("drift_consistency examples") {
    CHECK(drift_consistency(0.3, 0.1, 101.2, 100.0, 1.0) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(drift_consistency(0.5, 0.5, 101.0, 100.0, 1.0) == 0.0);
    // Overflow step: tau jumps by T0 on top of dt.
    const double tau_prev = 2147483646.5;
    CHECK(drift_consistency(0.2, 0.2, tau_prev + 1.0 + 2147483648.0, tau_prev, 1.0) == 2147483648.0);
}

TEST_CASE("overflow_probability examples") {
    CHECK(overflow_probability(kZeroW, {3.0, -1.0, 2.0, 1.0}) == 0.5);
    const double want = 1.0 / (1.0 + std::exp(-10.0));
    CHECK(overflow_probability({0, 0, 0, 10}, {0.3, 0.1, 0.0, 1.0}) == doctest::Approx(want).epsilon(1e-15));
    CHECK(want == doctest::Approx(0.9999546021312976).epsilon(1e-15));
    CHECK(overflow_probability({0.5, -1, 2, 3}, {1, 1, 1, 1}) > overflow_probability({0.5, -1, 2, 3}, {1, 1, 1, 0}));
    // Extreme logits stay in [0, 1] without NaN.
    CHECK(overflow_probability({1, 0, 0, 0}, {-1e6, 0, 0, 0}) == 0.0);
    CHECK(overflow_probability({1, 0, 0, 0}, {1e6, 0, 0, 0}) == 1.0);
}

TEST_CASE("decide_step: neutral posterior never fires") {
    DetectorParams p;
    DetectorState s;
    double tau = 0;
    for (int i = 0; i < 500; ++i) {
        tau += i == 200 ? 1e9 : 1.0;  // huge C_delta, but the score gate is closed
        const auto d = decide_step(s, {0.5, 0.0, tau, std::nullopt}, p, {0, 0, 0, 50});
        CHECK(d.S == 0.0);
        CHECK_FALSE(d.fired);
    }
}

TEST_CASE("decide_step: score alone is not enough") {
    DetectorParams p;
    DetectorState s;
    double tau = 0;
    for (int i = 0; i < 50; ++i) {
        tau += 1.0;
        const auto d = decide_step(s, {0.99, 0.0, tau, 0.0}, p, kZeroW);
        if (i > 2) CHECK(d.S > d.theta);
        CHECK(d.C_delta == 0.0);
        CHECK(d.P_over == 0.5);
        CHECK_FALSE(d.fired);
        CHECK((d.reason & ~unsigned(kReasonScore)) == 0);
    }
}

TEST_CASE("decide_step: first step conventions") {
    DetectorParams p;
    DetectorState s;
    const auto d = decide_step(s, {0.9, 5.0, 1e6, 0.0}, p, {0, 1, 1, 0});
    CHECK(d.step == 0);
    CHECK(d.C_delta == 0.0);
    CHECK(d.P_over == 0.5);  // v = a = 0
}

TEST_CASE("forced overflow step fires with the overflow reason") {
    DetectorParams p;
    DetectorState s;
    const std::array<double, 4> w{0.0, 0.0, 0.0, 12.0};
    const double dt = 1.0;
    double tau = 2147483648.0 - 40.0;
    bool fired_at_overflow = false;
    for (int i = 0; i < 60; ++i) {
        const bool after = i >= 30;
        tau += dt;
        const double reported = tau + (i >= 40 ? 2147483648.0 : 0.0);
        const double ph = after ? 0.95 : 0.1;
        const auto d = decide_step(s, {ph, 0.0, reported, std::nullopt}, p, w);
        if (i < 30) CHECK_FALSE(d.fired);
        if (i == 40) {
            CHECK(d.C_delta == 2147483648.0);
            CHECK(d.fired);
            CHECK((d.reason & kReasonOverflow));
            CHECK((d.reason & kReasonDrift));
            fired_at_overflow = d.fired;
        }
    }
    CHECK(fired_at_overflow);
}

TEST_CASE("raising p_hat never turns a fire into a non-fire") {
    DetectorParams p;
    const auto stream = random_stream(5, 300);
    const std::array<double, 4> w{1.0, 2.0, -1.0, 3.0};
    auto rng = make_rng(6, Stream::diag);
    for (int rep = 0; rep < 40; ++rep) {
        const std::size_t at = rng() % stream.size();
        DetectorState a, b;
        for (std::size_t i = 0; i < at; ++i) {
            decide_step(a, stream[i], p, w);
            decide_step(b, stream[i], p, w);
        }
        auto lo = stream[at], hi = stream[at];
        hi.p_hat = lo.p_hat + (1.0 - lo.p_hat) * uniform_draw(rng);
        const auto dl = decide_step(a, lo, p, w);
        const auto dh = decide_step(b, hi, p, w);
        CHECK(dh.S >= dl.S);
        if (dl.fired) CHECK(dh.fired);
    }
}

TEST_CASE("run_stream: replay determinism, delay and prefix purity") {
    DetectorParams p;
    const std::array<double, 4> w{1.0, 2.0, -1.0, 3.0};
    auto stream = random_stream(7, 1000);
    const auto r1 = run_stream(stream, p, w, 100);
    const auto r2 = run_stream(stream, p, w, 100);
    CHECK(r1.detections == r2.detections);
    CHECK(r1.first_fire_after_onset == r2.first_fire_after_onset);

    // The first 400 decisions only depend on the first 400 inputs.
    auto changed = stream;
    for (std::size_t i = 400; i < changed.size(); ++i) changed[i].p_hat = 0.999;
    const auto r3 = run_stream(changed, p, w, 100);
    for (std::size_t i = 0; i < 400; ++i) CHECK(r3.detections[i] == r1.detections[i]);

    // Onset 100, first fire at 102.
    std::vector<StepInput> s(200);
    for (std::size_t i = 0; i < s.size(); ++i) {
        s[i].tau = static_cast<double>(i);
        s[i].p_hat = 0.5;
        s[i].proximity = 0.0;
    }
    for (std::size_t i = 101; i < s.size(); ++i) s[i].p_hat = 0.999;
    s[102].tau += 3.0;  // drift-consistency breach
    for (std::size_t i = 103; i < s.size(); ++i) s[i].tau += 3.0;
    const auto r = run_stream(s, p, kZeroW, 100);
    REQUIRE(r.first_fire_after_onset);
    CHECK(*r.first_fire_after_onset - 100 == 2);
    CHECK(r.fired_count == 1);
}

TEST_CASE("parameter validation") {
    DetectorParams p;
    CHECK_NOTHROW(p.validate());
    p.var_window = 1;
    CHECK_THROWS_AS(p.validate(), ValidationError);
    p = {};
    p.eps_o = 1.0;
    CHECK_THROWS_AS(p.validate(), ValidationError);
    p = {};
    p.gamma = -0.1;
    CHECK_THROWS_AS(p.validate(), ValidationError);
    p = {};
    p.eps_delta = 0.0;
    CHECK_THROWS_AS(p.validate(), ValidationError);
    CHECK_THROWS_AS(run_stream({}, DetectorParams{}, kZeroW), ValidationError);
}

TEST_CASE("detection log round trip") {
    DetectorParams p;
    const auto r = run_stream(random_stream(8, 50), p, {1, 2, -1, 3});
    std::stringstream ss;
    write_detection_log(ss, 3, r.detections);
    const auto back = read_detection_log(ss);
    REQUIRE(back.size() == r.detections.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].device == 3);
        CHECK(back[i].detection == r.detections[i]);
    }
    std::stringstream bad("{\"device\":1}\n");
    CHECK_THROWS_AS(read_detection_log(bad), ValidationError);
    CHECK(reason_names(kReasonScore | kReasonOverflow) == std::vector<std::string>{"score", "overflow"});
}
