#pragma once

// Online sequential detector: log-likelihood ratio, windowed evidence score,
// adaptive threshold, drift-consistency residual, overflow probability and
// the fused per-step decision.

#include <array>
#include <cstdint>
#include <deque>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace tg::detector {

struct DetectorParams {
    double theta0 = 1.0;
    double gamma = 0.1;
    int var_window = 20;       // w, >= 2
    int score_window = 5;      // T, 0 selects the cumulative recursion
    double eps_delta = 0.05;   // seconds
    double eps_o = 0.5;
    double overflow_margin = 10.0;  // seconds below T0 that raise the proximity flag
    double dt = 1.0;

    void validate() const;
};

struct DetectorState {
    std::deque<double> llr_buffer;     // last T values of Lambda
    std::deque<double> score_history;  // last w values of S
    double cumulative = 0.0;           // S in cumulative mode
    double prev_delta_hat = 0.0;
    double prev_v = 0.0;
    double prev_tau = 0.0;
    std::int64_t step = 0;
};

enum Reason : unsigned {
    kReasonScore = 1u,
    kReasonDrift = 2u,
    kReasonOverflow = 4u,
};

struct Detection {
    std::int64_t step = 0;
    bool fired = false;
    double S = 0.0;
    double theta = 0.0;
    double C_delta = 0.0;
    double P_over = 0.0;
    unsigned reason = 0;  // sub-conditions that held, as Reason bits

    friend bool operator==(const Detection&, const Detection&) = default;
};

/// Names of the reason bits, in score / drift_consistency / overflow order.
std::vector<std::string> reason_names(unsigned reason);

/// logit(p) with p clamped to [1e-12, 1 - 1e-12].
double llr(double p_hat);

/// Pushes Lambda and returns S: the sum of the last min(T, steps) values, or
/// the running total when T = 0.
double accumulate_score(DetectorState& state, const DetectorParams& params, double lambda);

/// theta0 + gamma * population std of the score history.
double adaptive_threshold(const DetectorState& state, const DetectorParams& params);

/// |(delta_hat - delta_hat_prev) - (tau - tau_prev - dt)|
double drift_consistency(double delta_hat, double delta_hat_prev, double tau, double tau_prev, double dt);

/// sigmoid(w_o . [delta_hat, v, a, o])
double overflow_probability(const std::array<double, 4>& w_o, const std::array<double, 4>& inputs);

struct StepInput {
    double p_hat = 0.5;
    double delta_hat = 0.0;  // seconds
    double tau = 0.0;        // reported time used for the drift-consistency residual
    /// Overflow proximity flag; when absent it is derived from tau and the margin.
    std::optional<double> proximity;
};

/// One step of the online rule: fired iff S > theta and (C_delta > eps_delta
/// or P_over > eps_o). The first step has no predecessor: C_delta = v = a = 0.
Detection decide_step(DetectorState& state, const StepInput& in, const DetectorParams& params,
                      const std::array<double, 4>& w_o);

struct StreamResult {
    std::vector<Detection> detections;
    std::optional<std::int64_t> first_fire_after_onset;
    std::int64_t fired_count = 0;
};

/// Replays decide_step over a device stream from a fresh state.
StreamResult run_stream(const std::vector<StepInput>& stream, const DetectorParams& params,
                        const std::array<double, 4>& w_o, std::optional<std::int64_t> onset = std::nullopt);

/// One JSON object per line: device, step, fired, S, theta, C_delta, P_over, reason.
void write_detection_log(std::ostream& out, int device, const std::vector<Detection>& detections);

struct LoggedDetection {
    int device = 0;
    Detection detection;
};

std::vector<LoggedDetection> read_detection_log(std::istream& in);

}  // namespace tg::detector
