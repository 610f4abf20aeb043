#include "timeguard/detector.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "timeguard/clockdyn.hpp"
#include "timeguard/core/error.hpp"

namespace tg::detector {

void DetectorParams::validate() const {
    if (!std::isfinite(theta0)) throw ValidationError("detector: theta0 must be finite");
    if (!std::isfinite(gamma) || gamma < 0.0) throw ValidationError("detector: gamma must be >= 0");
    if (var_window < 2) throw ValidationError("detector: var_window must be >= 2");
    if (score_window < 0) throw ValidationError("detector: score_window must be >= 0");
    if (!(eps_delta > 0.0) || !std::isfinite(eps_delta)) throw ValidationError("detector: eps_delta must be > 0");
    if (!(eps_o > 0.0 && eps_o < 1.0)) throw ValidationError("detector: eps_o must lie in (0, 1)");
    if (!std::isfinite(overflow_margin) || overflow_margin < 0.0)
        throw ValidationError("detector: overflow_margin must be >= 0");
    if (!(dt > 0.0)) throw ValidationError("detector: dt must be > 0");
}

std::vector<std::string> reason_names(unsigned reason) {
    std::vector<std::string> out;
    if (reason & kReasonScore) out.emplace_back("score");
    if (reason & kReasonDrift) out.emplace_back("drift_consistency");
    if (reason & kReasonOverflow) out.emplace_back("overflow");
    return out;
}

double llr(double p_hat) {
    const double p = std::clamp(p_hat, 1e-12, 1.0 - 1e-12);
    return std::log(p / (1.0 - p));
}

double accumulate_score(DetectorState& state, const DetectorParams& params, double lambda) {
    if (params.score_window == 0) {
        state.cumulative += lambda;
        return state.cumulative;
    }
    state.llr_buffer.push_back(lambda);
    while (state.llr_buffer.size() > static_cast<std::size_t>(params.score_window)) state.llr_buffer.pop_front();
    // Summed afresh in window order: no drift from a running total.
    double s = 0.0;
    for (double v : state.llr_buffer) s += v;
    return s;
}

double adaptive_threshold(const DetectorState& state, const DetectorParams& params) {
    const auto& h = state.score_history;
    if (h.size() < 2 || params.gamma == 0.0) return params.theta0;
    // Summation rounding would leave a tiny spread on a constant history.
    if (std::all_of(h.begin(), h.end(), [&](double v) { return v == h.front(); })) return params.theta0;
    double mean = 0.0;
    for (double v : h) mean += v;
    mean /= static_cast<double>(h.size());
    double var = 0.0;
    for (double v : h) var += (v - mean) * (v - mean);
    var /= static_cast<double>(h.size());
    return params.theta0 + params.gamma * std::sqrt(var);
}

double drift_consistency(double delta_hat, double delta_hat_prev, double tau, double tau_prev, double dt) {
    return std::abs((delta_hat - delta_hat_prev) - (tau - tau_prev - dt));
}

double overflow_probability(const std::array<double, 4>& w_o, const std::array<double, 4>& inputs) {
    double z = 0.0;
    for (std::size_t i = 0; i < 4; ++i) z += w_o[i] * inputs[i];
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

Detection decide_step(DetectorState& state, const StepInput& in, const DetectorParams& params,
                      const std::array<double, 4>& w_o) {
    Detection d;
    d.step = state.step;
    d.S = accumulate_score(state, params, llr(in.p_hat));
    state.score_history.push_back(d.S);
    while (state.score_history.size() > static_cast<std::size_t>(params.var_window)) state.score_history.pop_front();
    d.theta = adaptive_threshold(state, params);

    const bool first = state.step == 0;
    d.C_delta = first ? 0.0 : drift_consistency(in.delta_hat, state.prev_delta_hat, in.tau, state.prev_tau, params.dt);
    const double v = first ? 0.0 : in.delta_hat - state.prev_delta_hat;
    const double a = state.step >= 2 ? v - state.prev_v : 0.0;
    const double o = in.proximity ? *in.proximity
                                  : (in.tau >= static_cast<double>(clockdyn::kEpochLimit) - params.overflow_margin ? 1.0 : 0.0);
    d.P_over = overflow_probability(w_o, {in.delta_hat, v, a, o});

    if (d.S > d.theta) d.reason |= kReasonScore;
    if (d.C_delta > params.eps_delta) d.reason |= kReasonDrift;
    if (d.P_over > params.eps_o) d.reason |= kReasonOverflow;
    d.fired = (d.reason & kReasonScore) && (d.reason & (kReasonDrift | kReasonOverflow));

    state.prev_delta_hat = in.delta_hat;
    state.prev_v = v;
    state.prev_tau = in.tau;
    ++state.step;
    return d;
}

StreamResult run_stream(const std::vector<StepInput>& stream, const DetectorParams& params,
                        const std::array<double, 4>& w_o, std::optional<std::int64_t> onset) {
    params.validate();
    if (stream.empty()) throw ValidationError("run_stream: empty stream");
    StreamResult r;
    DetectorState state;
    r.detections.reserve(stream.size());
    for (const auto& in : stream) {
        r.detections.push_back(decide_step(state, in, params, w_o));
        const auto& d = r.detections.back();
        if (!d.fired) continue;
        ++r.fired_count;
        if (onset && d.step >= *onset && !r.first_fire_after_onset) r.first_fire_after_onset = d.step;
    }
    return r;
}

void write_detection_log(std::ostream& out, int device, const std::vector<Detection>& detections) {
    for (const auto& d : detections) {
        const nlohmann::json j{{"device", device},       {"step", d.step},   {"fired", d.fired},
                               {"S", d.S},               {"theta", d.theta}, {"C_delta", d.C_delta},
                               {"P_over", d.P_over},     {"reason", reason_names(d.reason)}};
        out << j.dump() << '\n';
    }
}

std::vector<LoggedDetection> read_detection_log(std::istream& in) {
    std::vector<LoggedDetection> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            LoggedDetection l;
            l.device = j.at("device").get<int>();
            auto& d = l.detection;
            d.step = j.at("step").get<std::int64_t>();
            d.fired = j.at("fired").get<bool>();
            d.S = j.at("S").get<double>();
            d.theta = j.at("theta").get<double>();
            d.C_delta = j.at("C_delta").get<double>();
            d.P_over = j.at("P_over").get<double>();
            for (const auto& r : j.at("reason")) {
                const auto name = r.get<std::string>();
                if (name == "score")
                    d.reason |= kReasonScore;
                else if (name == "drift_consistency")
                    d.reason |= kReasonDrift;
                else if (name == "overflow")
                    d.reason |= kReasonOverflow;
                else
                    throw ValidationError("unknown reason '" + name + "'");
            }
            out.push_back(l);
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("detection log line " + std::to_string(lineno) + ": " + e.what());
        } catch (const ValidationError& e) {
            throw ValidationError("detection log line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace tg::detector
