#include "timeguard/clockdyn.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "timeguard/core/error.hpp"

namespace tg::clockdyn {

void ClockParams::validate() const {
    auto finite = [](double v) { return std::isfinite(v); };
    if (!finite(alpha) || !finite(sigma) || !finite(shock_prob) || !finite(shock_scale) || !finite(jitter_scale))
        throw ValidationError("clock params: non-finite value");
    if (!(alpha > 0.0 && alpha <= 1.0))
        throw ValidationError("clock params: alpha must lie in (0, 1], got " + std::to_string(alpha));
    if (sigma < 0.0 || shock_scale < 0.0 || jitter_scale < 0.0)
        throw ValidationError("clock params: scales must be >= 0");
    if (shock_prob < 0.0 || shock_prob > 1.0)
        throw ValidationError("clock params: shock_prob must lie in [0, 1]");
}

double ou_drift_step(double delta_prev, const ClockParams& params, double dt, double noise) {
    return params.alpha * delta_prev + params.sigma * std::sqrt(dt) * noise;
}

double offset_step(double eta_prev, const ClockParams& params, double uniform_draw, double normal_draw) {
    const double scale = is_shock(params, uniform_draw) ? params.shock_scale : params.jitter_scale;
    return eta_prev + scale * normal_draw;
}

int overflow_indicator(double tau_prev, std::int64_t T0) {
    return tau_prev >= static_cast<double>(T0) ? 1 : 0;
}

double compose_timestamp(double t, const ClockState& state, std::int64_t T0) {
    return t + state.delta + state.eta + static_cast<double>(state.overflow) * static_cast<double>(T0);
}

double distortion(double tau, double t) { return tau - t; }

double incremental_distortion(double psi_next, double psi) { return psi_next - psi; }

std::int32_t wrap32(std::int64_t seconds) {
    // Conversion of an out-of-range value to a signed type is modular since C++20.
    return static_cast<std::int32_t>(static_cast<std::uint32_t>(static_cast<std::uint64_t>(seconds)));
}

double advance(ClockState& state, double t, const ClockParams& params, const TimeConstants& constants,
               double drift_noise, double offset_uniform, double offset_normal) {
    state.delta = ou_drift_step(state.delta, params, constants.dt, drift_noise);
    state.eta = offset_step(state.eta, params, offset_uniform, offset_normal);
    state.overflow = std::max(state.overflow, overflow_indicator(state.tau_prev, constants.T0));
    const double tau = compose_timestamp(t, state, constants.T0);
    state.tau_prev = tau;
    return tau;
}

}  // namespace tg::clockdyn
