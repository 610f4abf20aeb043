#pragma once

// Device clock dynamics: drift, offset shocks, epoch overflow and the
// reported-timestamp composition. All operations are pure; randomness is
// supplied by the caller as explicit draws.

#include <cstdint>

namespace tg::clockdyn {

/// 2^31 seconds: the first value a signed 32-bit Unix timestamp cannot hold.
inline constexpr std::int64_t kEpochLimit = 2147483648LL;

struct TimeConstants {
    std::int64_t T0 = kEpochLimit;
    double dt = 1.0;  ///< nominal sampling interval, seconds
};

struct ClockParams {
    double alpha = 0.99;         ///< drift mean reversion, (0, 1]
    double sigma = 1e-3;         ///< drift diffusion, s / sqrt(s)
    double shock_prob = 0.0;     ///< per-step probability of a large offset shock
    double shock_scale = 0.0;    ///< std-dev of shock magnitude, s
    double jitter_scale = 0.0;   ///< std-dev of per-step small offset noise, s

    /// Throws ValidationError when a field is out of range or non-finite.
    void validate() const;
};

struct ClockState {
    double delta = 0.0;     ///< accumulated drift
    double eta = 0.0;       ///< accumulated offset
    int overflow = 0;       ///< latched overflow indicator
    double tau_prev = 0.0;  ///< previously composed timestamp
};

/// Euler-Maruyama step of the Ornstein-Uhlenbeck drift:
/// alpha * delta_prev + sigma * sqrt(dt) * noise.
double ou_drift_step(double delta_prev, const ClockParams& params, double dt, double noise);

/// Offset random walk. A shock of `shock_scale * normal_draw` fires when
/// `uniform_draw < shock_prob`; otherwise the jitter regime applies.
double offset_step(double eta_prev, const ClockParams& params, double uniform_draw, double normal_draw);

/// Whether a step would be drawn from the shock regime for this uniform draw.
inline bool is_shock(const ClockParams& params, double uniform_draw) {
    return uniform_draw < params.shock_prob;
}

/// 1 iff tau_prev >= T0.
int overflow_indicator(double tau_prev, std::int64_t T0 = kEpochLimit);

/// tau = t + delta + eta + overflow * T0
double compose_timestamp(double t, const ClockState& state, std::int64_t T0 = kEpochLimit);

/// Psi = tau - t
double distortion(double tau, double t);

/// Psi(t + dt) - Psi(t)
double incremental_distortion(double psi_next, double psi);

/// Two's-complement reduction of a second count into [-2^31, 2^31 - 1],
/// the value a signed 32-bit time field carries on the wire.
std::int32_t wrap32(std::int64_t seconds);

/// Advances `state` by one step in the order drift, offset, overflow,
/// timestamp. Overflow latches: once set it stays set. Returns the new tau.
double advance(ClockState& state, double t, const ClockParams& params, const TimeConstants& constants,
               double drift_noise, double offset_uniform, double offset_normal);

}  // namespace tg::clockdyn
