#include "timeguard/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "timeguard/core/error.hpp"
#include "timeguard/core/kernels.hpp"
#include "timeguard/core/rng.hpp"

namespace tg::datagen {

using clockdyn::ClockParams;
using clockdyn::ClockState;
using clockdyn::TimeConstants;

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
}

void PhysicalConfig::validate() const {
    for (double v : {base_period, voltage_low, voltage_high, energy_base, energy_amplitude, temp_alpha, temp_beta,
                     noise_scale})
        if (!std::isfinite(v)) throw ValidationError("physical config: non-finite value");
    if (n_features < 1) throw ValidationError("physical config: n_features must be >= 1");
    if (!(voltage_low < voltage_high)) throw ValidationError("physical config: voltage band low must be < high");
    if (!(base_period > 0.0)) throw ValidationError("physical config: base_period must be > 0");
    if (noise_scale < 0.0) throw ValidationError("physical config: noise_scale must be >= 0");
}

std::string to_string(ScenarioKind kind) {
    switch (kind) {
        case ScenarioKind::nominal: return "nominal";
        case ScenarioKind::drift_escalation: return "drift_escalation";
        case ScenarioKind::offset_shock: return "offset_shock";
        case ScenarioKind::epoch_overflow: return "epoch_overflow";
        case ScenarioKind::stealthy_drift: return "stealthy_drift";
    }
    return "?";
}

ScenarioKind scenario_from_string(const std::string& name) {
    for (auto k : {ScenarioKind::nominal, ScenarioKind::drift_escalation, ScenarioKind::offset_shock,
                   ScenarioKind::epoch_overflow, ScenarioKind::stealthy_drift})
        if (to_string(k) == name) return k;
    throw ValidationError("unknown scenario kind '" + name + "'");
}

void ScenarioSpec::validate(std::int64_t length) const {
    if (!std::isfinite(magnitude) || !std::isfinite(eps_t) || !std::isfinite(eps_d))
        throw ValidationError("scenario: non-finite parameter");
    if (onset < 0 || onset >= length)
        throw ValidationError("scenario: onset " + std::to_string(onset) + " outside trace of length " +
                              std::to_string(length));
    if (magnitude < 0.0) throw ValidationError("scenario: magnitude must be >= 0");
    if (kind == ScenarioKind::stealthy_drift && !(eps_t > 0.0 && eps_d > 0.0))
        throw ValidationError("scenario: stealthy_drift needs positive eps_t and eps_d");
}

Mat synth_physical(const PhysicalConfig& config, std::int64_t length, std::uint64_t seed) {
    config.validate();
    if (length <= 0) throw ValidationError("synth_physical: length must be > 0");
    auto rng = make_rng(seed, Stream::physical);
    const double phase = kTwoPi * uniform_draw(rng);
    const double v_mid = 0.5 * (config.voltage_low + config.voltage_high);
    const double v_amp = 0.3 * (config.voltage_high - config.voltage_low);
    const auto F = static_cast<std::size_t>(config.n_features);
    Mat out(static_cast<std::size_t>(length), F);
    for (std::int64_t s = 0; s < length; ++s) {
        const double angle = kTwoPi * static_cast<double>(s) / config.base_period + phase;
        // Fixed number of draws per step regardless of F keeps columns stable.
        const double n_energy = normal_draw(rng);
        const double n_voltage = normal_draw(rng);
        const double n_temp = normal_draw(rng);
        const double n_hum = normal_draw(rng);
        const double energy = config.energy_base + config.energy_amplitude * std::sin(angle) +
                              config.noise_scale * n_energy;
        const double voltage = std::clamp(v_mid + v_amp * std::sin(angle + 1.0) + 0.1 * config.noise_scale * n_voltage,
                                          config.voltage_low, config.voltage_high);
        const double temperature = config.temp_alpha * energy + config.temp_beta + 0.2 * config.noise_scale * n_temp;
        const double humidity = 55.0 + 5.0 * std::cos(angle) + config.noise_scale * n_hum;
        const double canonical[5] = {voltage, energy / voltage, temperature, humidity, energy};
        auto row = out.row(static_cast<std::size_t>(s));
        for (std::size_t f = 0; f < F; ++f) {
            if (f < 5) {
                row[f] = canonical[f];
            } else {
                // Additional channels: harmonics of the load cycle.
                const double h = static_cast<double>(f - 3);
                row[f] = std::sin(h * angle) + config.noise_scale * 0.1 * n_energy;
            }
        }
    }
    return out;
}

double overflow_start_time(std::int64_t onset, double dt) {
    // True time at step onset-1 sits half a step above T0, so tau crosses the
    // limit at onset-1 and the lagged indicator latches at onset.
    return static_cast<double>(clockdyn::kEpochLimit) - static_cast<double>(onset - 1) * dt + 0.5 * dt;
}

DiagnosticEmbedding diagnostic_embedding(std::span<const double> x, std::span<const double> d, const Mat& w_diag) {
    if (w_diag.rows != x.size() || w_diag.cols != d.size())
        throw ValidationError("diagnostic_embedding: W must be F x " + std::to_string(d.size()));
    DiagnosticEmbedding out;
    out.z.assign(x.begin(), x.end());
    for (std::size_t f = 0; f < x.size(); ++f)
        for (std::size_t k = 0; k < d.size(); ++k) out.z[f] += w_diag(f, k) * d[k];
    Mat g = kernels::matmul_tn(w_diag, w_diag);
    for (std::size_t k = 0; k < g.rows; ++k) g(k, k) -= 1.0;
    out.curvature = kernels::frobenius(g);
    return out;
}

Mat make_diagnostic_map(std::size_t n_features, std::uint64_t seed) {
    auto rng = make_rng(seed, Stream::diag);
    Mat w(n_features, kDriftDims);
    const double scale = 1.0 / std::sqrt(static_cast<double>(n_features));
    for (double& v : w.data) v = scale * normal_draw(rng);
    return w;
}

DeviceTrace build_device_trace(const Mat& phys, const ClockParams& clock, const ScenarioSpec& scenario,
                               const TimeConstants& constants, std::uint64_t seed, const TraceOptions& options) {
    if (phys.rows == 0 || phys.cols == 0) throw ValidationError("build_device_trace: empty physical matrix");
    if (!(constants.dt > 0.0)) throw ValidationError("build_device_trace: dt must be > 0");
    clock.validate();
    const auto length = static_cast<std::int64_t>(phys.rows);
    scenario.validate(length);

    DeviceTrace trace;
    trace.clock = clock;
    trace.scenario = scenario;
    trace.start_time = scenario.kind == ScenarioKind::epoch_overflow
                           ? overflow_start_time(scenario.onset, constants.dt)
                           : options.start_time;
    trace.rows.resize(phys.rows);

    auto rng = make_rng(seed, Stream::clock);
    const double dt = constants.dt;
    const bool stealthy = scenario.kind == ScenarioKind::stealthy_drift;
    const double step_cap_d = stealthy ? std::min(scenario.eps_d, scenario.eps_t) : 0.0;

    ClockState state;
    state.tau_prev = trace.start_time - dt;  // undistorted predecessor of step 0
    double ou = 0.0;                         // OU component of the drift
    double ramp = 0.0;                       // stealthy ramp component
    double psi_prev = 0.0;

    for (std::int64_t s = 0; s < length; ++s) {
        const double t_true = trace.true_time(s, dt);
        const bool after_onset = scenario.active() && s >= scenario.onset;

        // Draws are consumed identically in every scenario so paired runs
        // share their nominal noise.
        const double drift_noise = normal_draw(rng);
        const double offset_u = uniform_draw(rng);
        const double offset_n = normal_draw(rng);

        ClockParams step_params = clock;
        if (scenario.kind == ScenarioKind::drift_escalation && after_onset) step_params.sigma *= scenario.magnitude;

        const double delta_prev = state.delta;
        const double eta_prev = state.eta;
        ou = clockdyn::ou_drift_step(ou, step_params, dt, drift_noise);
        double delta = ou;
        double eta = clockdyn::offset_step(eta_prev, step_params, offset_u, offset_n);

        switch (scenario.kind) {
            case ScenarioKind::offset_shock:
                if (s == scenario.onset) eta += scenario.magnitude;
                break;
            case ScenarioKind::stealthy_drift: {
                if (after_onset) ramp += scenario.magnitude;
                delta = std::clamp(ou + ramp, delta_prev - step_cap_d, delta_prev + step_cap_d);
                const double d_delta = delta - delta_prev;
                eta = std::clamp(eta, eta_prev - scenario.eps_t - d_delta, eta_prev + scenario.eps_t - d_delta);
                break;
            }
            default: break;
        }

        state.delta = delta;
        state.eta = eta;
        state.overflow = std::max(state.overflow, clockdyn::overflow_indicator(state.tau_prev, constants.T0));
        const double tau = clockdyn::compose_timestamp(t_true, state, constants.T0);
        state.tau_prev = tau;

        TraceRow& row = trace.rows[static_cast<std::size_t>(s)];
        row.t = s;
        const auto xs = phys.row(static_cast<std::size_t>(s));
        row.x.assign(xs.begin(), xs.end());
        row.tau = tau;
        row.psi = clockdyn::distortion(tau, t_true);
        row.d = {dt + clockdyn::incremental_distortion(row.psi, psi_prev), state.delta, state.eta,
                 static_cast<double>(state.overflow)};
        psi_prev = row.psi;
        row.label = after_onset ? 1 : 0;
        if (!options.w_diag.empty()) row.k_diag = diagnostic_embedding(row.x, row.d, options.w_diag).curvature;
    }
    compute_time_features(trace.rows, dt);
    return trace;
}

void compute_time_features(std::vector<TraceRow>& rows, double dt) {
    for (std::size_t s = 0; s < rows.size(); ++s) {
        TraceRow& r = rows[s];
        r.time_features[kTimestampDrift] = r.psi;
        if (s == 0) {
            r.time_features[kDriftRate] = 0.0;
            r.time_features[kJitterMs] = 0.0;
        } else {
            const TraceRow& p = rows[s - 1];
            r.time_features[kDriftRate] = (r.d[1] - p.d[1]) / dt;
            r.time_features[kJitterMs] = std::abs((r.tau - p.tau) - dt) * 1000.0;
        }
        r.time_features[kNtpOffsetMs] = r.d[2] * 1000.0;
        r.time_features[kEpochOverflowFlag] = r.d[3];
    }
}

std::vector<ReportedSample> reindex_by_reported_time(const std::vector<TraceRow>& rows, TimeView view) {
    std::vector<ReportedSample> out;
    out.reserve(rows.size());
    for (const auto& r : rows) {
        double tau = r.tau;
        if (view == TimeView::wire) {
            const double whole = std::floor(r.tau);
            tau = static_cast<double>(clockdyn::wrap32(static_cast<std::int64_t>(whole))) + (r.tau - whole);
        }
        out.push_back({tau, r.t, r.x});
    }
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.tau < b.tau; });
    return out;
}

bool reported_order_monotone(const std::vector<ReportedSample>& samples) {
    for (std::size_t i = 1; i < samples.size(); ++i)
        if (samples[i].t < samples[i - 1].t) return false;
    return true;
}

WindowSet make_windows(const std::vector<DeviceTrace>& traces, std::int64_t window, std::int64_t stride) {
    if (window <= 0) throw ValidationError("make_windows: window must be > 0");
    if (stride <= 0) throw ValidationError("make_windows: stride must be > 0");
    WindowSet ws{window, stride, {}};
    for (std::size_t dev = 0; dev < traces.size(); ++dev) {
        const auto& rows = traces[dev].rows;
        const auto length = static_cast<std::int64_t>(rows.size());
        if (length < window)
            throw ValidationError("make_windows: trace of device " + std::to_string(traces[dev].device_id) +
                                  " is shorter than the window");
        // Prefix sum of labels makes the any-step rule O(1) per window.
        std::vector<int> prefix(rows.size() + 1, 0);
        for (std::size_t s = 0; s < rows.size(); ++s) prefix[s + 1] = prefix[s] + rows[s].label;
        for (std::int64_t start = 0; start + window <= length; start += stride) {
            const int positives = prefix[static_cast<std::size_t>(start + window)] - prefix[static_cast<std::size_t>(start)];
            ws.windows.push_back({dev, start, positives > 0 ? 1 : 0});
        }
    }
    return ws;
}

Mat window_matrix(const DeviceTrace& trace, std::int64_t start, std::int64_t window) {
    if (start < 0 || start + window > static_cast<std::int64_t>(trace.rows.size()))
        throw ValidationError("window_matrix: window out of range");
    const std::size_t F = trace.n_features();
    Mat m(static_cast<std::size_t>(window), F + kDriftDims + kTimeFeatures);
    for (std::int64_t w = 0; w < window; ++w) {
        const auto& r = trace.rows[static_cast<std::size_t>(start + w)];
        auto out = m.row(static_cast<std::size_t>(w));
        std::copy(r.x.begin(), r.x.end(), out.begin());
        std::copy(r.d.begin(), r.d.end(), out.begin() + static_cast<std::ptrdiff_t>(F));
        std::copy(r.time_features.begin(), r.time_features.end(),
                  out.begin() + static_cast<std::ptrdiff_t>(F + kDriftDims));
    }
    return m;
}

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

Split split_from_string(const std::string& name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    throw ValidationError("unknown split '" + name + "'");
}

std::array<std::size_t, 3> split_counts(std::size_t n, SplitFractions fractions) {
    if (n < 3) throw ValidationError("split_by_device: need at least 3 devices");
    const double f[3] = {fractions.train, fractions.val, fractions.test};
    const double total = f[0] + f[1] + f[2];
    if (!(total > 0.0) || f[0] < 0 || f[1] < 0 || f[2] < 0) throw ValidationError("split_by_device: bad fractions");
    std::array<std::size_t, 3> counts{};
    std::array<double, 3> rem{};
    std::size_t assigned = 0;
    for (int k = 0; k < 3; ++k) {
        const double ideal = static_cast<double>(n) * f[k] / total;
        counts[k] = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(ideal + 1e-9)));
        rem[k] = ideal - std::floor(ideal + 1e-9);
        assigned += counts[k];
    }
    // Largest remainder; ties favor the later split (test, then val).
    while (assigned < n) {
        int best = 2;
        for (int k = 1; k >= 0; --k)
            if (rem[k] > rem[best]) best = k;
        ++counts[best];
        rem[best] = -1.0;
        ++assigned;
    }
    while (assigned > n) {
        int best = 0;
        for (int k = 1; k < 3; ++k)
            if (counts[k] > counts[best]) best = k;
        --counts[best];
        --assigned;
    }
    return counts;
}

std::vector<Split> split_by_device(const std::vector<int>& device_ids, SplitFractions fractions, std::uint64_t seed) {
    const auto counts = split_counts(device_ids.size(), fractions);
    std::vector<std::size_t> order(device_ids.size());
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(seed, Stream::split);
    for (std::size_t i = order.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng() % i);
        std::swap(order[i - 1], order[j]);
    }
    std::vector<Split> out(device_ids.size(), Split::train);
    std::size_t pos = 0;
    for (std::size_t k = 0; k < counts[0]; ++k) out[order[pos++]] = Split::train;
    for (std::size_t k = 0; k < counts[1]; ++k) out[order[pos++]] = Split::val;
    for (std::size_t k = 0; k < counts[2]; ++k) out[order[pos++]] = Split::test;
    return out;
}

std::size_t NormStats::index_of(const std::string& column) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
        if (columns[i] == column) return i;
    throw ValidationError("normalization stats: no column '" + column + "'");
}

std::vector<std::string> continuous_columns(std::size_t n_features) {
    std::vector<std::string> cols;
    for (std::size_t f = 0; f < n_features; ++f) cols.push_back("x_" + std::to_string(f + 1));
    for (const char* c : {"dt", "delta", "eta", "timestamp_drift", "drift_rate", "jitter_ms", "ntp_offset_ms"})
        cols.emplace_back(c);
    return cols;
}

namespace {

// Continuous values of a row in continuous_columns() order.
void gather_continuous(const TraceRow& r, std::vector<double>& out) {
    out.clear();
    out.insert(out.end(), r.x.begin(), r.x.end());
    out.push_back(r.d[0]);
    out.push_back(r.d[1]);
    out.push_back(r.d[2]);
    for (std::size_t k = 0; k < kEpochOverflowFlag; ++k) out.push_back(r.time_features[k]);
}

void scatter_continuous(TraceRow& r, const std::vector<double>& v) {
    const std::size_t F = r.x.size();
    std::copy(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(F), r.x.begin());
    r.d[0] = v[F];
    r.d[1] = v[F + 1];
    r.d[2] = v[F + 2];
    for (std::size_t k = 0; k < kEpochOverflowFlag; ++k) r.time_features[k] = v[F + 3 + k];
}

}  // namespace

NormStats normalize_fit(const std::vector<const DeviceTrace*>& train) {
    if (train.empty() || train.front()->rows.empty()) throw ValidationError("normalize_fit: no training rows");
    const std::size_t F = train.front()->n_features();
    NormStats stats;
    stats.columns = continuous_columns(F);
    const std::size_t C = stats.columns.size();
    // Two-pass mean / population variance.
    std::vector<double> sum(C, 0.0), buf;
    double count = 0.0;
    for (const auto* tr : train)
        for (const auto& r : tr->rows) {
            if (r.x.size() != F) throw ValidationError("normalize_fit: inconsistent feature count");
            gather_continuous(r, buf);
            for (std::size_t c = 0; c < C; ++c) sum[c] += buf[c];
            count += 1.0;
        }
    stats.mean.resize(C);
    for (std::size_t c = 0; c < C; ++c) stats.mean[c] = sum[c] / count;
    std::vector<double> sq(C, 0.0);
    for (const auto* tr : train)
        for (const auto& r : tr->rows) {
            gather_continuous(r, buf);
            for (std::size_t c = 0; c < C; ++c) {
                const double e = buf[c] - stats.mean[c];
                sq[c] += e * e;
            }
        }
    stats.stddev.resize(C);
    for (std::size_t c = 0; c < C; ++c) stats.stddev[c] = std::sqrt(sq[c] / count);
    return stats;
}

std::vector<TraceRow> normalize_apply(const std::vector<TraceRow>& rows, const NormStats& stats) {
    std::vector<TraceRow> out = rows;
    std::vector<double> buf;
    for (auto& r : out) {
        gather_continuous(r, buf);
        if (buf.size() != stats.columns.size()) throw ValidationError("normalize_apply: column count mismatch");
        for (std::size_t c = 0; c < buf.size(); ++c) {
            const double sd = stats.stddev[c];
            buf[c] = sd > 0.0 ? (buf[c] - stats.mean[c]) / sd : buf[c] - stats.mean[c];
        }
        scatter_continuous(r, buf);
    }
    return out;
}

void DatasetConfig::validate() const {
    if (n_devices < 3) throw ValidationError("dataset: n_devices must be >= 3");
    if (length < 2) throw ValidationError("dataset: length must be >= 2");
    if (window <= 0 || window > length) throw ValidationError("dataset: window must lie in [1, length]");
    if (stride <= 0) throw ValidationError("dataset: stride must be > 0");
    if (perturbed_fraction < 0.0 || perturbed_fraction > 1.0)
        throw ValidationError("dataset: perturbed_fraction must lie in [0, 1]");
    if (scenarios.onset_min_fraction < 0.0 || scenarios.onset_max_fraction > 1.0 ||
        scenarios.onset_min_fraction > scenarios.onset_max_fraction)
        throw ValidationError("dataset: onset fractions must satisfy 0 <= min <= max <= 1");
    if (!(constants.dt > 0.0)) throw ValidationError("dataset: dt must be > 0");
    physical.validate();
}

std::vector<std::size_t> DatasetManifest::devices_in(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < devices.size(); ++i)
        if (devices[i].split == s) out.push_back(i);
    return out;
}

std::vector<ScenarioSpec> assign_scenarios(const std::vector<Split>& splits, const DatasetConfig& config) {
    std::vector<ScenarioSpec> out(splits.size());
    if (config.scenario_kinds.empty()) return out;
    auto rng = make_rng(config.seed, Stream::scenario);
    const std::size_t n_kinds = config.scenario_kinds.size();
    std::size_t kind_cursor = static_cast<std::size_t>(rng() % n_kinds);

    for (Split split : {Split::train, Split::val, Split::test}) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < splits.size(); ++i)
            if (splits[i] == split) members.push_back(i);
        if (members.empty()) continue;
        auto n_perturbed = static_cast<std::size_t>(std::llround(config.perturbed_fraction * static_cast<double>(members.size())));
        if (config.perturbed_fraction > 0.0) {
            if (split == Split::test) n_perturbed = std::max<std::size_t>(n_perturbed, 1);
            if (split == Split::train) n_perturbed = std::max(n_perturbed, std::min(n_kinds, members.size() - 1));
        }
        n_perturbed = std::min(n_perturbed, members.size());
        for (std::size_t i = members.size(); i > 1; --i) std::swap(members[i - 1], members[rng() % i]);
        // The training split walks the kinds from 0 so it covers all of them.
        std::size_t cursor = split == Split::train ? 0 : kind_cursor;
        for (std::size_t k = 0; k < n_perturbed; ++k) {
            ScenarioSpec& spec = out[members[k]];
            spec.kind = config.scenario_kinds[cursor % n_kinds];
            ++cursor;
            const auto lo = static_cast<std::int64_t>(config.scenarios.onset_min_fraction * static_cast<double>(config.length));
            const auto hi = static_cast<std::int64_t>(config.scenarios.onset_max_fraction * static_cast<double>(config.length));
            spec.onset = std::clamp<std::int64_t>(lo + static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(hi - lo + 1)),
                                                  1, config.length - 1);
            switch (spec.kind) {
                case ScenarioKind::drift_escalation: spec.magnitude = config.scenarios.drift_escalation_magnitude; break;
                case ScenarioKind::offset_shock: spec.magnitude = config.scenarios.offset_shock_magnitude; break;
                case ScenarioKind::stealthy_drift:
                    spec.magnitude = config.scenarios.stealthy_ramp;
                    spec.eps_t = config.scenarios.stealthy_eps_t;
                    spec.eps_d = config.scenarios.stealthy_eps_d;
                    break;
                default: break;
            }
        }
        if (split != Split::train) kind_cursor = cursor;
    }
    return out;
}

ClockParams draw_clock_params(const ClockRanges& ranges, std::uint64_t seed, int device_id) {
    auto rng = make_rng(seed, Stream::clock, 1000000u + static_cast<std::uint64_t>(device_id));
    ClockParams p;
    p.alpha = ranges.alpha_min + (ranges.alpha_max - ranges.alpha_min) * uniform_draw(rng);
    p.sigma = ranges.sigma_min + (ranges.sigma_max - ranges.sigma_min) * uniform_draw(rng);
    p.shock_prob = ranges.shock_prob;
    p.shock_scale = ranges.shock_scale;
    p.jitter_scale = ranges.jitter_scale;
    return p;
}

Dataset generate_dataset(const DatasetConfig& config, Exec exec) {
    config.validate();
    Dataset ds;
    auto& m = ds.manifest;
    m.seed = config.seed;
    m.n_devices = config.n_devices;
    m.length = config.length;
    m.window = config.window;
    m.stride = config.stride;
    m.n_features = config.physical.n_features;
    m.dt = config.constants.dt;

    std::vector<int> ids(static_cast<std::size_t>(config.n_devices));
    std::iota(ids.begin(), ids.end(), 0);
    const auto splits = split_by_device(ids, config.fractions, config.seed);
    const auto scenarios = assign_scenarios(splits, config);

    m.devices.resize(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        auto& e = m.devices[i];
        e.device_id = ids[i];
        e.split = splits[i];
        e.scenario = scenarios[i];
        e.clock = draw_clock_params(config.clock, config.seed, ids[i]);
        e.start_time = e.scenario.kind == ScenarioKind::epoch_overflow
                           ? overflow_start_time(e.scenario.onset, config.constants.dt)
                           : config.start_time;
    }

    const Mat w_diag = make_diagnostic_map(static_cast<std::size_t>(config.physical.n_features), config.seed);
    ds.traces.resize(ids.size());
    for_each_index(ids.size(), exec, [&](std::size_t i) {
        const auto& e = m.devices[i];
        // Per-device seeds: the device id selects the substream.
        const std::uint64_t dev_seed = config.seed * 1000003ULL + static_cast<std::uint64_t>(e.device_id);
        const Mat phys = synth_physical(config.physical, config.length, dev_seed);
        TraceOptions opts{config.start_time, w_diag};
        DeviceTrace tr = build_device_trace(phys, e.clock, e.scenario, config.constants, dev_seed, opts);
        tr.device_id = e.device_id;
        ds.traces[i] = std::move(tr);
    });

    GraphSpec gspec = config.graph;
    gspec.seed = config.seed;
    if (gspec.topology == Topology::k_nearest) gspec.k = std::min(gspec.k, config.n_devices - 1);
    ds.graph = build_graph(config.n_devices, gspec);

    std::vector<const DeviceTrace*> train;
    for (std::size_t i : m.devices_in(Split::train)) train.push_back(&ds.traces[i]);
    m.normalization = normalize_fit(train);
    return ds;
}

}  // namespace tg::datagen
