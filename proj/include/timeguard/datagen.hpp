#pragma once

// Drift-aware dataset construction: nominal physical telemetry, clock
// distortion scenarios, time-aware features, device graph, windows, splits,
// normalization and (de)serialization.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "timeguard/clockdyn.hpp"
#include "timeguard/core/exec.hpp"
#include "timeguard/core/mat.hpp"
#include "timeguard/graph.hpp"

namespace tg::datagen {

inline constexpr std::size_t kDriftDims = 4;     // [dt_t, delta, eta, o]
inline constexpr std::size_t kTimeFeatures = 5;  // timestamp_drift .. epoch_overflow_flag
inline constexpr int kFormatVersion = 1;

/// Default reference epoch for devices that are not seeded near the rollover
/// (2023-11-14T22:13:20Z).
inline constexpr double kDefaultStartTime = 1.7e9;

struct PhysicalConfig {
    int n_features = 5;          // voltage, current, temperature, humidity, power
    double base_period = 288.0;  // steps per load cycle
    double voltage_low = 218.0;
    double voltage_high = 223.0;
    double energy_base = 50.0;
    double energy_amplitude = 20.0;
    double temp_alpha = 0.1;
    double temp_beta = 20.0;
    double noise_scale = 0.5;

    void validate() const;
};

enum class ScenarioKind { nominal, drift_escalation, offset_shock, epoch_overflow, stealthy_drift };

std::string to_string(ScenarioKind kind);
ScenarioKind scenario_from_string(const std::string& name);

struct ScenarioSpec {
    ScenarioKind kind = ScenarioKind::nominal;
    std::int64_t onset = 0;
    double magnitude = 0.0;
    double eps_t = 0.005;  // cap on |increment of distortion| per step (stealthy only)
    double eps_d = 0.002;  // cap on |increment of drift| per step (stealthy only)

    void validate(std::int64_t length) const;
    bool active() const { return kind != ScenarioKind::nominal; }
};

enum TimeFeature : std::size_t {
    kTimestampDrift = 0,
    kDriftRate = 1,
    kJitterMs = 2,
    kNtpOffsetMs = 3,
    kEpochOverflowFlag = 4,
};

struct TraceRow {
    std::int64_t t = 0;                       // step index
    std::vector<double> x;                    // physical features
    std::array<double, kDriftDims> d{};       // [dt_t, delta, eta, o]
    double tau = 0.0;                         // reported timestamp (internal view)
    double psi = 0.0;                         // tau - true time
    std::array<double, kTimeFeatures> time_features{};
    int label = 0;
    double k_diag = 0.0;

    friend bool operator==(const TraceRow&, const TraceRow&) = default;
};

struct DeviceTrace {
    int device_id = 0;
    double start_time = kDefaultStartTime;  // true time of step 0
    clockdyn::ClockParams clock;
    ScenarioSpec scenario;
    std::vector<TraceRow> rows;

    double true_time(std::int64_t step, double dt) const { return start_time + static_cast<double>(step) * dt; }
    std::size_t n_features() const { return rows.empty() ? 0 : rows.front().x.size(); }
};

/// Periodic base load plus noise. Columns in order: voltage, current,
/// temperature, humidity, power (truncated or extended to n_features).
Mat synth_physical(const PhysicalConfig& config, std::int64_t length, std::uint64_t seed);

/// Start time that makes an epoch_overflow scenario latch the overflow
/// indicator exactly at `onset`.
double overflow_start_time(std::int64_t onset, double dt);

struct TraceOptions {
    double start_time = kDefaultStartTime;  // ignored for epoch_overflow
    Mat w_diag;                             // F x 4 diagnostic map; empty -> k_diag = 0
};

/// Runs the drift-aware construction for one device: drift, offset,
/// overflow, timestamp, drift inputs, diagnostics, distortion, labels and
/// time-aware features.
DeviceTrace build_device_trace(const Mat& phys, const clockdyn::ClockParams& clock, const ScenarioSpec& scenario,
                               const clockdyn::TimeConstants& constants, std::uint64_t seed,
                               const TraceOptions& options = {});

/// Fills the time-aware features from tau, delta, eta and the overflow flag.
/// Step 0 has no predecessor: drift_rate and jitter_ms are 0 there.
void compute_time_features(std::vector<TraceRow>& rows, double dt);

struct DiagnosticEmbedding {
    std::vector<double> z;
    double curvature = 0.0;
};

/// z = x + W d and the Frobenius deviation of W^T W from the identity.
DiagnosticEmbedding diagnostic_embedding(std::span<const double> x, std::span<const double> d, const Mat& w_diag);

/// Seed-derived F x 4 diagnostic map.
Mat make_diagnostic_map(std::size_t n_features, std::uint64_t seed);

enum class TimeView { internal, wire };

struct ReportedSample {
    double tau = 0.0;
    std::int64_t t = 0;
    std::vector<double> x;
};

/// Samples keyed and ordered by reported time. The wire view applies the
/// signed 32-bit wraparound to the integer seconds.
std::vector<ReportedSample> reindex_by_reported_time(const std::vector<TraceRow>& rows, TimeView view = TimeView::internal);

/// True when ordering by reported time equals ordering by step.
bool reported_order_monotone(const std::vector<ReportedSample>& samples);

struct WindowRef {
    std::size_t device = 0;  // index into the trace list
    std::int64_t start = 0;
    int label = 0;           // 1 iff any contained step is labeled
};

struct WindowSet {
    std::int64_t window = 60;
    std::int64_t stride = 1;
    std::vector<WindowRef> windows;
};

WindowSet make_windows(const std::vector<DeviceTrace>& traces, std::int64_t window = 60, std::int64_t stride = 1);

/// window x (F + 4 + 5) matrix of [x | d | time features].
Mat window_matrix(const DeviceTrace& trace, std::int64_t start, std::int64_t window);

enum class Split { train, val, test };
std::string to_string(Split s);
Split split_from_string(const std::string& name);

struct SplitFractions {
    double train = 0.7;
    double val = 0.1;
    double test = 0.2;
};

/// Deterministic shuffled partition of devices; returns one Split per input id.
std::vector<Split> split_by_device(const std::vector<int>& device_ids, SplitFractions fractions, std::uint64_t seed);

/// Per-split device counts used by split_by_device.
std::array<std::size_t, 3> split_counts(std::size_t n, SplitFractions fractions);

struct NormStats {
    std::vector<std::string> columns;
    std::vector<double> mean;
    std::vector<double> stddev;

    std::size_t index_of(const std::string& column) const;
    friend bool operator==(const NormStats&, const NormStats&) = default;
};

/// Names of the continuous columns that are z-scored, for F physical features.
std::vector<std::string> continuous_columns(std::size_t n_features);

/// Population mean / std of every continuous column over the given traces.
NormStats normalize_fit(const std::vector<const DeviceTrace*>& train);

/// z-scores the continuous columns; a zero std subtracts the mean only.
/// Overflow indicators and labels are left untouched.
std::vector<TraceRow> normalize_apply(const std::vector<TraceRow>& rows, const NormStats& stats);

struct ScenarioDefaults {
    double drift_escalation_magnitude = 25.0;
    double offset_shock_magnitude = 2.0;
    double stealthy_ramp = 0.002;
    double stealthy_eps_t = 0.005;
    double stealthy_eps_d = 0.002;
    double onset_min_fraction = 0.3;
    double onset_max_fraction = 0.7;
};

struct ClockRanges {
    double alpha_min = 0.98, alpha_max = 0.999;
    double sigma_min = 5e-4, sigma_max = 1.5e-3;
    double shock_prob = 1e-3;
    double shock_scale = 0.02;
    double jitter_scale = 5e-4;
};

struct DatasetConfig {
    std::uint64_t seed = 1;
    int n_devices = 12;
    std::int64_t length = 5000;
    std::int64_t window = 60;
    std::int64_t stride = 30;
    double perturbed_fraction = 0.25;
    std::vector<ScenarioKind> scenario_kinds{ScenarioKind::offset_shock, ScenarioKind::epoch_overflow,
                                             ScenarioKind::drift_escalation};
    ScenarioDefaults scenarios;
    ClockRanges clock;
    PhysicalConfig physical;
    clockdyn::TimeConstants constants;
    double start_time = kDefaultStartTime;
    SplitFractions fractions;
    GraphSpec graph;

    void validate() const;
};

struct DeviceEntry {
    int device_id = 0;
    Split split = Split::train;
    ScenarioSpec scenario;
    clockdyn::ClockParams clock;
    double start_time = kDefaultStartTime;
};

struct DatasetManifest {
    int format_version = kFormatVersion;
    std::uint64_t seed = 0;
    int n_devices = 0;
    std::int64_t length = 0;
    std::int64_t window = 60;
    std::int64_t stride = 30;
    int n_features = 5;
    double dt = 1.0;
    std::vector<DeviceEntry> devices;
    NormStats normalization;

    std::vector<std::size_t> devices_in(Split s) const;
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<DeviceTrace> traces;  // indexed like manifest.devices
    DeviceGraph graph;
};

/// Picks a stratified scenario assignment per split: each split perturbs
/// round(fraction * size) devices, the test split at least one, and the
/// training split covers every configured scenario kind when it can.
std::vector<ScenarioSpec> assign_scenarios(const std::vector<Split>& splits, const DatasetConfig& config);

/// Per-device heterogeneous clock parameters drawn from the configured ranges.
clockdyn::ClockParams draw_clock_params(const ClockRanges& ranges, std::uint64_t seed, int device_id);

/// End-to-end construction. Devices are independent and each uses its own RNG
/// substreams, so serial and parallel generation are byte-identical.
Dataset generate_dataset(const DatasetConfig& config, Exec exec = Exec::serial);

/// Writes manifest.json and traces.csv into `dir`.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

/// Traces CSV header for F physical features.
std::string traces_csv_header(std::size_t n_features);

struct ExternalCsvSpec {
    std::string timestamp_column;
    std::vector<std::string> feature_columns;
    std::optional<std::string> device_column;
    std::optional<std::string> label_column;
    clockdyn::ClockParams overlay;  // clock applied on top of the ingested time base
    ScenarioSpec scenario;
    std::uint64_t seed = 1;
};

/// Ingests external telemetry and synthesizes drift inputs with the given
/// clock overlay. The timestamp column provides the true time base.
std::vector<DeviceTrace> load_external_csv(const std::filesystem::path& path, const ExternalCsvSpec& spec);

}  // namespace tg::datagen
