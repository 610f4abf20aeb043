#pragma once

// Offline evaluation pipeline: causal streaming inference, window-level
// classification, detector replay with delays and false alarms, scenario
// probe streams and the seed x variant benchmark.

#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "timeguard/datagen.hpp"
#include "timeguard/detector.hpp"
#include "timeguard/stats.hpp"
#include "timeguard/stgat.hpp"

namespace tg::eval {

enum class Variant { full, no_curvature, no_gat, no_drift_embedding };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& name);
inline constexpr Variant kAllVariants[] = {Variant::full, Variant::no_curvature, Variant::no_gat,
                                           Variant::no_drift_embedding};

/// Switches off the component named by the variant.
stgat::HyperParams apply_variant(stgat::HyperParams hyper, Variant v);

/// Reported time as it appears on a 32-bit wire: signed wraparound of the
/// integer seconds, fraction kept.
double wire_time(double tau);

struct StepOutput {
    double p_hat = 0.0;
    double delta_hat = 0.0;
};

/// Per-step causal outputs: step t comes from the last row of the window
/// ending at t. Steps before window - 1 are not ready and hold zeros.
struct CausalOutput {
    std::int64_t first_ready = 0;
    std::vector<StepOutput> steps;
};

std::vector<CausalOutput> causal_predict(const std::vector<const stgat::DeviceSeries*>& series,
                                         const DeviceGraph& graph, std::int64_t window,
                                         const stgat::ModelParams& params, const stgat::HyperParams& hyper,
                                         Exec exec = Exec::serial);

/// Sliding-window inference over samples pushed one at a time per node.
class OnlinePredictor {
public:
    OnlinePredictor(const stgat::ModelParams& params, const stgat::HyperParams& hyper, DeviceGraph graph,
                    std::int64_t window);

    /// Appends one normalized step (x, d) and its proximity flag for `node`.
    void push(int node, std::span<const double> x, std::span<const double> d, double proximity);
    bool ready(int node) const;

    /// Runs the model on the current windows of `nodes` (graph induced on
    /// them, in the given order) and returns each node's last-step output.
    std::vector<StepOutput> predict(const std::vector<int>& nodes, Exec exec = Exec::serial) const;

private:
    struct Buffer {
        std::deque<std::vector<double>> x, d;
        std::deque<double> prox;
    };
    const stgat::ModelParams* params_;
    stgat::HyperParams hyper_;
    DeviceGraph graph_;
    std::int64_t window_;
    std::vector<Buffer> buffers_;
};

/// Detector inputs for the ready steps of one series (wire-view tau,
/// proximity from the internal view).
std::vector<detector::StepInput> detector_inputs(const stgat::DeviceSeries& series, const CausalOutput& out);

struct WindowScores {
    std::vector<int> labels;
    std::vector<double> scores;  // max p_hat over the window
    std::vector<int> predictions;
};

/// One forward pass per window start (stride apart) over all series together.
WindowScores classify_windows(const std::vector<const stgat::DeviceSeries*>& series, const DeviceGraph& graph,
                              std::int64_t window, std::int64_t stride, const stgat::ModelParams& params,
                              const stgat::HyperParams& hyper, double threshold, Exec exec = Exec::serial);

/// One perturbed device (index 0) plus nominal companions, drawn from the
/// dataset configuration's ranges under its own seed substream.
std::vector<datagen::DeviceTrace> make_probe_group(const datagen::DatasetConfig& config, datagen::ScenarioKind kind,
                                                   int group, std::int64_t length, int group_size = 3);

struct DelayRecord {
    std::string source;  // "test" or "probe"
    int device_id = 0;
    datagen::ScenarioKind kind = datagen::ScenarioKind::nominal;
    std::int64_t onset = 0;
    std::int64_t length = 0;
    std::optional<std::int64_t> first_fire;

    /// Steps from onset to the first fire; misses count up to the stream end.
    double censored_delay() const;
};

struct EvalOptions {
    std::vector<Variant> variants{Variant::full};
    std::vector<std::uint64_t> seeds{1};
    detector::DetectorParams detector;
    double window_threshold = 0.5;
    int probe_groups = 2;
    std::int64_t probe_length = 600;
    std::vector<datagen::ScenarioKind> probe_kinds{datagen::ScenarioKind::epoch_overflow,
                                                   datagen::ScenarioKind::stealthy_drift};
    Exec exec = Exec::parallel;
};

struct RunResult {
    std::uint64_t seed = 0;
    Variant variant = Variant::full;
    stats::MetricReport window;
    std::vector<DelayRecord> delays;
    std::int64_t clean_steps = 0;
    std::int64_t clean_fires = 0;
    std::vector<double> epoch_loss;
    double train_seconds = 0.0;
    // Per-step detector scores for score-distribution plots.
    std::vector<double> clean_scores, attack_scores;

    double false_alarm_rate() const;
    /// Mean censored delay over records of `kind`; NaN without records.
    double mean_delay(datagen::ScenarioKind kind) const;
    /// Mean censored delay over every perturbed record.
    double mean_delay() const;
};

/// Evaluates a trained model on a generated dataset (test split) plus the
/// configured probe groups.
RunResult evaluate_model(const datagen::Dataset& dataset, const datagen::DatasetConfig& config,
                         const stgat::ModelParams& params, const stgat::HyperParams& hyper,
                         const EvalOptions& options);

/// Generate, train and evaluate for one (seed, variant).
RunResult run_one(const datagen::DatasetConfig& config, const stgat::HyperParams& hyper, std::uint64_t seed,
                  Variant variant, const EvalOptions& options);

std::vector<RunResult> run_benchmark(const datagen::DatasetConfig& config, const stgat::HyperParams& hyper,
                                     const EvalOptions& options);

nlohmann::json to_json(const RunResult& r);
RunResult run_result_from_json(const nlohmann::json& j);

}  // namespace tg::eval
