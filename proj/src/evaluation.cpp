#include "timeguard/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "timeguard/clockdyn.hpp"
#include "timeguard/core/error.hpp"
#include "timeguard/core/rng.hpp"

namespace tg::eval {

using datagen::ScenarioKind;
using stgat::DeviceSeries;

std::string to_string(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::no_curvature: return "no_curvature";
        case Variant::no_gat: return "no_gat";
        case Variant::no_drift_embedding: return "no_drift_embedding";
    }
    return "full";
}

Variant variant_from_string(const std::string& name) {
    for (Variant v : kAllVariants)
        if (to_string(v) == name) return v;
    throw ValidationError("unknown variant '" + name + "'");
}

stgat::HyperParams apply_variant(stgat::HyperParams hyper, Variant v) {
    switch (v) {
        case Variant::full: break;
        case Variant::no_curvature: hyper.use_curvature_loss = false; break;
        case Variant::no_gat: hyper.use_graph_attention = false; break;
        case Variant::no_drift_embedding: hyper.use_drift_embedding = false; break;
    }
    return hyper;
}

double wire_time(double tau) {
    const double whole = std::floor(tau);
    return static_cast<double>(clockdyn::wrap32(static_cast<std::int64_t>(whole))) + (tau - whole);
}

// ---- causal inference ------------------------------------------------------------

std::vector<CausalOutput> causal_predict(const std::vector<const DeviceSeries*>& series, const DeviceGraph& graph,
                                         std::int64_t window, const stgat::ModelParams& params,
                                         const stgat::HyperParams& hyper, Exec exec) {
    if (series.empty()) return {};
    const auto length = static_cast<std::int64_t>(series.front()->all.steps());
    for (const auto* s : series)
        if (static_cast<std::int64_t>(s->all.steps()) != length)
            throw ValidationError("causal_predict: series differ in length");
    if (window <= 0 || window > length) throw ValidationError("causal_predict: window must lie in [1, length]");

    std::vector<CausalOutput> out(series.size());
    for (auto& o : out) {
        o.first_ready = window - 1;
        o.steps.resize(static_cast<std::size_t>(length));
    }
    const auto last = static_cast<std::size_t>(window - 1);
    for (std::int64_t t = window - 1; t < length; ++t) {
        const stgat::Batch b = stgat::make_batch(series, t - window + 1, window, graph);
        const auto f = stgat::forward(b, params, hyper, exec);
        for (std::size_t n = 0; n < series.size(); ++n)
            out[n].steps[static_cast<std::size_t>(t)] = {f.devices[n].p_hat[last], f.devices[n].delta_hat[last]};
    }
    return out;
}

OnlinePredictor::OnlinePredictor(const stgat::ModelParams& params, const stgat::HyperParams& hyper,
                                 DeviceGraph graph, std::int64_t window)
    : params_(&params), hyper_(hyper), graph_(std::move(graph)), window_(window) {
    graph_.validate();
    if (window_ <= 0) throw ValidationError("online predictor: window must be > 0");
    buffers_.resize(static_cast<std::size_t>(graph_.n_nodes));
}

void OnlinePredictor::push(int node, std::span<const double> x, std::span<const double> d, double proximity) {
    if (node < 0 || node >= graph_.n_nodes) throw ValidationError("online predictor: node out of range");
    if (x.size() != params_->n_features() || d.size() != datagen::kDriftDims)
        throw ValidationError("online predictor: sample has the wrong width");
    auto& b = buffers_[static_cast<std::size_t>(node)];
    b.x.emplace_back(x.begin(), x.end());
    b.d.emplace_back(d.begin(), d.end());
    b.prox.push_back(proximity);
    if (static_cast<std::int64_t>(b.x.size()) > window_) {
        b.x.pop_front();
        b.d.pop_front();
        b.prox.pop_front();
    }
}

bool OnlinePredictor::ready(int node) const {
    return node >= 0 && node < graph_.n_nodes &&
           static_cast<std::int64_t>(buffers_[static_cast<std::size_t>(node)].x.size()) == window_;
}

std::vector<StepOutput> OnlinePredictor::predict(const std::vector<int>& nodes, Exec exec) const {
    if (nodes.empty()) return {};
    stgat::Batch batch;
    batch.graph = graph_.induced(nodes);
    const auto T = static_cast<std::size_t>(window_);
    const std::size_t F = params_->n_features();
    for (int n : nodes) {
        if (!ready(n)) throw ValidationError("online predictor: node " + std::to_string(n) + " window not filled");
        const auto& b = buffers_[static_cast<std::size_t>(n)];
        stgat::DeviceWindow w;
        w.x = Mat(T, F);
        w.d = Mat(T, datagen::kDriftDims);
        for (std::size_t t = 0; t < T; ++t) {
            std::copy(b.x[t].begin(), b.x[t].end(), w.x.row(t).begin());
            std::copy(b.d[t].begin(), b.d[t].end(), w.d.row(t).begin());
        }
        w.labels.assign(T, 0);
        w.delta.assign(T, 0.0);
        w.prox.assign(b.prox.begin(), b.prox.end());
        w.over_label.assign(T, 0);
        batch.devices.push_back(std::move(w));
    }
    const auto f = stgat::forward(batch, *params_, hyper_, exec);
    std::vector<StepOutput> out;
    for (const auto& o : f.devices) out.push_back({o.p_hat[T - 1], o.delta_hat[T - 1]});
    return out;
}

std::vector<detector::StepInput> detector_inputs(const DeviceSeries& series, const CausalOutput& out) {
    std::vector<detector::StepInput> in;
    for (std::size_t t = static_cast<std::size_t>(out.first_ready); t < out.steps.size(); ++t)
        in.push_back({out.steps[t].p_hat, out.steps[t].delta_hat, wire_time(series.tau[t]), series.all.prox[t]});
    return in;
}

WindowScores classify_windows(const std::vector<const DeviceSeries*>& series, const DeviceGraph& graph,
                              std::int64_t window, std::int64_t stride, const stgat::ModelParams& params,
                              const stgat::HyperParams& hyper, double threshold, Exec exec) {
    if (series.empty()) throw ValidationError("classify_windows: no series");
    if (window <= 0 || stride <= 0) throw ValidationError("classify_windows: window and stride must be > 0");
    const auto length = static_cast<std::int64_t>(series.front()->all.steps());
    WindowScores ws;
    for (std::int64_t start = 0; start + window <= length; start += stride) {
        const stgat::Batch b = stgat::make_batch(series, start, window, graph);
        const auto f = stgat::forward(b, params, hyper, exec);
        for (std::size_t n = 0; n < series.size(); ++n) {
            const auto& labels = b.devices[n].labels;
            const auto& p = f.devices[n].p_hat;
            ws.labels.push_back(std::any_of(labels.begin(), labels.end(), [](int l) { return l == 1; }) ? 1 : 0);
            ws.scores.push_back(*std::max_element(p.begin(), p.end()));
            ws.predictions.push_back(ws.scores.back() > threshold ? 1 : 0);
        }
    }
    return ws;
}

// ---- probes ----------------------------------------------------------------------

std::vector<datagen::DeviceTrace> make_probe_group(const datagen::DatasetConfig& config, ScenarioKind kind, int group,
                                                   std::int64_t length, int group_size) {
    if (group_size < 1) throw ValidationError("probe group: size must be >= 1");
    if (length <= config.window) throw ValidationError("probe group: length must exceed the window");
    const int base = 100000 + static_cast<int>(kind) * 10000 + group * group_size;
    auto rng = make_rng(config.seed, Stream::scenario, static_cast<std::uint64_t>(base));

    datagen::ScenarioSpec spec;
    spec.kind = kind;
    const auto lo = std::max<std::int64_t>(
        config.window, static_cast<std::int64_t>(config.scenarios.onset_min_fraction * static_cast<double>(length)));
    const auto hi = std::max<std::int64_t>(
        lo, static_cast<std::int64_t>(config.scenarios.onset_max_fraction * static_cast<double>(length)));
    spec.onset = std::min<std::int64_t>(lo + static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(hi - lo + 1)),
                                        length - 1);
    switch (kind) {
        case ScenarioKind::drift_escalation: spec.magnitude = config.scenarios.drift_escalation_magnitude; break;
        case ScenarioKind::offset_shock: spec.magnitude = config.scenarios.offset_shock_magnitude; break;
        case ScenarioKind::stealthy_drift:
            spec.magnitude = config.scenarios.stealthy_ramp;
            spec.eps_t = config.scenarios.stealthy_eps_t;
            spec.eps_d = config.scenarios.stealthy_eps_d;
            break;
        default: break;
    }

    std::vector<datagen::DeviceTrace> out;
    for (int k = 0; k < group_size; ++k) {
        const int id = base + k;
        const std::uint64_t dev_seed = config.seed * 1000003ULL + static_cast<std::uint64_t>(id);
        const Mat phys = datagen::synth_physical(config.physical, length, dev_seed);
        const auto clock = datagen::draw_clock_params(config.clock, config.seed, id);
        datagen::TraceOptions opts;
        opts.start_time = config.start_time;
        auto tr = datagen::build_device_trace(phys, clock, k == 0 ? spec : datagen::ScenarioSpec{}, config.constants,
                                              dev_seed, opts);
        tr.device_id = id;
        out.push_back(std::move(tr));
    }
    return out;
}

// ---- run results -------------------------------------------------------------------

double DelayRecord::censored_delay() const {
    return static_cast<double>((first_fire ? *first_fire : length) - onset);
}

double RunResult::false_alarm_rate() const {
    return clean_steps ? static_cast<double>(clean_fires) / static_cast<double>(clean_steps) : 0.0;
}

double RunResult::mean_delay(ScenarioKind kind) const {
    double sum = 0.0;
    int n = 0;
    for (const auto& d : delays)
        if (d.kind == kind) {
            sum += d.censored_delay();
            ++n;
        }
    return n ? sum / n : std::numeric_limits<double>::quiet_NaN();
}

double RunResult::mean_delay() const {
    double sum = 0.0;
    for (const auto& d : delays) sum += d.censored_delay();
    return delays.empty() ? std::numeric_limits<double>::quiet_NaN() : sum / static_cast<double>(delays.size());
}

namespace {

constexpr std::size_t kCleanScoreStride = 10;
constexpr std::int64_t kAttackScoreSteps = 100;

// Replays the detector over one group and folds the outcome into `r`.
void detect_group(const std::vector<DeviceSeries>& series, const DeviceGraph& graph, std::int64_t window,
                  const stgat::ModelParams& params, const stgat::HyperParams& hyper,
                  const detector::DetectorParams& dp, const std::string& source, Exec exec, RunResult& r) {
    std::vector<const DeviceSeries*> ptrs;
    for (const auto& s : series) ptrs.push_back(&s);
    const auto outs = causal_predict(ptrs, graph, window, params, hyper, exec);
    const std::array<double, 4> w_o{params.over_w.data[0], params.over_w.data[1], params.over_w.data[2],
                                    params.over_w.data[3]};
    for (std::size_t n = 0; n < series.size(); ++n) {
        const auto& s = series[n];
        const std::int64_t offset = outs[n].first_ready;
        const auto length = static_cast<std::int64_t>(s.all.steps());
        const auto res = detector::run_stream(detector_inputs(s, outs[n]), dp, w_o);
        if (!s.scenario.active()) {
            r.clean_steps += static_cast<std::int64_t>(res.detections.size());
            r.clean_fires += res.fired_count;
            for (std::size_t i = 0; i < res.detections.size(); i += kCleanScoreStride)
                r.clean_scores.push_back(res.detections[i].S);
            continue;
        }
        DelayRecord rec;
        rec.source = source;
        rec.device_id = s.device_id;
        rec.kind = s.scenario.kind;
        rec.onset = s.scenario.onset;
        rec.length = length;
        for (const auto& d : res.detections) {
            const std::int64_t step = d.step + offset;
            if (step >= rec.onset && step < rec.onset + kAttackScoreSteps) r.attack_scores.push_back(d.S);
            if (d.fired && step >= rec.onset && !rec.first_fire) rec.first_fire = step;
        }
        r.delays.push_back(rec);
    }
}

}  // namespace

RunResult evaluate_model(const datagen::Dataset& dataset, const datagen::DatasetConfig& config,
                         const stgat::ModelParams& params, const stgat::HyperParams& hyper,
                         const EvalOptions& options) {
    const auto& m = dataset.manifest;
    auto dp = options.detector;
    dp.dt = m.dt;
    dp.overflow_margin = hyper.overflow_margin;
    dp.validate();

    RunResult r;
    r.seed = m.seed;
    const auto idx = m.devices_in(datagen::Split::test);
    if (idx.empty()) throw ValidationError("evaluate: dataset has no test devices");
    std::vector<DeviceSeries> test;
    std::vector<int> nodes;
    for (std::size_t i : idx) {
        test.push_back(stgat::prepare_series(dataset.traces[i], m.normalization, hyper));
        nodes.push_back(static_cast<int>(i));
    }
    const DeviceGraph test_graph = dataset.graph.induced(nodes);
    std::vector<const DeviceSeries*> ptrs;
    for (const auto& s : test) ptrs.push_back(&s);

    const auto ws = classify_windows(ptrs, test_graph, m.window, m.stride, params, hyper, options.window_threshold,
                                     options.exec);
    r.window = stats::classification_metrics(ws.labels, ws.predictions);
    const bool both = std::count(ws.labels.begin(), ws.labels.end(), 1) > 0 &&
                      std::count(ws.labels.begin(), ws.labels.end(), 0) > 0;
    if (both) {
        r.window.auc = stats::roc_auc(ws.labels, ws.scores);
        r.window.has_auc = true;
    }

    detect_group(test, test_graph, m.window, params, hyper, dp, "test", options.exec, r);

    auto gspec = config.graph;
    for (ScenarioKind kind : options.probe_kinds) {
        for (int g = 0; g < options.probe_groups; ++g) {
            const auto traces = make_probe_group(config, kind, g, options.probe_length);
            std::vector<DeviceSeries> series;
            for (const auto& tr : traces) series.push_back(stgat::prepare_series(tr, m.normalization, hyper));
            gspec.seed = config.seed + 7919u * static_cast<std::uint64_t>(g + 1);
            const int n = static_cast<int>(series.size());
            if (gspec.topology == Topology::k_nearest) gspec.k = std::min(config.graph.k, n - 1);
            const DeviceGraph graph = n > 1 ? build_graph(n, gspec) : DeviceGraph{1, {}, true};
            detect_group(series, graph, m.window, params, hyper, dp, "probe", options.exec, r);
        }
    }

    r.window.detected = std::count_if(r.delays.begin(), r.delays.end(), [](const auto& d) { return d.first_fire.has_value(); });
    r.window.missed = static_cast<std::int64_t>(r.delays.size()) - r.window.detected;
    r.window.mean_delay = r.mean_delay();
    return r;
}

RunResult run_one(const datagen::DatasetConfig& config, const stgat::HyperParams& hyper, std::uint64_t seed,
                  Variant variant, const EvalOptions& options) {
    auto cfg = config;
    cfg.seed = seed;
    const auto ds = datagen::generate_dataset(cfg, options.exec);
    auto h = apply_variant(hyper, variant);
    h.seed = seed;
    stgat::FitOptions fo;
    fo.exec = options.exec;
    const auto t0 = std::chrono::steady_clock::now();
    const auto fitted = stgat::fit(ds, h, fo);
    const auto t1 = std::chrono::steady_clock::now();
    auto r = evaluate_model(ds, cfg, fitted.params, h, options);
    r.variant = variant;
    r.epoch_loss = fitted.epoch_loss;
    r.train_seconds = std::chrono::duration<double>(t1 - t0).count();
    return r;
}

std::vector<RunResult> run_benchmark(const datagen::DatasetConfig& config, const stgat::HyperParams& hyper,
                                     const EvalOptions& options) {
    std::vector<RunResult> out;
    for (std::uint64_t seed : options.seeds)
        for (Variant v : options.variants) out.push_back(run_one(config, hyper, seed, v, options));
    return out;
}

// ---- JSON --------------------------------------------------------------------------

namespace {

nlohmann::json metrics_json(const stats::MetricReport& m) {
    nlohmann::json j{{"accuracy", m.accuracy}, {"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1},
                     {"tp", m.tp},             {"fp", m.fp},               {"tn", m.tn},         {"fn", m.fn},
                     {"detected", m.detected}, {"missed", m.missed}};
    j["auc"] = m.has_auc ? nlohmann::json(m.auc) : nlohmann::json(nullptr);
    j["mean_delay"] = std::isfinite(m.mean_delay) ? nlohmann::json(m.mean_delay) : nlohmann::json(nullptr);
    return j;
}

stats::MetricReport metrics_from_json(const nlohmann::json& j) {
    stats::MetricReport m;
    m.accuracy = j.at("accuracy").get<double>();
    m.precision = j.at("precision").get<double>();
    m.recall = j.at("recall").get<double>();
    m.f1 = j.at("f1").get<double>();
    m.tp = j.at("tp").get<std::int64_t>();
    m.fp = j.at("fp").get<std::int64_t>();
    m.tn = j.at("tn").get<std::int64_t>();
    m.fn = j.at("fn").get<std::int64_t>();
    m.detected = j.at("detected").get<std::int64_t>();
    m.missed = j.at("missed").get<std::int64_t>();
    m.has_auc = !j.at("auc").is_null();
    if (m.has_auc) m.auc = j.at("auc").get<double>();
    m.mean_delay = j.at("mean_delay").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                : j.at("mean_delay").get<double>();
    return m;
}

}  // namespace

nlohmann::json to_json(const RunResult& r) {
    nlohmann::json delays = nlohmann::json::array();
    for (const auto& d : r.delays) {
        nlohmann::json j{{"source", d.source}, {"device", d.device_id}, {"scenario", datagen::to_string(d.kind)},
                         {"onset", d.onset},   {"length", d.length}};
        j["first_fire"] = d.first_fire ? nlohmann::json(*d.first_fire) : nlohmann::json(nullptr);
        delays.push_back(j);
    }
    return {{"seed", r.seed},
            {"variant", to_string(r.variant)},
            {"window", metrics_json(r.window)},
            {"delays", delays},
            {"clean_steps", r.clean_steps},
            {"clean_fires", r.clean_fires},
            {"false_alarm_rate", r.false_alarm_rate()},
            {"epoch_loss", r.epoch_loss},
            {"train_seconds", r.train_seconds},
            {"clean_scores", r.clean_scores},
            {"attack_scores", r.attack_scores}};
}

RunResult run_result_from_json(const nlohmann::json& j) {
    try {
        RunResult r;
        r.seed = j.at("seed").get<std::uint64_t>();
        r.variant = variant_from_string(j.at("variant").get<std::string>());
        r.window = metrics_from_json(j.at("window"));
        for (const auto& d : j.at("delays")) {
            DelayRecord rec;
            rec.source = d.at("source").get<std::string>();
            rec.device_id = d.at("device").get<int>();
            rec.kind = datagen::scenario_from_string(d.at("scenario").get<std::string>());
            rec.onset = d.at("onset").get<std::int64_t>();
            rec.length = d.at("length").get<std::int64_t>();
            if (!d.at("first_fire").is_null()) rec.first_fire = d.at("first_fire").get<std::int64_t>();
            r.delays.push_back(rec);
        }
        r.clean_steps = j.at("clean_steps").get<std::int64_t>();
        r.clean_fires = j.at("clean_fires").get<std::int64_t>();
        r.epoch_loss = j.at("epoch_loss").get<std::vector<double>>();
        r.train_seconds = j.value("train_seconds", 0.0);  // absent in reproducible outputs
        r.clean_scores = j.at("clean_scores").get<std::vector<double>>();
        r.attack_scores = j.at("attack_scores").get<std::vector<double>>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("run result: ") + e.what());
    }
}

}  // namespace tg::eval
