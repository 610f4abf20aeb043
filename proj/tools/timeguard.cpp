// timeguard: dataset generation, training, offline detection and evaluation,
// harness simulation and report tables.
//
// Exit codes: 0 success, 2 invalid input or configuration, 1 runtime failure.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <omp.h>

#include "timeguard/config_json.hpp"
#include "timeguard/core/error.hpp"
#include "timeguard/datagen.hpp"
#include "timeguard/detector.hpp"
#include "timeguard/evaluation.hpp"
#include "timeguard/harness.hpp"
#include "timeguard/stats.hpp"
#include "timeguard/stgat.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tg;

namespace {

struct Options {
    std::string config;
    std::string out = "out";
    std::optional<std::uint64_t> seed;
    bool no_curvature = false;
    bool no_gat = false;
    bool no_drift_embedding = false;
    bool serial = false;
    int threads = 0;
    bool verbose = false;

    // per subcommand
    std::string data;
    std::string checkpoint;
    std::string detections;
    std::string runs;
    std::string split = "test";
    std::string mode;
    bool sweep = false;
};

struct Config {
    datagen::DatasetConfig dataset;
    stgat::HyperParams model;
    eval::EvalOptions evaluation;
    harness::SimulationConfig simulation = harness::default_simulation();
};

Exec exec_of(const Options& o) { return o.serial ? Exec::serial : Exec::parallel; }

stgat::HyperParams model_from_json(const json& j, stgat::HyperParams h) {
    if (!j.is_object()) throw ValidationError("model: expected an object");
    const auto known = stgat::hyper_json(h);
    for (const auto& [key, v] : j.items())
        if (!known.contains(key)) throw ValidationError("model." + key + ": unknown field");
    try {
        h = stgat::hyper_from_json(j, h);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("model: wrong type: ") + e.what());
    }
    try {
        h.validate();
    } catch (const ValidationError& e) {
        throw ValidationError(std::string("model: ") + e.what());
    }
    return h;
}

Config load_config(const Options& o) {
    Config c;
    const json j = o.config.empty() ? json::object() : config::read_file(o.config);
    if (!j.is_object()) throw ValidationError(o.config + ": expected a JSON object");
    for (const auto& [key, v] : j.items())
        if (key != "dataset" && key != "model" && key != "evaluation" && key != "simulation")
            throw ValidationError(key + ": unknown section (expected dataset, model, evaluation, simulation)");
    if (j.contains("dataset")) c.dataset = config::dataset_from_json(j.at("dataset"), c.dataset);
    if (j.contains("model")) c.model = model_from_json(j.at("model"), c.model);
    if (j.contains("evaluation")) c.evaluation = config::eval_from_json(j.at("evaluation"), c.evaluation);
    if (j.contains("simulation")) c.simulation = harness::simulation_from_json(j.at("simulation"));
    if (o.seed) {
        c.dataset.seed = *o.seed;
        c.model.seed = *o.seed;
        c.evaluation.seeds = {*o.seed};
        c.simulation.seed = *o.seed;
    }
    if (o.no_curvature) c.model.use_curvature_loss = false;
    if (o.no_gat) c.model.use_graph_attention = false;
    if (o.no_drift_embedding) c.model.use_drift_embedding = false;
    c.evaluation.exec = exec_of(o);
    return c;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeError("cannot write " + path.string());
    out << text;
    if (!out) throw RuntimeError("failed writing " + path.string());
}

datagen::Split parse_split(const std::string& s) { return datagen::split_from_string(s); }

// ---- generate ------------------------------------------------------------------

int cmd_generate(const Options& o) {
    const auto c = load_config(o);
    const auto ds = datagen::generate_dataset(c.dataset, exec_of(o));
    datagen::save_dataset(ds, o.out);

    const auto& m = ds.manifest;
    std::cout << "generated " << m.n_devices << " devices x " << m.length << " steps (seed " << m.seed << ") -> "
              << o.out << "\n";
    for (auto s : {datagen::Split::train, datagen::Split::val, datagen::Split::test}) {
        const auto idx = m.devices_in(s);
        std::map<std::string, int> kinds;
        std::int64_t windows = 0;
        for (auto i : idx) {
            ++kinds[datagen::to_string(m.devices[i].scenario.kind)];
            windows += (m.length - m.window) / m.stride + 1;
        }
        std::cout << "  " << datagen::to_string(s) << ": " << idx.size() << " devices, " << windows << " windows";
        for (const auto& [k, n] : kinds) std::cout << ", " << k << "=" << n;
        std::cout << "\n";
    }
    return 0;
}

// ---- train ---------------------------------------------------------------------

int cmd_train(const Options& o) {
    const auto c = load_config(o);
    const auto ds = datagen::load_dataset(o.data);
    stgat::FitOptions fo;
    fo.exec = exec_of(o);
    if (o.verbose)
        fo.on_epoch = [](int epoch, double loss) { std::cout << "  epoch " << epoch << " loss " << loss << "\n"; };
    const auto fitted = stgat::fit(ds, c.model, fo);

    fs::create_directories(o.out);
    stgat::Checkpoint ck{c.model, fitted.params, ds.manifest.normalization, ds.manifest.window, ds.manifest.dt};
    stgat::save_checkpoint(ck, fs::path(o.out) / "checkpoint.json");
    std::string loss = "epoch,loss\n";
    for (std::size_t e = 0; e < fitted.epoch_loss.size(); ++e)
        loss += std::to_string(e) + "," + json(fitted.epoch_loss[e]).dump() + "\n";
    write_text(fs::path(o.out) / "loss.csv", loss);
    std::cout << "trained " << fitted.epoch_loss.size() << " epochs, final loss " << fitted.epoch_loss.back()
              << " -> " << (fs::path(o.out) / "checkpoint.json").string() << "\n";
    return 0;
}

// ---- detect --------------------------------------------------------------------

int cmd_detect(const Options& o) {
    const auto c = load_config(o);
    const auto ck = stgat::load_checkpoint(o.checkpoint);
    const auto ds = datagen::load_dataset(o.data);
    const auto& m = ds.manifest;
    if (std::abs(m.dt - ck.dt) > 1e-12) throw ValidationError("dataset dt differs from the checkpoint's dt");
    if (ck.params.n_features() != stgat::model_input_width(static_cast<std::size_t>(m.n_features), ck.hyper))
        throw ValidationError("dataset feature count does not match the checkpoint");

    const auto idx = m.devices_in(parse_split(o.split));
    if (idx.empty()) throw ValidationError("split '" + o.split + "' has no devices");
    std::vector<stgat::DeviceSeries> series;
    std::vector<int> nodes;
    for (auto i : idx) {
        series.push_back(stgat::prepare_series(ds.traces[i], ck.normalization, ck.hyper));
        nodes.push_back(static_cast<int>(i));
    }
    std::vector<const stgat::DeviceSeries*> ptrs;
    for (const auto& s : series) ptrs.push_back(&s);
    const auto graph = ds.graph.induced(nodes);
    const auto outs = eval::causal_predict(ptrs, graph, ck.window, ck.params, ck.hyper, exec_of(o));

    auto dp = c.evaluation.detector;
    dp.dt = m.dt;
    dp.overflow_margin = ck.hyper.overflow_margin;
    dp.validate();
    const std::array<double, 4> w_o{ck.params.over_w.data[0], ck.params.over_w.data[1], ck.params.over_w.data[2],
                                    ck.params.over_w.data[3]};

    fs::create_directories(o.out);
    std::ofstream log(fs::path(o.out) / "detections.jsonl", std::ios::binary);
    if (!log) throw RuntimeError("cannot write detections.jsonl");
    std::int64_t fired = 0;
    for (std::size_t n = 0; n < series.size(); ++n) {
        auto res = detector::run_stream(eval::detector_inputs(series[n], outs[n]), dp, w_o);
        for (auto& d : res.detections) d.step += outs[n].first_ready;
        fired += res.fired_count;
        detector::write_detection_log(log, series[n].device_id, res.detections);
    }

    const auto ws = eval::classify_windows(ptrs, graph, ck.window, m.stride, ck.params, ck.hyper,
                                           c.evaluation.window_threshold, exec_of(o));
    std::string csv = "window_start,device,label,score,prediction\n";
    for (std::size_t k = 0; k < ws.labels.size(); ++k) {
        const auto start = static_cast<std::int64_t>(k / series.size()) * m.stride;
        csv += std::to_string(start) + "," + std::to_string(series[k % series.size()].device_id) + "," +
               std::to_string(ws.labels[k]) + "," + json(ws.scores[k]).dump() + "," +
               std::to_string(ws.predictions[k]) + "\n";
    }
    write_text(fs::path(o.out) / "window_scores.csv", csv);
    std::cout << "detected on " << series.size() << " " << o.split << " devices: " << fired
              << " fired steps -> " << (fs::path(o.out) / "detections.jsonl").string() << "\n";
    return 0;
}

// ---- evaluate ------------------------------------------------------------------

json strip_timing(json j) {
    j.erase("train_seconds");
    return j;
}

int evaluate_detections(const Options& o) {
    const auto ds = datagen::load_dataset(o.data);
    std::ifstream in(o.detections, std::ios::binary);
    if (!in) throw ValidationError("cannot read " + o.detections);
    const auto logged = detector::read_detection_log(in);
    if (logged.empty()) throw ValidationError(o.detections + ": no detections");

    std::map<int, std::size_t> trace_of;
    for (std::size_t i = 0; i < ds.traces.size(); ++i) trace_of[ds.traces[i].device_id] = i;
    std::map<int, std::vector<detector::Detection>> by_device;
    for (const auto& l : logged) by_device[l.device].push_back(l.detection);

    std::vector<int> labels, predictions;
    std::vector<double> scores;
    std::vector<std::optional<double>> delays;
    for (const auto& [dev, dets] : by_device) {
        const auto it = trace_of.find(dev);
        if (it == trace_of.end()) throw ValidationError("device " + std::to_string(dev) + " is not in the dataset");
        const auto& tr = ds.traces[it->second];
        const auto length = static_cast<std::int64_t>(tr.rows.size());
        const auto first = dets.front().step;
        for (std::size_t k = 0; k < dets.size(); ++k)
            if (dets[k].step != first + static_cast<std::int64_t>(k))
                throw ValidationError("device " + std::to_string(dev) + ": detection steps are not contiguous");
        if (first < 0 || first + static_cast<std::int64_t>(dets.size()) != length)
            throw ValidationError("device " + std::to_string(dev) + ": detections cover steps " +
                                  std::to_string(first) + ".." +
                                  std::to_string(first + static_cast<std::int64_t>(dets.size()) - 1) +
                                  " but the trace has length " + std::to_string(length));
        std::vector<std::int64_t> fired_steps;
        for (const auto& d : dets) {
            labels.push_back(tr.rows[static_cast<std::size_t>(d.step)].label);
            predictions.push_back(d.fired ? 1 : 0);
            scores.push_back(d.S);
            if (d.fired) fired_steps.push_back(d.step);
        }
        if (tr.scenario.active()) delays.push_back(stats::detection_delay(tr.scenario.onset, fired_steps));
    }

    auto report = stats::classification_metrics(labels, predictions);
    if (std::count(labels.begin(), labels.end(), 1) > 0 && std::count(labels.begin(), labels.end(), 0) > 0) {
        report.auc = stats::roc_auc(labels, scores);
        report.has_auc = true;
    }
    const auto ds_delay = stats::summarize_delays(delays);
    report.mean_delay = ds_delay.detected ? ds_delay.mean : std::nan("");
    report.detected = ds_delay.detected;
    report.missed = ds_delay.missed;

    fs::create_directories(o.out);
    const std::vector<stats::MetricRow> rows{{"stgat", report}};
    stats::write_metrics_csv(fs::path(o.out) / "metrics.csv", rows);
    stats::write_metrics_json(fs::path(o.out) / "metrics.json", rows);
    std::cout << "step-level: accuracy " << report.accuracy << ", precision " << report.precision << ", recall "
              << report.recall << ", F1 " << report.f1;
    if (report.has_auc) std::cout << ", AUC " << report.auc;
    std::cout << "\n";
    std::cout << "perturbed streams: " << report.detected << " detected, " << report.missed << " missed";
    if (report.detected) std::cout << ", mean delay " << report.mean_delay << " steps";
    std::cout << "\n";
    return 0;
}

int evaluate_sweep(const Options& o) {
    const auto c = load_config(o);
    const fs::path dir = fs::path(o.out) / "runs";
    fs::create_directories(dir);
    std::cout << "variant,seed,f1,auc,mean_delay,false_alarm_rate,train_seconds\n";
    for (std::uint64_t seed : c.evaluation.seeds)
        for (auto v : c.evaluation.variants) {
            const auto r = eval::run_one(c.dataset, c.model, seed, v, c.evaluation);
            write_text(dir / (eval::to_string(v) + "-seed" + std::to_string(seed) + ".json"),
                       strip_timing(eval::to_json(r)).dump(1) + "\n");
            std::cout << eval::to_string(v) << "," << seed << "," << r.window.f1 << ","
                      << (r.window.has_auc ? r.window.auc : std::nan("")) << "," << r.mean_delay() << ","
                      << r.false_alarm_rate() << "," << r.train_seconds << "\n";
        }
    return 0;
}

int cmd_evaluate(const Options& o) {
    if (o.sweep) return evaluate_sweep(o);
    if (o.detections.empty() || o.data.empty())
        throw ValidationError("evaluate needs --detections and --data, or --sweep");
    return evaluate_detections(o);
}

// ---- report --------------------------------------------------------------------

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? std::nan("") : s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::string num(double v) { return std::isfinite(v) ? json(v).dump() : ""; }

int cmd_report(const Options& o) {
    const fs::path runs_dir = o.runs.empty() ? fs::path(o.out) / "runs" : fs::path(o.runs);
    if (!fs::is_directory(runs_dir)) throw ValidationError("runs directory " + runs_dir.string() + " not found");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(runs_dir))
        if (e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ValidationError(runs_dir.string() + ": no run files");

    std::map<eval::Variant, std::vector<eval::RunResult>> by_variant;
    for (const auto& f : files) {
        auto r = eval::run_result_from_json(config::read_file(f));
        by_variant[r.variant].push_back(std::move(r));
    }
    for (auto& [v, runs] : by_variant)
        std::sort(runs.begin(), runs.end(), [](const auto& a, const auto& b) { return a.seed < b.seed; });

    struct Column {
        std::vector<double> f1, delay, overflow_delay, far;
    };
    std::map<eval::Variant, Column> cols;
    for (const auto& [v, runs] : by_variant)
        for (const auto& r : runs) {
            cols[v].f1.push_back(r.window.f1);
            cols[v].delay.push_back(r.mean_delay());
            cols[v].overflow_delay.push_back(r.mean_delay(datagen::ScenarioKind::epoch_overflow));
            cols[v].far.push_back(r.false_alarm_rate());
        }

    fs::create_directories(o.out);
    const fs::path out(o.out);

    std::string table = "variant,f1,delay,f1_std,delay_std,seeds\n";
    for (const auto& [v, c] : cols)
        table += eval::to_string(v) + "," + num(mean_of(c.f1)) + "," + num(mean_of(c.delay)) + "," +
                 num(std_of(c.f1)) + "," + num(std_of(c.delay)) + "," + std::to_string(c.f1.size()) + "\n";
    write_text(out / "ablation.csv", table);

    std::vector<stats::MetricRow> rows;
    for (const auto& [v, runs] : by_variant)
        for (const auto& r : runs) rows.push_back({eval::to_string(v) + "/seed" + std::to_string(r.seed), r.window});
    stats::write_metrics_csv(out / "metrics.csv", rows);
    stats::write_metrics_json(out / "metrics.json", rows);

    json stats_j;
    std::vector<stats::ComparisonRow> comparisons;
    json skipped = json::array();
    if (cols.count(eval::Variant::full)) {
        const auto& full = cols.at(eval::Variant::full);
        for (const auto& [v, c] : cols) {
            if (v == eval::Variant::full) continue;
            for (const auto& [metric, a, b] : {std::tuple{"f1", full.f1, c.f1}, std::tuple{"delay", full.delay, c.delay}}) {
                const std::string name = std::string(metric) + ": full vs " + eval::to_string(v);
                try {
                    comparisons.push_back({name, stats::welch_t(a, b)});
                } catch (const ValidationError& e) {
                    skipped.push_back({{"comparison", name}, {"reason", e.what()}});
                }
            }
        }
    }
    stats::write_ttest_csv(out / "welch.csv", comparisons);
    stats_j["welch_skipped"] = skipped;

    json per_variant = json::object();
    std::vector<std::vector<double>> f1_groups;
    for (const auto& [v, c] : cols) {
        const auto ci = stats::bootstrap_ci(c.f1, 10000, 0.95, 1);
        const auto dci = stats::bootstrap_ci(c.delay, 10000, 0.95, 1);
        per_variant[eval::to_string(v)] = {{"f1_mean", mean_of(c.f1)},
                                           {"f1_ci95", {ci.first, ci.second}},
                                           {"delay_mean", mean_of(c.delay)},
                                           {"delay_ci95", {dci.first, dci.second}},
                                           {"overflow_delay_mean", mean_of(c.overflow_delay)},
                                           {"false_alarm_rate_mean", mean_of(c.far)},
                                           {"seeds", c.f1.size()}};
        f1_groups.push_back(c.f1);
    }
    stats_j["variants"] = per_variant;
    if (f1_groups.size() >= 2) {
        try {
            const auto kw = stats::kruskal_wallis(f1_groups);
            stats_j["kruskal_wallis_f1"] = {{"H", kw.statistic}, {"dof", kw.dof}, {"p_value", kw.p_value},
                                            {"eta_squared", kw.effect_size}};
        } catch (const ValidationError& e) {
            stats_j["kruskal_wallis_f1"] = {{"skipped", e.what()}};
        }
    }
    write_text(out / "stats.json", stats_j.dump(2) + "\n");

    std::vector<stats::PlotPoint> score_points, delay_points;
    const auto scores_of = by_variant.count(eval::Variant::full) ? eval::Variant::full : by_variant.begin()->first;
    for (const auto& r : by_variant.at(scores_of)) {
        for (std::size_t i = 0; i < r.clean_scores.size(); ++i)
            score_points.push_back({static_cast<double>(i), r.clean_scores[i], "clean/seed" + std::to_string(r.seed)});
        for (std::size_t i = 0; i < r.attack_scores.size(); ++i)
            score_points.push_back(
                {static_cast<double>(i), r.attack_scores[i], "attack/seed" + std::to_string(r.seed)});
    }
    for (const auto& [v, runs] : by_variant)
        for (const auto& r : runs)
            for (const auto& d : r.delays)
                delay_points.push_back({static_cast<double>(r.seed), d.censored_delay(),
                                        eval::to_string(v) + "/" + datagen::to_string(d.kind)});
    stats::write_plot_data(out / "plot_scores.csv", score_points);
    stats::write_plot_data(out / "plot_delays.csv", delay_points);

    std::cout << "variant        F1      delay   seeds\n";
    for (const auto& [v, c] : cols) {
        std::string name = eval::to_string(v);
        name.resize(std::max<std::size_t>(name.size(), 14), ' ');
        std::cout << name << " " << mean_of(c.f1) << "  " << mean_of(c.delay) << "  " << c.f1.size() << "\n";
    }
    std::cout << "tables -> " << (out / "ablation.csv").string() << ", metrics.csv, welch.csv, stats.json\n";
    return 0;
}

// ---- simulate ------------------------------------------------------------------

int cmd_simulate(const Options& o) {
    auto c = load_config(o);
    auto sim = c.simulation;
    if (!o.checkpoint.empty()) sim.checkpoint = o.checkpoint;
    if (!o.mode.empty()) {
        if (o.mode == "socket") sim.mode = harness::TransportMode::socket;
        else if (o.mode == "in_process") sim.mode = harness::TransportMode::in_process;
        else throw ValidationError("--mode must be in_process or socket");
    }
    const auto rep = harness::run_simulation(sim);

    fs::create_directories(o.out);
    auto j = harness::report_json(rep);
    const auto latency = j.at("latency_ms");
    j.erase("latency_ms");
    write_text(fs::path(o.out) / "report.json", j.dump(2) + "\n");
    std::ofstream log(fs::path(o.out) / "detections.jsonl", std::ios::binary);
    if (!log) throw RuntimeError("cannot write detections.jsonl");
    std::map<int, std::vector<detector::Detection>> by_device;
    for (const auto& d : rep.detections) by_device[d.device].push_back(d.detection);
    for (const auto& [dev, dets] : by_device) detector::write_detection_log(log, dev, dets);

    std::cout << "simulated " << rep.devices.size() << " sensors (" << rep.mode << "), " << rep.decode_errors
              << " decode errors\n";
    for (const auto& d : rep.devices) {
        std::cout << "  device " << d.device_id << ": " << d.packets << " packets, " << d.fired << " fired";
        if (d.first_negative_seq) std::cout << ", first negative timestamp at seq " << *d.first_negative_seq;
        if (d.delay()) std::cout << ", delay " << *d.delay() << " steps";
        if (d.sensor_error) std::cout << ", sensor error: " << *d.sensor_error;
        std::cout << "\n";
    }
    std::cout << "  latency ms: mean " << latency.at("mean") << ", p95 " << latency.at("p95") << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"timeguard: drift- and overflow-aware anomaly detection for IoT telemetry"};
    app.require_subcommand(1, 1);
    Options o;

    auto common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", o.config, "JSON config with optional dataset/model/evaluation/simulation sections")
            ->check(CLI::ExistingFile);
        sub->add_option("-o,--out", o.out, "Output directory (all files are written here)")->capture_default_str();
        sub->add_option("--seed", o.seed, "Override every seed in the config");
        sub->add_flag("--serial", o.serial, "Run kernels single-threaded (byte-identical reference path)");
        sub->add_option("--threads", o.threads, "OpenMP thread count (0 = runtime default)")
            ->check(CLI::NonNegativeNumber);
        sub->add_flag("-v,--verbose", o.verbose, "Print per-epoch progress");
    };
    auto ablation = [&](CLI::App* sub) {
        sub->add_flag("--no-curvature", o.no_curvature, "Disable the curvature loss term");
        sub->add_flag("--no-gat", o.no_gat, "Disable graph attention");
        sub->add_flag("--no-drift-embedding", o.no_drift_embedding, "Disable the drift-aware embedding");
    };

    auto* gen = app.add_subcommand("generate", "Build a synthetic drift-aware dataset (traces.csv + manifest.json)");
    common(gen);
    auto* train = app.add_subcommand("train", "Train the model on a dataset directory; writes checkpoint.json and loss.csv");
    common(train);
    ablation(train);
    train->add_option("--data", o.data, "Dataset directory from generate")->required()->check(CLI::ExistingDirectory);
    auto* detect = app.add_subcommand("detect", "Run causal inference and the online detector over a dataset split");
    common(detect);
    detect->add_option("--checkpoint", o.checkpoint, "Checkpoint from train")->required()->check(CLI::ExistingFile);
    detect->add_option("--data", o.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    detect->add_option("--split", o.split, "train, val or test")->capture_default_str();
    auto* evaluate = app.add_subcommand(
        "evaluate", "Score a detection log against dataset labels, or run the seed x variant sweep with --sweep");
    common(evaluate);
    ablation(evaluate);
    evaluate->add_option("--detections", o.detections, "Detection log (JSON lines) from detect");
    evaluate->add_option("--data", o.data, "Dataset directory holding the labels");
    evaluate->add_flag("--sweep", o.sweep, "Generate, train and evaluate every configured seed and variant into OUT/runs");
    auto* report = app.add_subcommand("report", "Ablation table, metric tables, significance tests and plot data from a sweep");
    common(report);
    report->add_option("--runs", o.runs, "Directory of run JSON files (default OUT/runs)");
    auto* simulate = app.add_subcommand("simulate", "Run the sensor/inference testbed and write report.json");
    common(simulate);
    simulate->add_option("--checkpoint", o.checkpoint, "Checkpoint (overrides simulation.checkpoint)");
    simulate->add_option("--mode", o.mode, "in_process or socket (overrides simulation.mode)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (o.threads > 0) omp_set_num_threads(o.threads);
        if (*gen) return cmd_generate(o);
        if (*train) return cmd_train(o);
        if (*detect) return cmd_detect(o);
        if (*evaluate) return cmd_evaluate(o);
        if (*report) return cmd_report(o);
        if (*simulate) return cmd_simulate(o);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
