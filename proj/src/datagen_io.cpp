#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "timeguard/core/error.hpp"
#include "timeguard/datagen.hpp"
#include "timeguard/io_util.hpp"

namespace tg::datagen {

using nlohmann::json;

std::string traces_csv_header(std::size_t n_features) {
    std::string h = "device_id,t,tau";
    for (std::size_t f = 0; f < n_features; ++f) h += ",x_" + std::to_string(f + 1);
    h += ",dt,delta,eta,overflow,timestamp_drift,drift_rate,jitter_ms,ntp_offset_ms,epoch_overflow_flag,label,k_diag";
    return h;
}

namespace {

json clock_to_json(const clockdyn::ClockParams& c) {
    return {{"alpha", c.alpha},
            {"sigma", c.sigma},
            {"shock_prob", c.shock_prob},
            {"shock_scale", c.shock_scale},
            {"jitter_scale", c.jitter_scale}};
}

clockdyn::ClockParams clock_from_json(const json& j) {
    clockdyn::ClockParams c;
    c.alpha = j.at("alpha").get<double>();
    c.sigma = j.at("sigma").get<double>();
    c.shock_prob = j.at("shock_prob").get<double>();
    c.shock_scale = j.at("shock_scale").get<double>();
    c.jitter_scale = j.at("jitter_scale").get<double>();
    return c;
}

json scenario_to_json(const ScenarioSpec& s) {
    return {{"kind", to_string(s.kind)},
            {"onset", s.onset},
            {"magnitude", s.magnitude},
            {"eps_t", s.eps_t},
            {"eps_d", s.eps_d}};
}

ScenarioSpec scenario_from_json(const json& j) {
    ScenarioSpec s;
    s.kind = scenario_from_string(j.at("kind").get<std::string>());
    s.onset = j.at("onset").get<std::int64_t>();
    s.magnitude = j.at("magnitude").get<double>();
    s.eps_t = j.at("eps_t").get<double>();
    s.eps_d = j.at("eps_d").get<double>();
    return s;
}

}  // namespace

static json manifest_to_json(const DatasetManifest& m, const DeviceGraph& g) {
    json devices = json::array();
    for (const auto& e : m.devices)
        devices.push_back({{"device_id", e.device_id},
                           {"split", to_string(e.split)},
                           {"scenario", scenario_to_json(e.scenario)},
                           {"clock", clock_to_json(e.clock)},
                           {"start_time", e.start_time}});
    json edges = json::array();
    for (const auto& e : g.edges) edges.push_back({e.i, e.j, e.weight});
    return {{"format_version", m.format_version},
            {"seed", m.seed},
            {"n_devices", m.n_devices},
            {"length", m.length},
            {"window", m.window},
            {"stride", m.stride},
            {"n_features", m.n_features},
            {"dt", m.dt},
            {"devices", devices},
            {"normalization",
             {{"columns", m.normalization.columns}, {"mean", m.normalization.mean}, {"std", m.normalization.stddev}}},
            {"graph", {{"n", g.n_nodes}, {"edges", edges}}}};
}

static void manifest_from_json(const json& j, DatasetManifest& m, DeviceGraph& g) {
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != kFormatVersion)
        throw ValidationError("manifest: format_version " + std::to_string(m.format_version) + " unsupported (expected " +
                              std::to_string(kFormatVersion) + ")");
    m.seed = j.at("seed").get<std::uint64_t>();
    m.n_devices = j.at("n_devices").get<int>();
    m.length = j.at("length").get<std::int64_t>();
    m.window = j.at("window").get<std::int64_t>();
    m.stride = j.at("stride").get<std::int64_t>();
    m.n_features = j.at("n_features").get<int>();
    m.dt = j.at("dt").get<double>();
    m.devices.clear();
    for (const auto& d : j.at("devices")) {
        DeviceEntry e;
        e.device_id = d.at("device_id").get<int>();
        e.split = split_from_string(d.at("split").get<std::string>());
        e.scenario = scenario_from_json(d.at("scenario"));
        e.clock = clock_from_json(d.at("clock"));
        e.start_time = d.at("start_time").get<double>();
        m.devices.push_back(e);
    }
    const auto& n = j.at("normalization");
    m.normalization.columns = n.at("columns").get<std::vector<std::string>>();
    m.normalization.mean = n.at("mean").get<std::vector<double>>();
    m.normalization.stddev = n.at("std").get<std::vector<double>>();
    const auto& gj = j.at("graph");
    g = DeviceGraph{};
    g.n_nodes = gj.at("n").get<int>();
    for (const auto& e : gj.at("edges")) g.edges.push_back({e.at(0).get<int>(), e.at(1).get<int>(), e.at(2).get<double>()});
    g.validate();
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "manifest.json", std::ios::binary);
        if (!out) throw RuntimeError("cannot write " + (dir / "manifest.json").string());
        out << manifest_to_json(dataset.manifest, dataset.graph).dump(2) << '\n';
    }
    std::ofstream out(dir / "traces.csv", std::ios::binary);
    if (!out) throw RuntimeError("cannot write " + (dir / "traces.csv").string());
    out << traces_csv_header(static_cast<std::size_t>(dataset.manifest.n_features)) << '\n';
    std::string line;
    for (const auto& tr : dataset.traces) {
        for (const auto& r : tr.rows) {
            line.clear();
            line += std::to_string(tr.device_id);
            line += ',';
            line += std::to_string(r.t);
            line += ',';
            io::append_double(line, r.tau);
            for (double v : r.x) {
                line += ',';
                io::append_double(line, v);
            }
            for (double v : r.d) {
                line += ',';
                io::append_double(line, v);
            }
            for (double v : r.time_features) {
                line += ',';
                io::append_double(line, v);
            }
            line += ',';
            line += std::to_string(r.label);
            line += ',';
            io::append_double(line, r.k_diag);
            line += '\n';
            out << line;
        }
    }
}

Dataset load_dataset(const std::filesystem::path& dir) {
    Dataset ds;
    {
        std::ifstream in(dir / "manifest.json", std::ios::binary);
        if (!in) throw ValidationError("cannot read " + (dir / "manifest.json").string());
        json j;
        try {
            in >> j;
            manifest_from_json(j, ds.manifest, ds.graph);
        } catch (const json::exception& e) {
            throw ValidationError(std::string("manifest.json: ") + e.what());
        }
    }
    const auto& m = ds.manifest;
    std::map<int, std::size_t> index;
    ds.traces.resize(m.devices.size());
    for (std::size_t i = 0; i < m.devices.size(); ++i) {
        index[m.devices[i].device_id] = i;
        ds.traces[i].device_id = m.devices[i].device_id;
        ds.traces[i].start_time = m.devices[i].start_time;
        ds.traces[i].clock = m.devices[i].clock;
        ds.traces[i].scenario = m.devices[i].scenario;
    }

    const auto path = dir / "traces.csv";
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot read " + path.string());
    const auto F = static_cast<std::size_t>(m.n_features);
    std::string line;
    std::getline(in, line);
    if (line != traces_csv_header(F)) throw ValidationError(path.string() + ": line 1: unexpected header");
    std::size_t lineno = 1;
    std::vector<std::string_view> cells;
    const std::size_t expected = 3 + F + kDriftDims + kTimeFeatures + 2;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        io::split_csv(line, cells);
        auto where = [&] { return path.string() + ": line " + std::to_string(lineno) + ": "; };
        if (cells.size() != expected)
            throw ValidationError(where() + "expected " + std::to_string(expected) + " fields, got " +
                                  std::to_string(cells.size()));
        try {
            const int dev = static_cast<int>(io::parse_int(cells[0]));
            auto it = index.find(dev);
            if (it == index.end()) throw ValidationError("unknown device_id " + std::to_string(dev));
            TraceRow r;
            r.t = io::parse_int(cells[1]);
            r.tau = io::parse_double(cells[2]);
            r.x.resize(F);
            std::size_t c = 3;
            for (std::size_t f = 0; f < F; ++f) r.x[f] = io::parse_double(cells[c++]);
            for (auto& v : r.d) v = io::parse_double(cells[c++]);
            for (auto& v : r.time_features) v = io::parse_double(cells[c++]);
            r.label = static_cast<int>(io::parse_int(cells[c++]));
            r.k_diag = io::parse_double(cells[c++]);
            auto& tr = ds.traces[it->second];
            r.psi = r.time_features[kTimestampDrift];
            tr.rows.push_back(std::move(r));
        } catch (const ValidationError& e) {
            throw ValidationError(where() + e.what());
        }
    }
    for (const auto& tr : ds.traces)
        if (static_cast<std::int64_t>(tr.rows.size()) != m.length)
            throw ValidationError(path.string() + ": device " + std::to_string(tr.device_id) + " has " +
                                  std::to_string(tr.rows.size()) + " rows, manifest says " + std::to_string(m.length));
    return ds;
}

std::vector<DeviceTrace> load_external_csv(const std::filesystem::path& path, const ExternalCsvSpec& spec) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot read " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw ValidationError(path.string() + ": empty file");
    std::vector<std::string_view> cells;
    io::split_csv(line, cells);
    std::vector<std::string> header(cells.begin(), cells.end());
    auto column = [&](const std::string& name) -> std::size_t {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw ValidationError(path.string() + ": missing column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    };
    const std::size_t ts_col = column(spec.timestamp_column);
    if (spec.feature_columns.empty()) throw ValidationError(path.string() + ": no feature columns mapped");
    std::vector<std::size_t> feat_cols;
    for (const auto& f : spec.feature_columns) feat_cols.push_back(column(f));
    const std::optional<std::size_t> dev_col =
        spec.device_column ? std::optional<std::size_t>(column(*spec.device_column)) : std::nullopt;
    const std::optional<std::size_t> label_col =
        spec.label_column ? std::optional<std::size_t>(column(*spec.label_column)) : std::nullopt;

    struct Raw {
        std::vector<double> times;
        std::vector<std::vector<double>> x;
        std::vector<int> labels;
    };
    std::map<int, Raw> by_device;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        io::split_csv(line, cells);
        auto where = [&] { return path.string() + ": line " + std::to_string(lineno) + ": "; };
        if (cells.size() != header.size())
            throw ValidationError(where() + "expected " + std::to_string(header.size()) + " fields, got " +
                                  std::to_string(cells.size()));
        try {
            const int dev = dev_col ? static_cast<int>(io::parse_int(cells[*dev_col])) : 0;
            auto& raw = by_device[dev];
            raw.times.push_back(io::parse_double(cells[ts_col]));
            std::vector<double> x;
            for (auto c : feat_cols) x.push_back(io::parse_double(cells[c]));
            raw.x.push_back(std::move(x));
            raw.labels.push_back(label_col ? static_cast<int>(io::parse_int(cells[*label_col])) : 0);
        } catch (const ValidationError& e) {
            throw ValidationError(where() + e.what());
        }
    }

    std::vector<DeviceTrace> out;
    for (auto& [dev, raw] : by_device) {
        if (raw.times.size() < 2) throw ValidationError(path.string() + ": device " + std::to_string(dev) + " has < 2 rows");
        std::vector<double> gaps;
        for (std::size_t i = 1; i < raw.times.size(); ++i) gaps.push_back(raw.times[i] - raw.times[i - 1]);
        std::nth_element(gaps.begin(), gaps.begin() + static_cast<std::ptrdiff_t>(gaps.size() / 2), gaps.end());
        clockdyn::TimeConstants constants;
        constants.dt = gaps[gaps.size() / 2];
        if (!(constants.dt > 0.0)) throw ValidationError(path.string() + ": timestamps must increase");
        Mat phys(raw.x.size(), feat_cols.size());
        for (std::size_t i = 0; i < raw.x.size(); ++i) std::copy(raw.x[i].begin(), raw.x[i].end(), phys.row(i).begin());
        ScenarioSpec scenario = spec.scenario;
        TraceOptions opts;
        opts.start_time = raw.times.front();
        DeviceTrace tr = build_device_trace(phys, spec.overlay, scenario, constants,
                                            spec.seed * 1000003ULL + static_cast<std::uint64_t>(dev), opts);
        tr.device_id = dev;
        if (label_col)
            for (std::size_t i = 0; i < tr.rows.size(); ++i) tr.rows[i].label = std::max(tr.rows[i].label, raw.labels[i]);
        out.push_back(std::move(tr));
    }
    return out;
}

}  // namespace tg::datagen
