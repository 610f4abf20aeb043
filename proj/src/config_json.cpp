#include "timeguard/config_json.hpp"

#include <fstream>
#include <set>

#include "timeguard/core/error.hpp"

namespace tg::config {

namespace {

// Checked access to an object's optional fields.
class Fields {
public:
    Fields(const json& j, std::string path, std::initializer_list<const char*> allowed) : j_(j), path_(std::move(path)) {
        if (!j.is_object()) throw ValidationError(path_ + ": expected an object");
        std::set<std::string> ok(allowed.begin(), allowed.end());
        for (const auto& [key, value] : j.items())
            if (!ok.count(key)) throw ValidationError(path_ + "." + key + ": unknown field");
    }

    template <class T>
    void opt(const char* key, T& out) const {
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ValidationError(where(key) + ": wrong type (" + std::string(j_.at(key).type_name()) + ")");
        }
    }

    const json* sub(const char* key) const { return j_.contains(key) ? &j_.at(key) : nullptr; }
    std::string where(const char* key) const { return path_ + "." + key; }

private:
    const json& j_;
    std::string path_;
};

std::string scenario_name_checked(const Fields& f, const json& j, const char* key) {
    try {
        return j.at(key).get<std::string>();
    } catch (const json::exception&) {
        throw ValidationError(f.where(key) + ": expected a string");
    }
}

}  // namespace

json to_json(const clockdyn::ClockParams& c) {
    return {{"alpha", c.alpha},
            {"sigma", c.sigma},
            {"shock_prob", c.shock_prob},
            {"shock_scale", c.shock_scale},
            {"jitter_scale", c.jitter_scale}};
}

clockdyn::ClockParams clock_from_json(const json& j, clockdyn::ClockParams c, const std::string& path) {
    Fields f(j, path, {"alpha", "sigma", "shock_prob", "shock_scale", "jitter_scale"});
    f.opt("alpha", c.alpha);
    f.opt("sigma", c.sigma);
    f.opt("shock_prob", c.shock_prob);
    f.opt("shock_scale", c.shock_scale);
    f.opt("jitter_scale", c.jitter_scale);
    try {
        c.validate();
    } catch (const ValidationError& e) {
        throw ValidationError(path + ": " + e.what());
    }
    return c;
}

json to_json(const datagen::ScenarioSpec& s) {
    return {{"kind", datagen::to_string(s.kind)},
            {"onset", s.onset},
            {"magnitude", s.magnitude},
            {"eps_t", s.eps_t},
            {"eps_d", s.eps_d}};
}

datagen::ScenarioSpec scenario_from_json(const json& j, datagen::ScenarioSpec s, const std::string& path) {
    Fields f(j, path, {"kind", "onset", "magnitude", "eps_t", "eps_d"});
    if (j.contains("kind")) {
        try {
            s.kind = datagen::scenario_from_string(scenario_name_checked(f, j, "kind"));
        } catch (const ValidationError& e) {
            throw ValidationError(f.where("kind") + ": " + e.what());
        }
    }
    f.opt("onset", s.onset);
    f.opt("magnitude", s.magnitude);
    f.opt("eps_t", s.eps_t);
    f.opt("eps_d", s.eps_d);
    return s;
}

json to_json(const detector::DetectorParams& p) {
    return {{"theta0", p.theta0},         {"gamma", p.gamma},         {"var_window", p.var_window},
            {"score_window", p.score_window}, {"eps_delta", p.eps_delta}, {"eps_o", p.eps_o},
            {"overflow_margin", p.overflow_margin}, {"dt", p.dt}};
}

detector::DetectorParams detector_from_json(const json& j, detector::DetectorParams p, const std::string& path) {
    Fields f(j, path, {"theta0", "gamma", "var_window", "score_window", "eps_delta", "eps_o", "overflow_margin", "dt"});
    f.opt("theta0", p.theta0);
    f.opt("gamma", p.gamma);
    f.opt("var_window", p.var_window);
    f.opt("score_window", p.score_window);
    f.opt("eps_delta", p.eps_delta);
    f.opt("eps_o", p.eps_o);
    f.opt("overflow_margin", p.overflow_margin);
    f.opt("dt", p.dt);
    try {
        p.validate();
    } catch (const ValidationError& e) {
        throw ValidationError(path + ": " + e.what());
    }
    return p;
}

json to_json(const GraphSpec& g) {
    json edges = json::array();
    for (const auto& e : g.explicit_edges) edges.push_back({e.i, e.j, e.weight});
    json out{{"topology", to_string(g.topology)}, {"k", g.k}};
    if (!g.explicit_edges.empty()) out["edges"] = edges;
    return out;
}

GraphSpec graph_from_json(const json& j, GraphSpec g, const std::string& path) {
    Fields f(j, path, {"topology", "k", "edges"});
    if (j.contains("topology")) {
        try {
            g.topology = topology_from_string(j.at("topology").get<std::string>());
        } catch (const json::exception&) {
            throw ValidationError(f.where("topology") + ": expected a string");
        } catch (const ValidationError& e) {
            throw ValidationError(f.where("topology") + ": " + e.what());
        }
    }
    f.opt("k", g.k);
    if (const json* edges = f.sub("edges")) {
        g.explicit_edges.clear();
        try {
            for (const auto& e : *edges) g.explicit_edges.push_back({e.at(0).get<int>(), e.at(1).get<int>(), e.at(2).get<double>()});
        } catch (const json::exception&) {
            throw ValidationError(f.where("edges") + ": expected [[i, j, weight], ...]");
        }
    }
    return g;
}

json to_json(const datagen::DatasetConfig& c) {
    json kinds = json::array();
    for (auto k : c.scenario_kinds) kinds.push_back(datagen::to_string(k));
    return {{"seed", c.seed},
            {"n_devices", c.n_devices},
            {"length", c.length},
            {"window", c.window},
            {"stride", c.stride},
            {"perturbed_fraction", c.perturbed_fraction},
            {"scenario_kinds", kinds},
            {"scenarios",
             {{"drift_escalation_magnitude", c.scenarios.drift_escalation_magnitude},
              {"offset_shock_magnitude", c.scenarios.offset_shock_magnitude},
              {"stealthy_ramp", c.scenarios.stealthy_ramp},
              {"stealthy_eps_t", c.scenarios.stealthy_eps_t},
              {"stealthy_eps_d", c.scenarios.stealthy_eps_d},
              {"onset_min_fraction", c.scenarios.onset_min_fraction},
              {"onset_max_fraction", c.scenarios.onset_max_fraction}}},
            {"clock",
             {{"alpha_min", c.clock.alpha_min},
              {"alpha_max", c.clock.alpha_max},
              {"sigma_min", c.clock.sigma_min},
              {"sigma_max", c.clock.sigma_max},
              {"shock_prob", c.clock.shock_prob},
              {"shock_scale", c.clock.shock_scale},
              {"jitter_scale", c.clock.jitter_scale}}},
            {"physical",
             {{"n_features", c.physical.n_features},
              {"base_period", c.physical.base_period},
              {"noise_scale", c.physical.noise_scale}}},
            {"dt", c.constants.dt},
            {"start_time", c.start_time},
            {"fractions", {{"train", c.fractions.train}, {"val", c.fractions.val}, {"test", c.fractions.test}}},
            {"graph", to_json(c.graph)}};
}

datagen::DatasetConfig dataset_from_json(const json& j, datagen::DatasetConfig c, const std::string& path) {
    Fields f(j, path,
             {"seed", "n_devices", "length", "window", "stride", "perturbed_fraction", "scenario_kinds", "scenarios",
              "clock", "physical", "dt", "start_time", "fractions", "graph"});
    f.opt("seed", c.seed);
    f.opt("n_devices", c.n_devices);
    f.opt("length", c.length);
    f.opt("window", c.window);
    f.opt("stride", c.stride);
    f.opt("perturbed_fraction", c.perturbed_fraction);
    f.opt("dt", c.constants.dt);
    f.opt("start_time", c.start_time);
    if (const json* kinds = f.sub("scenario_kinds")) {
        if (!kinds->is_array()) throw ValidationError(f.where("scenario_kinds") + ": expected an array");
        c.scenario_kinds.clear();
        for (const auto& k : *kinds) {
            try {
                c.scenario_kinds.push_back(datagen::scenario_from_string(k.get<std::string>()));
            } catch (const json::exception&) {
                throw ValidationError(f.where("scenario_kinds") + ": expected scenario names");
            } catch (const ValidationError& e) {
                throw ValidationError(f.where("scenario_kinds") + ": " + e.what());
            }
        }
    }
    if (const json* s = f.sub("scenarios")) {
        Fields g(*s, f.where("scenarios"),
                 {"drift_escalation_magnitude", "offset_shock_magnitude", "stealthy_ramp", "stealthy_eps_t",
                  "stealthy_eps_d", "onset_min_fraction", "onset_max_fraction"});
        g.opt("drift_escalation_magnitude", c.scenarios.drift_escalation_magnitude);
        g.opt("offset_shock_magnitude", c.scenarios.offset_shock_magnitude);
        g.opt("stealthy_ramp", c.scenarios.stealthy_ramp);
        g.opt("stealthy_eps_t", c.scenarios.stealthy_eps_t);
        g.opt("stealthy_eps_d", c.scenarios.stealthy_eps_d);
        g.opt("onset_min_fraction", c.scenarios.onset_min_fraction);
        g.opt("onset_max_fraction", c.scenarios.onset_max_fraction);
    }
    if (const json* s = f.sub("clock")) {
        Fields g(*s, f.where("clock"),
                 {"alpha_min", "alpha_max", "sigma_min", "sigma_max", "shock_prob", "shock_scale", "jitter_scale"});
        g.opt("alpha_min", c.clock.alpha_min);
        g.opt("alpha_max", c.clock.alpha_max);
        g.opt("sigma_min", c.clock.sigma_min);
        g.opt("sigma_max", c.clock.sigma_max);
        g.opt("shock_prob", c.clock.shock_prob);
        g.opt("shock_scale", c.clock.shock_scale);
        g.opt("jitter_scale", c.clock.jitter_scale);
    }
    if (const json* s = f.sub("physical")) {
        Fields g(*s, f.where("physical"), {"n_features", "base_period", "noise_scale"});
        g.opt("n_features", c.physical.n_features);
        g.opt("base_period", c.physical.base_period);
        g.opt("noise_scale", c.physical.noise_scale);
    }
    if (const json* s = f.sub("fractions")) {
        Fields g(*s, f.where("fractions"), {"train", "val", "test"});
        g.opt("train", c.fractions.train);
        g.opt("val", c.fractions.val);
        g.opt("test", c.fractions.test);
    }
    if (const json* s = f.sub("graph")) c.graph = graph_from_json(*s, c.graph, f.where("graph"));
    c.validate();  // messages already name the dataset field
    return c;
}

json to_json(const eval::EvalOptions& o) {
    json variants = json::array(), seeds = json::array(), kinds = json::array();
    for (auto v : o.variants) variants.push_back(eval::to_string(v));
    for (auto s : o.seeds) seeds.push_back(s);
    for (auto k : o.probe_kinds) kinds.push_back(datagen::to_string(k));
    return {{"variants", variants},
            {"seeds", seeds},
            {"detector", to_json(o.detector)},
            {"window_threshold", o.window_threshold},
            {"probe_groups", o.probe_groups},
            {"probe_length", o.probe_length},
            {"probe_kinds", kinds}};
}

eval::EvalOptions eval_from_json(const json& j, eval::EvalOptions o, const std::string& path) {
    Fields f(j, path,
             {"variants", "seeds", "detector", "window_threshold", "probe_groups", "probe_length", "probe_kinds"});
    try {
        if (const json* v = f.sub("variants")) {
            o.variants.clear();
            for (const auto& x : *v) o.variants.push_back(eval::variant_from_string(x.get<std::string>()));
        }
        if (const json* v = f.sub("probe_kinds")) {
            o.probe_kinds.clear();
            for (const auto& x : *v) o.probe_kinds.push_back(datagen::scenario_from_string(x.get<std::string>()));
        }
    } catch (const json::exception&) {
        throw ValidationError(path + ": variants and probe_kinds must be arrays of names");
    } catch (const ValidationError& e) {
        throw ValidationError(path + ": " + e.what());
    }
    f.opt("seeds", o.seeds);
    f.opt("window_threshold", o.window_threshold);
    f.opt("probe_groups", o.probe_groups);
    f.opt("probe_length", o.probe_length);
    if (const json* d = f.sub("detector")) o.detector = detector_from_json(*d, o.detector, f.where("detector"));
    if (o.seeds.empty()) throw ValidationError(path + ".seeds: must not be empty");
    if (o.variants.empty()) throw ValidationError(path + ".variants: must not be empty");
    if (o.probe_groups < 0) throw ValidationError(path + ".probe_groups: must be >= 0");
    return o;
}

json read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

}  // namespace tg::config
