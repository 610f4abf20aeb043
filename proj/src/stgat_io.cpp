#include <fstream>

#include <nlohmann/json.hpp>

#include "timeguard/core/error.hpp"
#include "timeguard/stgat.hpp"

namespace tg::stgat {

using nlohmann::json;

namespace {

constexpr const char* kFormat = "timeguard-checkpoint";
constexpr int kVersion = 1;

json hyper_to_json(const HyperParams& h) {
    return {{"d_model", h.d_model},
            {"n_layers", h.n_layers},
            {"lambda_rec", h.lambda_rec},
            {"lambda_cls", h.lambda_cls},
            {"lambda_delta", h.lambda_delta},
            {"lambda_k", h.lambda_k},
            {"mu_k_mode", h.mu_k_mode == CurvatureTarget::fixed ? "fixed" : "nominal_mean"},
            {"mu_k", h.mu_k},
            {"lambda_over", h.lambda_over},
            {"overflow_horizon", h.overflow_horizon},
            {"overflow_margin", h.overflow_margin},
            {"learning_rate", h.learning_rate},
            {"grad_clip", h.grad_clip},
            {"epochs", h.epochs},
            {"seed", h.seed},
            {"use_drift_embedding", h.use_drift_embedding},
            {"use_graph_attention", h.use_graph_attention},
            {"use_curvature_loss", h.use_curvature_loss},
            {"use_time_features", h.use_time_features}};
}

}  // namespace

HyperParams hyper_from_json(const json& j, HyperParams h) {
    auto opt = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    opt("d_model", h.d_model);
    opt("n_layers", h.n_layers);
    opt("lambda_rec", h.lambda_rec);
    opt("lambda_cls", h.lambda_cls);
    opt("lambda_delta", h.lambda_delta);
    opt("lambda_k", h.lambda_k);
    if (j.contains("mu_k_mode")) {
        const auto mode = j.at("mu_k_mode").get<std::string>();
        if (mode == "fixed")
            h.mu_k_mode = CurvatureTarget::fixed;
        else if (mode == "nominal_mean")
            h.mu_k_mode = CurvatureTarget::nominal_mean;
        else
            throw ValidationError("unknown mu_k_mode '" + mode + "'");
    }
    opt("mu_k", h.mu_k);
    opt("lambda_over", h.lambda_over);
    opt("overflow_horizon", h.overflow_horizon);
    opt("overflow_margin", h.overflow_margin);
    opt("learning_rate", h.learning_rate);
    opt("grad_clip", h.grad_clip);
    opt("epochs", h.epochs);
    opt("seed", h.seed);
    opt("use_drift_embedding", h.use_drift_embedding);
    opt("use_graph_attention", h.use_graph_attention);
    opt("use_curvature_loss", h.use_curvature_loss);
    opt("use_time_features", h.use_time_features);
    return h;
}

json hyper_json(const HyperParams& h) { return hyper_to_json(h); }

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    json tensors = json::object();
    for (const auto& [name, m] : ckpt.params.tensors())
        tensors[name] = {{"shape", {m->rows, m->cols}}, {"data", m->data}};
    const json j{{"format", kFormat},
                 {"version", kVersion},
                 {"hyper", hyper_to_json(ckpt.hyper)},
                 {"window", ckpt.window},
                 {"dt", ckpt.dt},
                 {"n_features", ckpt.params.n_features()},
                 {"normalization",
                  {{"columns", ckpt.normalization.columns},
                   {"mean", ckpt.normalization.mean},
                   {"std", ckpt.normalization.stddev}}},
                 {"tensors", tensors}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeError("cannot write checkpoint " + path.string());
    out << j.dump() << '\n';
    if (!out) throw RuntimeError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot read checkpoint " + path.string());
    Checkpoint c;
    try {
        const json j = json::parse(in);
        if (j.at("format").get<std::string>() != kFormat) throw ValidationError("not a checkpoint file");
        if (j.at("version").get<int>() != kVersion)
            throw ValidationError("unsupported checkpoint version " + std::to_string(j.at("version").get<int>()));
        c.hyper = hyper_from_json(j.at("hyper"), HyperParams{});
        c.hyper.validate();
        c.window = j.at("window").get<std::int64_t>();
        c.dt = j.at("dt").get<double>();
        const auto& n = j.at("normalization");
        c.normalization.columns = n.at("columns").get<std::vector<std::string>>();
        c.normalization.mean = n.at("mean").get<std::vector<double>>();
        c.normalization.stddev = n.at("std").get<std::vector<double>>();
        c.params = init_params(j.at("n_features").get<std::size_t>(), c.hyper);
        const auto& tj = j.at("tensors");
        for (auto& [name, m] : c.params.tensors()) {
            const auto& e = tj.at(name);
            const auto shape = e.at("shape").get<std::vector<std::size_t>>();
            if (shape.size() != 2 || shape[0] != m->rows || shape[1] != m->cols)
                throw ValidationError("tensor " + name + " has the wrong shape");
            m->data = e.at("data").get<std::vector<double>>();
            if (m->data.size() != m->rows * m->cols) throw ValidationError("tensor " + name + " has the wrong size");
        }
    } catch (const json::exception& e) {
        throw ValidationError("checkpoint " + path.string() + ": " + e.what());
    }
    return c;
}

}  // namespace tg::stgat
