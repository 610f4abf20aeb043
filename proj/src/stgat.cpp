#include "timeguard/stgat.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "timeguard/core/error.hpp"
#include "timeguard/core/kernels.hpp"
#include "timeguard/core/rng.hpp"

namespace tg::stgat {

namespace {

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// log(1 + e^z) without overflow
double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

// Binary cross-entropy of a logit against a 0/1 target.
double bce_logit(double z, int y) { return y ? softplus(-z) : softplus(z); }

Mat uniform_mat(std::size_t rows, std::size_t cols, double fan_in, std::mt19937_64& rng) {
    Mat m(rows, cols);
    const double bound = 1.0 / std::sqrt(fan_in);
    for (double& v : m.data) v = (2.0 * uniform_draw(rng) - 1.0) * bound;
    return m;
}

void check_shape(const Mat& m, std::size_t r, std::size_t c, const char* what) {
    if (m.rows != r || m.cols != c)
        throw ValidationError(std::string(what) + ": expected " + std::to_string(r) + "x" + std::to_string(c) +
                              ", got " + std::to_string(m.rows) + "x" + std::to_string(m.cols));
}

double dot(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

// Rows of `m` plus the bias row vector.
void add_row_bias(Mat& m, const Mat& bias) {
    for (std::size_t r = 0; r < m.rows; ++r)
        for (std::size_t c = 0; c < m.cols; ++c) m(r, c) += bias.data[c];
}

double curvature_of(const Mat& j) {
    const Mat g = kernels::matmul_tn(j, j);
    double s = 0.0;
    for (std::size_t r = 0; r < g.rows; ++r)
        for (std::size_t c = 0; c < g.cols; ++c) {
            const double v = g(r, c) - (r == c ? 1.0 : 0.0);
            s += v * v;
        }
    return std::sqrt(s);
}

struct LayerOut {
    Mat q, k, v, attn, out;
};

LayerOut attention_forward(const Mat& h, const LayerParams& layer) {
    LayerOut o;
    o.q = kernels::matmul(h, layer.wq);
    o.k = kernels::matmul(h, layer.wk);
    o.v = kernels::matmul(h, layer.wv);
    o.attn = kernels::matmul_nt(o.q, o.k);
    const double scale = 1.0 / std::sqrt(static_cast<double>(h.cols));
    for (double& x : o.attn.data) x *= scale;
    kernels::softmax_rows(o.attn);
    o.out = kernels::matmul(o.attn, o.v);
    kernels::add_inplace(o.out, h);
    return o;
}

}  // namespace

void HyperParams::validate() const {
    auto nonneg = [](double v, const char* name) {
        if (!std::isfinite(v) || v < 0.0) throw ValidationError(std::string("hyper: ") + name + " must be >= 0");
    };
    nonneg(lambda_rec, "lambda_rec");
    nonneg(lambda_cls, "lambda_cls");
    nonneg(lambda_delta, "lambda_delta");
    nonneg(lambda_k, "lambda_k");
    nonneg(lambda_over, "lambda_over");
    nonneg(mu_k, "mu_k");
    nonneg(overflow_margin, "overflow_margin");
    if (d_model < 4) throw ValidationError("hyper: d_model must be >= 4");
    if (n_layers < 1) throw ValidationError("hyper: n_layers must be >= 1");
    if (!std::isfinite(learning_rate) || learning_rate <= 0.0)
        throw ValidationError("hyper: learning_rate must be > 0");
    if (!std::isfinite(grad_clip) || grad_clip < 0.0) throw ValidationError("hyper: grad_clip must be >= 0");
    if (epochs < 0) throw ValidationError("hyper: epochs must be >= 0");
    if (overflow_horizon < 0) throw ValidationError("hyper: overflow_horizon must be >= 0");
}

std::vector<std::pair<std::string, Mat*>> ModelParams::tensors() {
    std::vector<std::pair<std::string, Mat*>> out{{"w_emb", &w_emb}, {"proj", &proj}, {"proj_b", &proj_b}};
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        out.emplace_back(p + "wq", &layers[l].wq);
        out.emplace_back(p + "wk", &layers[l].wk);
        out.emplace_back(p + "wv", &layers[l].wv);
    }
    out.insert(out.end(), {{"gat_w", &gat_w},
                           {"gat_a", &gat_a},
                           {"cls_w", &cls_w},
                           {"cls_b", &cls_b},
                           {"drift_w", &drift_w},
                           {"drift_b", &drift_b},
                           {"rec_w", &rec_w},
                           {"rec_b", &rec_b},
                           {"over_w", &over_w}});
    return out;
}

std::vector<std::pair<std::string, const Mat*>> ModelParams::tensors() const {
    auto mut = const_cast<ModelParams*>(this)->tensors();
    std::vector<std::pair<std::string, const Mat*>> out;
    out.reserve(mut.size());
    for (auto& [name, m] : mut) out.emplace_back(name, m);
    return out;
}

ModelParams ModelParams::zeros_like() const {
    ModelParams z = *this;
    for (auto& [name, m] : z.tensors()) m->fill(0.0);
    return z;
}

ModelParams init_params(std::size_t n_features, const HyperParams& hyper) {
    hyper.validate();
    if (n_features == 0) throw ValidationError("init_params: n_features must be > 0");
    const auto F = n_features;
    const auto D = static_cast<std::size_t>(hyper.d_model);
    auto rng = make_rng(hyper.seed, Stream::init);
    ModelParams p;
    p.w_emb = uniform_mat(F, 4, 4.0, rng);
    p.proj = uniform_mat(D, F, static_cast<double>(F), rng);
    p.proj_b = Mat(1, D);
    for (int l = 0; l < hyper.n_layers; ++l) {
        LayerParams lp;
        lp.wq = uniform_mat(D, D, static_cast<double>(D), rng);
        lp.wk = uniform_mat(D, D, static_cast<double>(D), rng);
        lp.wv = uniform_mat(D, D, static_cast<double>(D), rng);
        p.layers.push_back(std::move(lp));
    }
    p.gat_w = uniform_mat(D, D, static_cast<double>(D), rng);
    p.gat_a = uniform_mat(1, 2 * D, static_cast<double>(2 * D), rng);
    p.cls_w = uniform_mat(1, 2 * D, static_cast<double>(2 * D), rng);
    p.cls_b = Mat(1, 1);
    p.drift_w = uniform_mat(1, 2 * D, static_cast<double>(2 * D), rng);
    p.drift_b = Mat(1, 1);
    p.rec_w = uniform_mat(F, 2 * D, static_cast<double>(2 * D), rng);
    p.rec_b = Mat(1, F);
    p.over_w = uniform_mat(1, 4, 4.0, rng);
    return p;
}

// ---- data plumbing ----------------------------------------------------------

void Batch::validate(std::size_t n_features) const {
    if (devices.empty()) throw ValidationError("batch: no devices");
    if (graph.n_nodes != static_cast<int>(devices.size()))
        throw ValidationError("batch: graph has " + std::to_string(graph.n_nodes) + " nodes for " +
                              std::to_string(devices.size()) + " devices");
    graph.validate();
    const std::size_t T = devices.front().steps();
    if (T == 0) throw ValidationError("batch: empty window");
    for (const auto& w : devices) {
        check_shape(w.x, T, n_features, "batch x");
        check_shape(w.d, T, datagen::kDriftDims, "batch d");
        if (w.labels.size() != T || w.delta.size() != T || w.prox.size() != T || w.over_label.size() != T)
            throw ValidationError("batch: per-step vectors must have the window length");
        for (std::size_t t = 0; t < T; ++t) {
            if (w.labels[t] != 0 && w.labels[t] != 1) throw ValidationError("batch: labels must be 0 or 1");
            if (w.over_label[t] != 0 && w.over_label[t] != 1)
                throw ValidationError("batch: overflow labels must be 0 or 1");
        }
    }
}

double overflow_proximity(double tau, double margin) {
    return tau >= static_cast<double>(clockdyn::kEpochLimit) - margin ? 1.0 : 0.0;
}

std::array<double, 4> normalize_drift_inputs(const std::array<double, 4>& raw, const datagen::NormStats& stats) {
    static const char* kNames[3] = {"dt", "delta", "eta"};
    std::array<double, 4> out = raw;
    for (std::size_t i = 0; i < 3; ++i) {
        const std::size_t c = stats.index_of(kNames[i]);
        const double sd = stats.stddev[c];
        out[i] = sd > 0.0 ? (raw[i] - stats.mean[c]) / sd : raw[i] - stats.mean[c];
    }
    return out;
}

std::array<double, datagen::kTimeFeatures> squash_time_features(
    const std::array<double, datagen::kTimeFeatures>& raw) {
    std::array<double, datagen::kTimeFeatures> out{};
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = std::copysign(std::log1p(std::abs(raw[k])), raw[k]);
    return out;
}

std::size_t model_input_width(std::size_t n_physical, const HyperParams& hyper) {
    return n_physical + (hyper.use_time_features ? datagen::kTimeFeatures : 0);
}

std::vector<double> model_inputs(std::span<const double> x_norm,
                                 const std::array<double, datagen::kTimeFeatures>& time_raw, const HyperParams& hyper) {
    std::vector<double> out(x_norm.begin(), x_norm.end());
    if (hyper.use_time_features) {
        const auto sq = squash_time_features(time_raw);
        out.insert(out.end(), sq.begin(), sq.end());
    }
    return out;
}

DeviceSeries prepare_series(const datagen::DeviceTrace& trace, const datagen::NormStats& stats,
                            const HyperParams& hyper) {
    const auto rows = datagen::normalize_apply(trace.rows, stats);
    const std::size_t T = rows.size();
    const std::size_t F = model_input_width(trace.n_features(), hyper);
    DeviceSeries s;
    s.device_id = trace.device_id;
    s.scenario = trace.scenario;
    s.all.x = Mat(T, F);
    s.all.d = Mat(T, datagen::kDriftDims);
    s.all.labels.resize(T);
    s.all.delta.resize(T);
    s.all.prox.resize(T);
    s.all.over_label.resize(T);
    s.tau.resize(T);
    for (std::size_t t = 0; t < T; ++t) {
        const auto in = model_inputs(rows[t].x, trace.rows[t].time_features, hyper);
        std::copy(in.begin(), in.end(), s.all.x.row(t).begin());
        std::copy(rows[t].d.begin(), rows[t].d.end(), s.all.d.row(t).begin());
        s.all.labels[t] = rows[t].label;
        s.all.delta[t] = trace.rows[t].d[1];
        s.tau[t] = trace.rows[t].tau;
        s.all.prox[t] = overflow_proximity(trace.rows[t].tau, hyper.overflow_margin);
    }
    // The overflow indicator is latched, so "occurs within the next H steps"
    // reduces to its value H steps ahead (clamped to the series end).
    for (std::size_t t = 0; t < T; ++t) {
        const std::size_t ahead = std::min(T - 1, t + static_cast<std::size_t>(hyper.overflow_horizon));
        s.all.over_label[t] = trace.rows[ahead].d[3] > 0.5 ? 1 : 0;
    }
    return s;
}

DeviceWindow DeviceSeries::slice(std::int64_t start, std::int64_t window) const {
    const auto T = static_cast<std::int64_t>(all.steps());
    if (start < 0 || window <= 0 || start + window > T)
        throw ValidationError("slice [" + std::to_string(start) + ", " + std::to_string(start + window) +
                              ") outside series of length " + std::to_string(T));
    const auto s = static_cast<std::size_t>(start);
    const auto w = static_cast<std::size_t>(window);
    DeviceWindow out;
    out.x = Mat(w, all.x.cols);
    out.d = Mat(w, all.d.cols);
    std::copy_n(all.x.data.begin() + static_cast<std::ptrdiff_t>(s * all.x.cols), w * all.x.cols, out.x.data.begin());
    std::copy_n(all.d.data.begin() + static_cast<std::ptrdiff_t>(s * all.d.cols), w * all.d.cols, out.d.data.begin());
    auto sub = [&](const auto& v) {
        return std::decay_t<decltype(v)>(v.begin() + static_cast<std::ptrdiff_t>(s),
                                         v.begin() + static_cast<std::ptrdiff_t>(s + w));
    };
    out.labels = sub(all.labels);
    out.delta = sub(all.delta);
    out.prox = sub(all.prox);
    out.over_label = sub(all.over_label);
    return out;
}

Batch make_batch(const std::vector<const DeviceSeries*>& series, std::int64_t start, std::int64_t window,
                 const DeviceGraph& graph) {
    Batch b;
    b.graph = graph;
    b.devices.reserve(series.size());
    for (const auto* s : series) b.devices.push_back(s->slice(start, window));
    return b;
}

// ---- operators ---------------------------------------------------------------

std::vector<double> drift_embed(std::span<const double> x, std::span<const double> d, const ModelParams& params,
                                const HyperParams& hyper) {
    const std::size_t F = params.n_features();
    const std::size_t D = params.d_model();
    if (x.size() != F || d.size() != datagen::kDriftDims) throw ValidationError("drift_embed: shape mismatch");
    std::vector<double> u(x.begin(), x.end());
    if (hyper.use_drift_embedding)
        for (std::size_t f = 0; f < F; ++f) u[f] += dot(params.w_emb.row(f).data(), d.data(), d.size());
    std::vector<double> z(D);
    for (std::size_t i = 0; i < D; ++i) z[i] = dot(params.proj.row(i).data(), u.data(), F) + params.proj_b.data[i];
    return z;
}

Mat temporal_attention_block(const Mat& h, const LayerParams& layer, Mat* attention) {
    if (h.rows == 0) throw ValidationError("temporal_attention_block: empty sequence");
    check_shape(layer.wq, h.cols, h.cols, "wq");
    check_shape(layer.wk, h.cols, h.cols, "wk");
    check_shape(layer.wv, h.cols, h.cols, "wv");
    LayerOut o = attention_forward(h, layer);
    if (attention) *attention = std::move(o.attn);
    return o.out;
}

Mat gat_layer(const Mat& nodes, const DeviceGraph& graph, const ModelParams& params, const HyperParams& hyper,
              GatTrace* trace) {
    if (graph.n_nodes != static_cast<int>(nodes.rows))
        throw ValidationError("gat_layer: graph nodes do not match feature rows");
    graph.validate();
    if (!hyper.use_graph_attention) return nodes;
    const std::size_t D = nodes.cols;
    const Mat m = kernels::matmul(nodes, params.gat_w);
    const auto hoods = graph.attention_neighborhoods();
    Mat pre(nodes.rows, D);
    std::vector<std::vector<double>> alpha(nodes.rows);
    const double* a_self = params.gat_a.data.data();
    const double* a_nb = a_self + D;
    for (std::size_t i = 0; i < nodes.rows; ++i) {
        const auto& nb = hoods[i];
        const double self_term = dot(a_self, m.row(i).data(), D);
        std::vector<double> e(nb.size());
        double mx = -INFINITY;
        for (std::size_t k = 0; k < nb.size(); ++k) {
            e[k] = self_term + dot(a_nb, m.row(static_cast<std::size_t>(nb[k])).data(), D);
            mx = std::max(mx, e[k]);
        }
        double sum = 0.0;
        for (double& v : e) {
            v = std::exp(v - mx);
            sum += v;
        }
        for (double& v : e) v /= sum;
        for (std::size_t k = 0; k < nb.size(); ++k) {
            const auto src = m.row(static_cast<std::size_t>(nb[k]));
            for (std::size_t c = 0; c < D; ++c) pre(i, c) += e[k] * src[c];
        }
        alpha[i] = std::move(e);
    }
    Mat out = pre;
    for (double& v : out.data) v = std::tanh(v);
    if (trace) {
        trace->neighborhoods = hoods;
        trace->alpha = std::move(alpha);
        trace->transformed = m;
        trace->pre_activation = std::move(pre);
    }
    return out;
}

Mat encoder_jacobian(const ModelParams& params, const HyperParams& hyper) {
    if (!hyper.use_drift_embedding) return Mat(params.d_model(), datagen::kDriftDims);
    return kernels::matmul(params.proj, params.w_emb);
}

double encoder_curvature(std::span<const double> x, std::span<const double> d, const ModelParams& params,
                         const HyperParams& hyper) {
    if (x.size() != params.n_features() || d.size() != datagen::kDriftDims)
        throw ValidationError("encoder_curvature: shape mismatch");
    return curvature_of(encoder_jacobian(params, hyper));
}

std::vector<std::array<double, 4>> predict_overflow_inputs(std::span<const double> delta_hat,
                                                           std::span<const double> proximity) {
    if (delta_hat.size() != proximity.size())
        throw ValidationError("predict_overflow_inputs: sequence lengths differ");
    const std::size_t T = delta_hat.size();
    std::vector<std::array<double, 4>> out(T);
    for (std::size_t t = 0; t < T; ++t) {
        const double v = t >= 1 ? delta_hat[t] - delta_hat[t - 1] : 0.0;
        const double a = t >= 2 ? v - (delta_hat[t - 1] - delta_hat[t - 2]) : 0.0;
        out[t] = {delta_hat[t], v, a, proximity[t]};
    }
    return out;
}

// ---- forward -------------------------------------------------------------------

namespace {

void temporal_forward(const DeviceWindow& w, const ModelParams& params, const HyperParams& hyper, DeviceCache& c) {
    c.u = w.x;
    if (hyper.use_drift_embedding) kernels::add_inplace(c.u, kernels::matmul_nt(w.d, params.w_emb));
    Mat z = kernels::matmul_nt(c.u, params.proj);
    add_row_bias(z, params.proj_b);
    const std::size_t L = params.layers.size();
    c.h.assign(1, std::move(z));
    c.q.resize(L);
    c.k.resize(L);
    c.v.resize(L);
    c.attn.resize(L);
    for (std::size_t l = 0; l < L; ++l) {
        LayerOut o = attention_forward(c.h[l], params.layers[l]);
        c.q[l] = std::move(o.q);
        c.k[l] = std::move(o.k);
        c.v[l] = std::move(o.v);
        c.attn[l] = std::move(o.attn);
        c.h.push_back(std::move(o.out));
    }
    const Mat& top = c.h.back();
    c.pooled.assign(top.cols, 0.0);
    for (std::size_t t = 0; t < top.rows; ++t)
        for (std::size_t j = 0; j < top.cols; ++j) c.pooled[j] += top(t, j);
    for (double& v : c.pooled) v /= static_cast<double>(top.rows);
}

void heads_forward(const DeviceWindow& w, const DeviceCache& c, std::span<const double> g, const ModelParams& params,
                   double curvature, DeviceOutput& out) {
    const Mat& h = c.h.back();
    const std::size_t T = h.rows;
    const std::size_t D = h.cols;
    const std::size_t F = params.n_features();
    const double cls_g = dot(params.cls_w.data.data() + D, g.data(), D) + params.cls_b.data[0];
    const double drift_g = dot(params.drift_w.data.data() + D, g.data(), D) + params.drift_b.data[0];
    std::vector<double> rec_g(F);
    for (std::size_t f = 0; f < F; ++f) rec_g[f] = dot(params.rec_w.row(f).data() + D, g.data(), D) + params.rec_b.data[f];

    out.logit.resize(T);
    out.p_hat.resize(T);
    out.delta_hat.resize(T);
    out.x_hat = Mat(T, F);
    for (std::size_t t = 0; t < T; ++t) {
        const double* ht = h.row(t).data();
        out.logit[t] = dot(params.cls_w.data.data(), ht, D) + cls_g;
        out.p_hat[t] = sigmoid(out.logit[t]);
        out.delta_hat[t] = dot(params.drift_w.data.data(), ht, D) + drift_g;
        for (std::size_t f = 0; f < F; ++f) out.x_hat(t, f) = dot(params.rec_w.row(f).data(), ht, D) + rec_g[f];
    }
    out.over_inputs = predict_overflow_inputs(out.delta_hat, w.prox);
    out.over_logit.resize(T);
    out.p_over.resize(T);
    for (std::size_t t = 0; t < T; ++t) {
        out.over_logit[t] = dot(params.over_w.data.data(), out.over_inputs[t].data(), 4);
        out.p_over[t] = sigmoid(out.over_logit[t]);
    }
    out.k_vals.assign(T, curvature);
}

void check_params(const ModelParams& params, const HyperParams& hyper) {
    const std::size_t F = params.n_features();
    const auto D = static_cast<std::size_t>(hyper.d_model);
    check_shape(params.w_emb, F, 4, "w_emb");
    check_shape(params.proj, D, F, "proj");
    check_shape(params.proj_b, 1, D, "proj_b");
    if (params.layers.size() != static_cast<std::size_t>(hyper.n_layers))
        throw ValidationError("params: layer count does not match hyper.n_layers");
    for (const auto& l : params.layers) {
        check_shape(l.wq, D, D, "wq");
        check_shape(l.wk, D, D, "wk");
        check_shape(l.wv, D, D, "wv");
    }
    check_shape(params.gat_w, D, D, "gat_w");
    check_shape(params.gat_a, 1, 2 * D, "gat_a");
    check_shape(params.cls_w, 1, 2 * D, "cls_w");
    check_shape(params.cls_b, 1, 1, "cls_b");
    check_shape(params.drift_w, 1, 2 * D, "drift_w");
    check_shape(params.drift_b, 1, 1, "drift_b");
    check_shape(params.rec_w, F, 2 * D, "rec_w");
    check_shape(params.rec_b, 1, F, "rec_b");
    check_shape(params.over_w, 1, 4, "over_w");
}

double curvature_target(const Batch& batch, const HyperParams& hyper, double curvature) {
    if (hyper.mu_k_mode == CurvatureTarget::fixed) return hyper.mu_k;
    // K is the same at every step, so the nominal-step mean is K itself
    // whenever the batch has a nominal step.
    for (const auto& w : batch.devices)
        for (int y : w.labels)
            if (y == 0) return curvature;
    return hyper.mu_k;
}

}  // namespace

ForwardResult forward(const Batch& batch, const ModelParams& params, const HyperParams& hyper, Exec exec) {
    hyper.validate();
    check_params(params, hyper);
    batch.validate(params.n_features());
    const std::size_t N = batch.devices.size();
    const std::size_t D = params.d_model();
    ForwardResult r;
    r.caches.resize(N);
    r.devices.resize(N);
    for_each_index(N, exec, [&](std::size_t n) { temporal_forward(batch.devices[n], params, hyper, r.caches[n]); });
    Mat pooled(N, D);
    for (std::size_t n = 0; n < N; ++n) std::copy(r.caches[n].pooled.begin(), r.caches[n].pooled.end(), pooled.row(n).begin());
    r.fused = gat_layer(pooled, batch.graph, params, hyper, &r.gat);
    r.curvature = curvature_of(encoder_jacobian(params, hyper));
    for_each_index(N, exec, [&](std::size_t n) {
        heads_forward(batch.devices[n], r.caches[n], r.fused.row(n), params, r.curvature, r.devices[n]);
    });
    return r;
}

LossBreakdown composite_loss(const ForwardResult& fwd, const Batch& batch, const HyperParams& hyper) {
    const std::size_t N = batch.devices.size();
    if (fwd.devices.size() != N) throw ValidationError("composite_loss: outputs and batch differ in device count");
    LossBreakdown l;
    double ce = 0.0, ce_over = 0.0, rec = 0.0, drift = 0.0;
    std::size_t steps = 0;
    for (std::size_t n = 0; n < N; ++n) {
        const auto& w = batch.devices[n];
        const auto& o = fwd.devices[n];
        const std::size_t T = w.steps();
        if (o.logit.size() != T || o.x_hat.rows != T || o.x_hat.cols != w.x.cols)
            throw ValidationError("composite_loss: outputs and labels are misaligned");
        for (std::size_t t = 0; t < T; ++t) {
            if (w.labels[t] != 0 && w.labels[t] != 1) throw ValidationError("composite_loss: labels must be 0 or 1");
            ce += bce_logit(o.logit[t], w.labels[t]);
            ce_over += bce_logit(o.over_logit[t], w.over_label[t]);
        }
        for (std::size_t i = 0; i < w.x.size(); ++i) {
            const double e = o.x_hat.data[i] - w.x.data[i];
            rec += e * e;
        }
        for (std::size_t t = 1; t < T; ++t)
            drift += std::abs((o.delta_hat[t] - o.delta_hat[t - 1]) - (w.delta[t] - w.delta[t - 1]));
        steps += T;
    }
    const double mean_div = static_cast<double>(steps);
    l.rec = hyper.lambda_rec * rec;
    l.cls = hyper.lambda_cls * ce / mean_div;
    l.drift = hyper.lambda_delta * drift;
    if (hyper.use_curvature_loss) {
        const double excess = std::max(0.0, fwd.curvature - curvature_target(batch, hyper, fwd.curvature));
        l.curvature = hyper.lambda_k * mean_div * excess * excess;
    }
    l.overflow = hyper.lambda_over * ce_over / mean_div;
    l.total = l.rec + l.cls + l.drift + l.curvature + l.overflow;
    return l;
}

// ---- backward ------------------------------------------------------------------

namespace {

struct DeviceGrad {
    ModelParams g;                // head and temporal contributions
    std::vector<double> d_fused;  // upstream gradient of the fused vector
};

// Head gradients for one device; leaves dL/dH_L in `dh` and dL/dg in out.d_fused.
void heads_backward(const DeviceWindow& w, const DeviceOutput& o, const DeviceCache& c, std::span<const double> g,
                    const ModelParams& params, const HyperParams& hyper, double steps, DeviceGrad& out, Mat& dh) {
    const Mat& h = c.h.back();
    const std::size_t T = h.rows;
    const std::size_t D = h.cols;
    const std::size_t F = params.n_features();
    auto& G = out.g;

    // Upstream scalar gradients per step.
    std::vector<double> dlogit(T), ddelta(T, 0.0), dover(T);
    for (std::size_t t = 0; t < T; ++t) {
        dlogit[t] = hyper.lambda_cls / steps * (o.p_hat[t] - w.labels[t]);
        dover[t] = hyper.lambda_over / steps * (o.p_over[t] - w.over_label[t]);
    }
    for (std::size_t t = 1; t < T; ++t) {
        const double r = (o.delta_hat[t] - o.delta_hat[t - 1]) - (w.delta[t] - w.delta[t - 1]);
        const double s = r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0);
        ddelta[t] += hyper.lambda_delta * s;
        ddelta[t - 1] -= hyper.lambda_delta * s;
    }
    // Overflow head: logit = w_o . [delta_hat, v, a, o].
    const double* wo = params.over_w.data.data();
    for (std::size_t t = 0; t < T; ++t) {
        const auto& q = o.over_inputs[t];
        for (std::size_t i = 0; i < 4; ++i) G.over_w.data[i] += dover[t] * q[i];
        ddelta[t] += dover[t] * wo[0];
        if (t >= 1) {
            const double dv = dover[t] * wo[1];
            ddelta[t] += dv;
            ddelta[t - 1] -= dv;
        }
        if (t >= 2) {
            const double da = dover[t] * wo[2];
            ddelta[t] += da;
            ddelta[t - 1] -= 2.0 * da;
            ddelta[t - 2] += da;
        }
    }
    Mat dxhat(T, F);
    for (std::size_t i = 0; i < dxhat.size(); ++i) dxhat.data[i] = 2.0 * hyper.lambda_rec * (o.x_hat.data[i] - w.x.data[i]);

    // Linear heads over [h_t | g].
    dh = Mat(T, D);
    out.d_fused.assign(D, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        const double* ht = h.row(t).data();
        double* dht = dh.row(t).data();
        G.cls_b.data[0] += dlogit[t];
        G.drift_b.data[0] += ddelta[t];
        for (std::size_t j = 0; j < D; ++j) {
            G.cls_w.data[j] += dlogit[t] * ht[j];
            G.cls_w.data[D + j] += dlogit[t] * g[j];
            G.drift_w.data[j] += ddelta[t] * ht[j];
            G.drift_w.data[D + j] += ddelta[t] * g[j];
            dht[j] += dlogit[t] * params.cls_w.data[j] + ddelta[t] * params.drift_w.data[j];
            out.d_fused[j] += dlogit[t] * params.cls_w.data[D + j] + ddelta[t] * params.drift_w.data[D + j];
        }
        for (std::size_t f = 0; f < F; ++f) {
            const double e = dxhat(t, f);
            G.rec_b.data[f] += e;
            const double* wr = params.rec_w.row(f).data();
            double* gr = G.rec_w.row(f).data();
            for (std::size_t j = 0; j < D; ++j) {
                gr[j] += e * ht[j];
                gr[D + j] += e * g[j];
                dht[j] += e * wr[j];
                out.d_fused[j] += e * wr[D + j];
            }
        }
    }
}

// Backpropagates dL/dH_L (already including the pooling term) through the
// attention stack and the embedding.
void temporal_backward(const DeviceWindow& w, const DeviceCache& c, const ModelParams& params,
                       const HyperParams& hyper, Mat dh, ModelParams& G) {
    const std::size_t D = params.d_model();
    const double scale = 1.0 / std::sqrt(static_cast<double>(D));
    for (std::size_t l = params.layers.size(); l-- > 0;) {
        const auto& lp = params.layers[l];
        const Mat& hin = c.h[l];
        const Mat& a = c.attn[l];
        // out = A V + H
        Mat dA = kernels::matmul_nt(dh, c.v[l]);
        Mat dV = kernels::matmul_tn(a, dh);
        Mat dS(a.rows, a.cols);
        for (std::size_t i = 0; i < a.rows; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < a.cols; ++j) s += a(i, j) * dA(i, j);
            for (std::size_t j = 0; j < a.cols; ++j) dS(i, j) = a(i, j) * (dA(i, j) - s) * scale;
        }
        Mat dQ = kernels::matmul(dS, c.k[l]);
        Mat dK = kernels::matmul_tn(dS, c.q[l]);
        kernels::add_inplace(G.layers[l].wq, kernels::matmul_tn(hin, dQ));
        kernels::add_inplace(G.layers[l].wk, kernels::matmul_tn(hin, dK));
        kernels::add_inplace(G.layers[l].wv, kernels::matmul_tn(hin, dV));
        kernels::add_inplace(dh, kernels::matmul_nt(dQ, lp.wq));
        kernels::add_inplace(dh, kernels::matmul_nt(dK, lp.wk));
        kernels::add_inplace(dh, kernels::matmul_nt(dV, lp.wv));
    }
    // z = u proj^T + b, u = x + d W_emb^T
    kernels::add_inplace(G.proj, kernels::matmul_tn(dh, c.u));
    for (std::size_t t = 0; t < dh.rows; ++t)
        for (std::size_t j = 0; j < D; ++j) G.proj_b.data[j] += dh(t, j);
    if (hyper.use_drift_embedding) {
        const Mat du = kernels::matmul(dh, params.proj);
        kernels::add_inplace(G.w_emb, kernels::matmul_tn(du, w.d));
    }
}

// Backward through the graph attention; returns dL/d(pooled) and accumulates
// gat_w / gat_a gradients.
Mat gat_backward(const Mat& pooled, const Mat& fused, const Mat& d_fused, const GatTrace& tr,
                 const ModelParams& params, const HyperParams& hyper, ModelParams& G) {
    if (!hyper.use_graph_attention) return d_fused;
    const std::size_t N = pooled.rows;
    const std::size_t D = pooled.cols;
    const Mat& m = tr.transformed;
    const double* a_self = params.gat_a.data.data();
    const double* a_nb = a_self + D;
    Mat dm(N, D);
    std::vector<double> ds(D);
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t c = 0; c < D; ++c) ds[c] = d_fused(i, c) * (1.0 - fused(i, c) * fused(i, c));
        const auto& nb = tr.neighborhoods[i];
        const auto& al = tr.alpha[i];
        std::vector<double> dal(nb.size());
        double mix = 0.0;
        for (std::size_t k = 0; k < nb.size(); ++k) {
            const auto j = static_cast<std::size_t>(nb[k]);
            dal[k] = dot(ds.data(), m.row(j).data(), D);
            mix += al[k] * dal[k];
            for (std::size_t c = 0; c < D; ++c) dm(j, c) += al[k] * ds[c];
        }
        for (std::size_t k = 0; k < nb.size(); ++k) {
            const auto j = static_cast<std::size_t>(nb[k]);
            const double de = al[k] * (dal[k] - mix);
            for (std::size_t c = 0; c < D; ++c) {
                G.gat_a.data[c] += de * m(i, c);
                G.gat_a.data[D + c] += de * m(j, c);
                dm(i, c) += de * a_self[c];
                dm(j, c) += de * a_nb[c];
            }
        }
    }
    kernels::add_inplace(G.gat_w, kernels::matmul_tn(pooled, dm));
    return kernels::matmul_nt(dm, params.gat_w);
}

bool all_finite(const ModelParams& p) {
    for (const auto& [name, m] : p.tensors())
        for (double v : m->data)
            if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace

Gradient grad(const Batch& batch, const ModelParams& params, const HyperParams& hyper, Exec exec) {
    const ForwardResult fwd = forward(batch, params, hyper, exec);
    Gradient out;
    out.loss = composite_loss(fwd, batch, hyper);
    if (!std::isfinite(out.loss.total))
        throw RuntimeError("non-finite loss (rec=" + std::to_string(out.loss.rec) + ", cls=" +
                           std::to_string(out.loss.cls) + ", drift=" + std::to_string(out.loss.drift) +
                           ", curvature=" + std::to_string(out.loss.curvature) + ", overflow=" +
                           std::to_string(out.loss.overflow) + ")");
    const std::size_t N = batch.devices.size();
    const std::size_t D = params.d_model();
    double steps = 0.0;
    for (const auto& w : batch.devices) steps += static_cast<double>(w.steps());

    const ModelParams zero = params.zeros_like();
    std::vector<DeviceGrad> dev(N);
    std::vector<Mat> dh(N);
    for_each_index(N, exec, [&](std::size_t n) {
        dev[n].g = zero;
        heads_backward(batch.devices[n], fwd.devices[n], fwd.caches[n], fwd.fused.row(n), params, hyper, steps, dev[n],
                       dh[n]);
    });

    Mat pooled(N, D), d_fused(N, D);
    for (std::size_t n = 0; n < N; ++n) {
        std::copy(fwd.caches[n].pooled.begin(), fwd.caches[n].pooled.end(), pooled.row(n).begin());
        std::copy(dev[n].d_fused.begin(), dev[n].d_fused.end(), d_fused.row(n).begin());
    }
    ModelParams graph_grad = zero;
    const Mat d_pooled = gat_backward(pooled, fwd.fused, d_fused, fwd.gat, params, hyper, graph_grad);

    for_each_index(N, exec, [&](std::size_t n) {
        Mat& d = dh[n];
        const double inv_t = 1.0 / static_cast<double>(d.rows);
        for (std::size_t t = 0; t < d.rows; ++t)
            for (std::size_t j = 0; j < D; ++j) d(t, j) += d_pooled(n, j) * inv_t;
        temporal_backward(batch.devices[n], fwd.caches[n], params, hyper, std::move(d), dev[n].g);
    });

    // Reduce in device order, then the graph and curvature terms.
    out.grad = zero;
    auto dst = out.grad.tensors();
    for (std::size_t n = 0; n < N; ++n) {
        auto src = std::as_const(dev[n].g).tensors();
        for (std::size_t i = 0; i < dst.size(); ++i) kernels::add_inplace(*dst[i].second, *src[i].second);
    }
    {
        auto src = std::as_const(graph_grad).tensors();
        for (std::size_t i = 0; i < dst.size(); ++i) kernels::add_inplace(*dst[i].second, *src[i].second);
    }
    if (hyper.use_curvature_loss && hyper.use_drift_embedding && fwd.curvature > 0.0) {
        const double excess = std::max(0.0, fwd.curvature - curvature_target(batch, hyper, fwd.curvature));
        if (excess > 0.0) {
            // dK/dJ = (2/K) J (J^T J - I)
            const Mat j = encoder_jacobian(params, hyper);
            Mat gm = kernels::matmul_tn(j, j);
            for (std::size_t i = 0; i < gm.rows; ++i) gm(i, i) -= 1.0;
            Mat dj = kernels::matmul(j, gm);
            const double coef = hyper.lambda_k * steps * 2.0 * excess * 2.0 / fwd.curvature;
            for (double& v : dj.data) v *= coef;
            // J = proj W_emb
            kernels::add_inplace(out.grad.proj, kernels::matmul_nt(dj, params.w_emb));
            kernels::add_inplace(out.grad.w_emb, kernels::matmul_tn(params.proj, dj));
        }
    }
    return out;
}

double clip_gradient(ModelParams& g, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, m] : g.tensors())
        for (double v : m->data) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm > max_norm && max_norm > 0.0)
        for (auto& [name, m] : g.tensors())
            for (double& v : m->data) v *= max_norm / norm;
    return norm;
}

void sgd_step(ModelParams& params, const ModelParams& g, double lr) {
    auto dst = params.tensors();
    auto src = g.tensors();
    if (dst.size() != src.size()) throw ValidationError("sgd_step: gradient structure mismatch");
    for (std::size_t i = 0; i < dst.size(); ++i) {
        if (dst[i].second->size() != src[i].second->size())
            throw ValidationError("sgd_step: shape mismatch in " + dst[i].first);
        kernels::axpy(*dst[i].second, -lr, *src[i].second);
    }
}

// ---- training ------------------------------------------------------------------

FitResult fit_series(const std::vector<DeviceSeries>& train, const DeviceGraph& graph, std::int64_t window,
                     std::int64_t stride, const HyperParams& hyper, const FitOptions& options) {
    hyper.validate();
    if (train.empty()) throw ValidationError("fit: empty training split");
    if (window <= 0 || stride <= 0) throw ValidationError("fit: window and stride must be > 0");
    const auto length = static_cast<std::int64_t>(train.front().all.steps());
    for (const auto& s : train)
        if (static_cast<std::int64_t>(s.all.steps()) != length)
            throw ValidationError("fit: training series differ in length");
    if (length < window) throw ValidationError("fit: series shorter than the window");

    std::vector<std::int64_t> starts;
    for (std::int64_t s = 0; s + window <= length; s += stride) starts.push_back(s);
    std::vector<const DeviceSeries*> ptrs;
    for (const auto& s : train) ptrs.push_back(&s);

    FitResult r;
    r.params = init_params(train.front().all.x.cols, hyper);
    auto rng = make_rng(hyper.seed, Stream::shuffle);
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        for (std::size_t i = starts.size(); i > 1; --i) std::swap(starts[i - 1], starts[rng() % i]);
        double total = 0.0;
        for (std::int64_t s : starts) {
            const Batch b = make_batch(ptrs, s, window, graph);
            Gradient g;
            try {
                g = grad(b, r.params, hyper, options.exec);
            } catch (const RuntimeError& e) {
                throw RuntimeError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
            }
            if (hyper.grad_clip > 0.0) clip_gradient(g.grad, hyper.grad_clip);
            sgd_step(r.params, g.grad, hyper.learning_rate);
            total += g.loss.total;
        }
        const double mean = total / static_cast<double>(starts.size());
        if (!std::isfinite(mean) || !all_finite(r.params))
            throw RuntimeError("training diverged at epoch " + std::to_string(epoch));
        r.epoch_loss.push_back(mean);
        if (options.on_epoch) options.on_epoch(epoch, mean);
    }
    return r;
}

FitResult fit(const datagen::Dataset& dataset, const HyperParams& hyper, const FitOptions& options) {
    const auto& m = dataset.manifest;
    const auto idx = m.devices_in(datagen::Split::train);
    if (idx.empty()) throw ValidationError("fit: dataset has no training devices");
    std::vector<DeviceSeries> series;
    std::vector<int> nodes;
    for (std::size_t i : idx) {
        series.push_back(prepare_series(dataset.traces[i], m.normalization, hyper));
        nodes.push_back(static_cast<int>(i));
    }
    return fit_series(series, dataset.graph.induced(nodes), m.window, m.stride, hyper, options);
}

std::vector<SeriesPrediction> predict_series(const std::vector<const DeviceSeries*>& series, const DeviceGraph& graph,
                                             std::int64_t window, const ModelParams& params,
                                             const HyperParams& hyper, Exec exec) {
    if (series.empty()) return {};
    const auto length = static_cast<std::int64_t>(series.front()->all.steps());
    for (const auto* s : series)
        if (static_cast<std::int64_t>(s->all.steps()) != length)
            throw ValidationError("predict_series: series differ in length");
    const std::int64_t w = std::min(window, length);
    std::vector<SeriesPrediction> out(series.size());
    for (auto& p : out) {
        p.p_hat.resize(static_cast<std::size_t>(length));
        p.delta_hat.resize(static_cast<std::size_t>(length));
        p.over_inputs.resize(static_cast<std::size_t>(length));
        p.p_over.resize(static_cast<std::size_t>(length));
    }
    for (std::int64_t covered = 0; covered < length;) {
        const std::int64_t start = std::min(covered, length - w);
        const Batch b = make_batch(series, start, w, graph);
        const ForwardResult f = forward(b, params, hyper, exec);
        for (std::size_t n = 0; n < series.size(); ++n) {
            const auto& o = f.devices[n];
            for (std::int64_t t = covered; t < start + w; ++t) {
                const auto k = static_cast<std::size_t>(t - start);
                const auto u = static_cast<std::size_t>(t);
                out[n].p_hat[u] = o.p_hat[k];
                out[n].delta_hat[u] = o.delta_hat[k];
            }
        }
        covered = start + w;
    }
    // Differences for the overflow head run across tile boundaries.
    for (std::size_t n = 0; n < series.size(); ++n) {
        auto& p = out[n];
        p.over_inputs = predict_overflow_inputs(p.delta_hat, series[n]->all.prox);
        for (std::size_t t = 0; t < p.p_over.size(); ++t)
            p.p_over[t] = sigmoid(dot(params.over_w.data.data(), p.over_inputs[t].data(), 4));
    }
    return out;
}

}  // namespace tg::stgat
