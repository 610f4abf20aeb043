#pragma once

// Spatio-temporal graph attention detector: drift-aware embedding, residual
// temporal self-attention, graph attention fusion, prediction heads,
// encoder curvature, composite loss with exact gradients, and training.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "timeguard/core/exec.hpp"
#include "timeguard/core/mat.hpp"
#include "timeguard/datagen.hpp"
#include "timeguard/graph.hpp"

namespace tg::stgat {

/// How the curvature target is chosen for the hinge penalty.
enum class CurvatureTarget {
    fixed,         ///< hyper.mu_k
    nominal_mean,  ///< mean curvature over the batch's nominal-labeled steps
};

struct HyperParams {
    int d_model = 16;
    int n_layers = 2;
    double lambda_rec = 1e-3;
    double lambda_cls = 1.0;
    double lambda_delta = 1e-3;
    double lambda_k = 1e-3;
    CurvatureTarget mu_k_mode = CurvatureTarget::fixed;
    double mu_k = 1.0;
    double lambda_over = 0.1;        // auxiliary overflow-head cross-entropy
    int overflow_horizon = 5;        // steps of look-ahead for the overflow-head label
    double overflow_margin = 10.0;   // seconds below T0 at which the proximity flag rises
    double learning_rate = 0.05;
    double grad_clip = 5.0;          // global gradient-norm cap, 0 disables
    int epochs = 40;
    std::uint64_t seed = 1;
    bool use_drift_embedding = true;
    bool use_graph_attention = true;
    bool use_curvature_loss = true;
    bool use_time_features = true;   // append the squashed time-aware features to x

    void validate() const;
};

struct LayerParams {
    Mat wq, wk, wv;  // d_model x d_model

    friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

/// Every learnable tensor. Gradients use the same structure.
struct ModelParams {
    Mat w_emb;    // F x 4 drift embedding
    Mat proj;     // d_model x F input projection
    Mat proj_b;   // 1 x d_model
    std::vector<LayerParams> layers;
    Mat gat_w;    // d_model x d_model
    Mat gat_a;    // 1 x 2 d_model  ([a_self | a_neighbor])
    Mat cls_w;    // 1 x 2 d_model
    Mat cls_b;    // 1 x 1
    Mat drift_w;  // 1 x 2 d_model
    Mat drift_b;  // 1 x 1
    Mat rec_w;    // F x 2 d_model
    Mat rec_b;    // 1 x F
    Mat over_w;   // 1 x 4 weights over [delta_hat, v, a, o]

    std::size_t n_features() const { return w_emb.rows; }
    std::size_t d_model() const { return proj.rows; }

    std::vector<std::pair<std::string, Mat*>> tensors();
    std::vector<std::pair<std::string, const Mat*>> tensors() const;

    /// Same shapes, all zeros.
    ModelParams zeros_like() const;

    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Seeded uniform initialization in [-1/sqrt(fan_in), 1/sqrt(fan_in)]; biases 0.
ModelParams init_params(std::size_t n_features, const HyperParams& hyper);

/// One device's window of normalized model inputs and targets.
struct DeviceWindow {
    Mat x;                        // T x F physical features
    Mat d;                        // T x 4 drift inputs
    std::vector<int> labels;      // per-step anomaly labels
    std::vector<double> delta;    // per-step drift target, seconds (not normalized)
    std::vector<double> prox;     // per-step overflow proximity flag
    std::vector<int> over_label;  // per-step overflow-head label

    std::size_t steps() const { return x.rows; }
};

struct Batch {
    std::vector<DeviceWindow> devices;
    DeviceGraph graph;

    void validate(std::size_t n_features) const;
};

/// A device's full normalized series, sliced into windows for batches.
struct DeviceSeries {
    int device_id = 0;
    DeviceWindow all;
    std::vector<double> tau;  // internal reported timestamps (seconds)
    datagen::ScenarioSpec scenario;

    DeviceWindow slice(std::int64_t start, std::int64_t window) const;
};

/// Normalizes x and the continuous drift inputs with `stats` and derives the
/// proximity flags and overflow-head labels.
DeviceSeries prepare_series(const datagen::DeviceTrace& trace, const datagen::NormStats& stats, const HyperParams& hyper);

/// sign(v) * log1p(|v|) per time-aware feature.
std::array<double, datagen::kTimeFeatures> squash_time_features(
    const std::array<double, datagen::kTimeFeatures>& raw);

/// Model input row: normalized physical features, followed by the squashed
/// raw time-aware features when hyper.use_time_features is set.
std::vector<double> model_inputs(std::span<const double> x_norm,
                                 const std::array<double, datagen::kTimeFeatures>& time_raw, const HyperParams& hyper);

/// Model input width for F physical features.
std::size_t model_input_width(std::size_t n_physical, const HyperParams& hyper);

/// Normalizes one raw [dt, delta, eta, o] vector.
std::array<double, 4> normalize_drift_inputs(const std::array<double, 4>& raw, const datagen::NormStats& stats);

Batch make_batch(const std::vector<const DeviceSeries*>& series, std::int64_t start, std::int64_t window,
                 const DeviceGraph& graph);

// ---- individual operators -------------------------------------------------

/// z = project(x + W_emb d); without the drift embedding, z = project(x).
std::vector<double> drift_embed(std::span<const double> x, std::span<const double> d, const ModelParams& params,
                                const HyperParams& hyper);

/// Residual self-attention: softmax(H Wq (H Wk)^T / sqrt(d)) H Wv + H.
/// The attention matrix is written to `attention` when non-null.
Mat temporal_attention_block(const Mat& h, const LayerParams& layer, Mat* attention = nullptr);

struct GatTrace {
    std::vector<std::vector<int>> neighborhoods;
    std::vector<std::vector<double>> alpha;  // alpha[i][k] pairs with neighborhoods[i][k]
    Mat transformed;                         // N x d_model, rows W h_j
    Mat pre_activation;                      // N x d_model
};

/// Graph attention over device node features (N x d_model); returns the input
/// unchanged when graph attention is disabled.
Mat gat_layer(const Mat& nodes, const DeviceGraph& graph, const ModelParams& params, const HyperParams& hyper,
              GatTrace* trace = nullptr);

/// d_model x 4 Jacobian of the embedding output with respect to the drift inputs.
Mat encoder_jacobian(const ModelParams& params, const HyperParams& hyper);

/// ||J^T J - I||_F for the embedding Jacobian. The embedding is affine in the
/// drift inputs, so the value does not depend on x or d.
double encoder_curvature(std::span<const double> x, std::span<const double> d, const ModelParams& params,
                         const HyperParams& hyper);

/// Per-step inputs [delta_hat, v, a, o] for the overflow head, where v and a
/// are first and second differences of delta_hat (0 where undefined).
std::vector<std::array<double, 4>> predict_overflow_inputs(std::span<const double> delta_hat,
                                                           std::span<const double> proximity);

/// 1 iff tau >= T0 - margin.
double overflow_proximity(double tau, double margin);

// ---- full model ------------------------------------------------------------

struct DeviceCache {
    Mat u;                   // T x F embedded inputs
    std::vector<Mat> h;      // L+1 hidden states, T x d_model
    std::vector<Mat> q, k, v, attn;
    std::vector<double> pooled;
};

struct DeviceOutput {
    std::vector<double> logit;
    std::vector<double> p_hat;
    std::vector<double> delta_hat;
    Mat x_hat;                                   // T x F
    std::vector<std::array<double, 4>> over_inputs;
    std::vector<double> over_logit;
    std::vector<double> p_over;
    std::vector<double> k_vals;
};

struct ForwardResult {
    std::vector<DeviceOutput> devices;
    std::vector<DeviceCache> caches;
    GatTrace gat;
    Mat fused;  // N x d_model graph-fused vectors
    double curvature = 0.0;
};

ForwardResult forward(const Batch& batch, const ModelParams& params, const HyperParams& hyper,
                      Exec exec = Exec::serial);

struct LossBreakdown {
    double total = 0.0;
    double rec = 0.0;
    double cls = 0.0;
    double drift = 0.0;
    double curvature = 0.0;
    double overflow = 0.0;
};

/// Composite objective: lambda_rec ||X - X_hat||^2 + lambda_cls * mean per-step
/// BCE + lambda_delta * sum_t |diff(delta_hat) - diff(delta)| +
/// lambda_K * sum_t (K - mu_K)_+^2 + lambda_over * mean overflow-head BCE.
LossBreakdown composite_loss(const ForwardResult& fwd, const Batch& batch, const HyperParams& hyper);

struct Gradient {
    LossBreakdown loss;
    ModelParams grad;
};

/// Exact gradient of composite_loss with respect to every parameter.
/// Per-device contributions are reduced in device order, so serial and
/// parallel execution agree bit for bit. Throws RuntimeError on a non-finite loss.
Gradient grad(const Batch& batch, const ModelParams& params, const HyperParams& hyper, Exec exec = Exec::serial);

/// params -= lr * grad
void sgd_step(ModelParams& params, const ModelParams& g, double lr);

/// Rescales g to L2 norm `max_norm` when it is larger; returns the original norm.
double clip_gradient(ModelParams& g, double max_norm);

struct FitOptions {
    Exec exec = Exec::serial;
    std::function<void(int epoch, double loss)> on_epoch;
};

struct FitResult {
    ModelParams params;
    std::vector<double> epoch_loss;
};

/// Plain gradient descent over mini-batches (one window position across all
/// training devices per batch), epochs x shuffled window starts.
FitResult fit(const datagen::Dataset& dataset, const HyperParams& hyper, const FitOptions& options = {});

/// Same as fit, with pre-built training series and graph.
FitResult fit_series(const std::vector<DeviceSeries>& train, const DeviceGraph& graph, std::int64_t window,
                     std::int64_t stride, const HyperParams& hyper, const FitOptions& options = {});

struct SeriesPrediction {
    std::vector<double> p_hat;
    std::vector<double> delta_hat;
    std::vector<std::array<double, 4>> over_inputs;
    std::vector<double> p_over;
};

/// Per-step predictions over whole series. The series are tiled into
/// consecutive windows (the last one aligned to the series end) and every
/// step takes the output of the tile that contains it.
std::vector<SeriesPrediction> predict_series(const std::vector<const DeviceSeries*>& series, const DeviceGraph& graph,
                                             std::int64_t window, const ModelParams& params,
                                             const HyperParams& hyper, Exec exec = Exec::serial);

// ---- checkpoints -----------------------------------------------------------

struct Checkpoint {
    HyperParams hyper;
    ModelParams params;
    datagen::NormStats normalization;
    std::int64_t window = 60;
    double dt = 1.0;
};

/// JSON object of every hyperparameter.
nlohmann::json hyper_json(const HyperParams& h);
/// Overrides the fields present in `j` on top of `base`.
HyperParams hyper_from_json(const nlohmann::json& j, HyperParams base);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace tg::stgat
