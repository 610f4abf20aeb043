#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "helpers.hpp"
#include "oracles.hpp"
#include "timeguard/core/error.hpp"
#include "timeguard/core/kernels.hpp"
#include "timeguard/datagen.hpp"
#include "timeguard/stgat.hpp"

using namespace tg;
using namespace tg::stgat;
using namespace tg::test;

namespace {

HyperParams small_hyper() {
    HyperParams h;
    h.d_model = 8;
    h.n_layers = 2;
    h.lambda_rec = 0.1;
    h.lambda_cls = 1.0;
    h.lambda_delta = 0.1;
    h.lambda_k = 0.1;
    h.mu_k = 0.2;
    h.lambda_over = 0.5;
    h.seed = 7;
    return h;
}

}  // namespace

TEST_CASE("drift_embed: zero drift input reduces to the projection of x") {
    const HyperParams h = small_hyper();
    const ModelParams p = random_params(5, h, 1);
    const std::vector<double> x{0.3, -1.0, 2.0, 0.5, -0.2};
    const std::vector<double> d0(4, 0.0);
    HyperParams off = h;
    off.use_drift_embedding = false;
    const auto with_zero = drift_embed(x, d0, p, h);
    const auto projected = drift_embed(x, std::vector<double>{0.9, 1.0, -3.0, 1.0}, p, off);
    for (std::size_t i = 0; i < with_zero.size(); ++i) CHECK(with_zero[i] == doctest::Approx(projected[i]).epsilon(1e-15));
}

TEST_CASE("drift_embed: zero embedding makes the output independent of d") {
    const HyperParams h = small_hyper();
    ModelParams p = random_params(5, h, 2);
    p.w_emb.fill(0.0);
    const std::vector<double> x{0.3, -1.0, 2.0, 0.5, -0.2};
    const auto a = drift_embed(x, std::vector<double>{0.0, 0.0, 0.0, 0.0}, p, h);
    const auto b = drift_embed(x, std::vector<double>{5.0, -2.0, 1.0, 1.0}, p, h);
    CHECK(a == b);
}

TEST_CASE("drift_embed: central differences in d match proj * W_emb") {
    const HyperParams h = small_hyper();
    const ModelParams p = random_params(5, h, 3);
    const std::vector<double> x{0.3, -1.0, 2.0, 0.5, -0.2};
    std::vector<double> d{0.1, -0.4, 0.7, 0.0};
    const Mat j = kernels::matmul(p.proj, p.w_emb);
    const double eps = 1e-5;
    for (std::size_t c = 0; c < 4; ++c) {
        auto dp = d, dm = d;
        dp[c] += eps;
        dm[c] -= eps;
        const auto zp = drift_embed(x, dp, p, h);
        const auto zm = drift_embed(x, dm, p, h);
        for (std::size_t r = 0; r < zp.size(); ++r) {
            const double fd = (zp[r] - zm[r]) / (2 * eps);
            CHECK(std::abs(fd - j(r, c)) <= 1e-6 * std::max(1.0, std::abs(j(r, c))));
        }
    }
}

TEST_CASE("temporal attention: single step returns z Wv + z") {
    auto rng = make_rng(4, Stream::diag);
    LayerParams l{test::random_mat(6, 6, rng), test::random_mat(6, 6, rng), test::random_mat(6, 6, rng)};
    const Mat z = test::random_mat(1, 6, rng);
    Mat attn;
    const Mat out = temporal_attention_block(z, l, &attn);
    const Mat expect = kernels::matmul(z, l.wv);
    CHECK(attn(0, 0) == 1.0);
    for (std::size_t c = 0; c < 6; ++c) CHECK(out(0, c) == doctest::Approx(expect(0, c) + z(0, c)).epsilon(1e-14));
}

TEST_CASE("temporal attention: identical rows give uniform weights") {
    auto rng = make_rng(5, Stream::diag);
    LayerParams l{test::random_mat(6, 6, rng), test::random_mat(6, 6, rng), test::random_mat(6, 6, rng)};
    const Mat one = test::random_mat(1, 6, rng);
    Mat h(7, 6);
    for (std::size_t r = 0; r < 7; ++r) std::copy(one.data.begin(), one.data.end(), h.row(r).begin());
    Mat attn;
    temporal_attention_block(h, l, &attn);
    for (double a : attn.data) CHECK(a == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
}

TEST_CASE("temporal attention: rows are probability distributions") {
    auto rng = make_rng(6, Stream::diag);
    LayerParams l{test::random_mat(8, 8, rng), test::random_mat(8, 8, rng), test::random_mat(8, 8, rng)};
    const Mat h = test::random_mat(20, 8, rng, 2.0);
    Mat attn;
    temporal_attention_block(h, l, &attn);
    for (std::size_t r = 0; r < attn.rows; ++r) {
        double s = 0.0;
        for (double a : attn.row(r)) {
            CHECK(a >= 0.0);
            s += a;
        }
        CHECK(std::abs(s - 1.0) < 1e-9);
    }
}

TEST_CASE("gat: single neighbor takes all the weight") {
    const HyperParams h = small_hyper();
    const ModelParams p = random_params(5, h, 8);
    auto rng = make_rng(8, Stream::diag);
    const Mat nodes = test::random_mat(2, 8, rng);
    DeviceGraph g{2, {{0, 1, 1.0}}, true};
    GatTrace tr;
    const Mat out = gat_layer(nodes, g, p, h, &tr);
    REQUIRE(tr.neighborhoods[0] == std::vector<int>{1});
    CHECK(tr.alpha[0][0] == 1.0);
    const Mat m = kernels::matmul(nodes, p.gat_w);
    for (std::size_t c = 0; c < 8; ++c) CHECK(out(0, c) == doctest::Approx(std::tanh(m(1, c))).epsilon(1e-14));
}

TEST_CASE("gat: identical neighbors get uniform attention and weights sum to one") {
    const HyperParams h = small_hyper();
    const ModelParams p = random_params(5, h, 9);
    auto rng = make_rng(9, Stream::diag);
    Mat nodes = test::random_mat(4, 8, rng);
    for (std::size_t r = 1; r < 4; ++r) std::copy(nodes.row(1).begin(), nodes.row(1).end(), nodes.row(r).begin());
    DeviceGraph star{4, {{0, 1, 1.0}, {0, 2, 1.0}, {0, 3, 1.0}}, true};
    GatTrace tr;
    gat_layer(nodes, star, p, h, &tr);
    for (double a : tr.alpha[0]) CHECK(a == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    const Mat rnd = test::random_mat(6, 8, rng, 3.0);
    const DeviceGraph g = build_graph(6, GraphSpec{Topology::k_nearest, 2, 3, {}});
    gat_layer(rnd, g, p, h, &tr);
    for (const auto& al : tr.alpha) {
        const double s = std::accumulate(al.begin(), al.end(), 0.0);
        CHECK(std::abs(s - 1.0) < 1e-9);
        for (double a : al) CHECK(a >= 0.0);
    }
}

TEST_CASE("gat: isolated node attends to itself") {
    const HyperParams h = small_hyper();
    const ModelParams p = random_params(5, h, 10);
    auto rng = make_rng(10, Stream::diag);
    const Mat nodes = test::random_mat(3, 8, rng);
    DeviceGraph g{3, {{0, 1, 1.0}}, true};
    GatTrace tr;
    const Mat out = gat_layer(nodes, g, p, h, &tr);
    CHECK(tr.neighborhoods[2] == std::vector<int>{2});
    const Mat m = kernels::matmul(nodes, p.gat_w);
    CHECK(out(2, 0) == doctest::Approx(std::tanh(m(2, 0))));
}

TEST_CASE("curvature: isometric and scaled-isometric embeddings") {
    HyperParams h = small_hyper();
    ModelParams p = init_params(5, h);
    // proj = [I_4 0; 0 0] style selection, W_emb = first four unit vectors.
    p.proj.fill(0.0);
    p.w_emb.fill(0.0);
    for (std::size_t i = 0; i < 4; ++i) {
        p.proj(i, i) = 1.0;
        p.w_emb(i, i) = 1.0;
    }
    const std::vector<double> x(5, 0.0), d(4, 0.0);
    CHECK(encoder_curvature(x, d, p, h) == doctest::Approx(0.0));
    for (double& v : p.w_emb.data) v *= 2.0;
    // ||4 I - I||_F = sqrt(4 * 9)
    CHECK(encoder_curvature(x, d, p, h) == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("curvature: analytic Jacobian matches central differences of the embedding") {
    const HyperParams h = small_hyper();
    const ModelParams p = random_params(5, h, 11);
    const std::vector<double> x{1.0, 2.0, -1.0, 0.0, 0.5};
    const std::vector<double> d{0.2, 0.1, -0.3, 1.0};
    const Mat j = encoder_jacobian(p, h);
    const double eps = 1e-5;
    double worst = 0.0;
    for (std::size_t c = 0; c < 4; ++c) {
        auto dp = d, dm = d;
        dp[c] += eps;
        dm[c] -= eps;
        const auto zp = drift_embed(x, dp, p, h);
        const auto zm = drift_embed(x, dm, p, h);
        for (std::size_t r = 0; r < zp.size(); ++r) worst = std::max(worst, std::abs((zp[r] - zm[r]) / (2 * eps) - j(r, c)));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("forward: zero heads give posterior 0.5 and posteriors stay inside (0, 1)") {
    const HyperParams h = small_hyper();
    ModelParams p = random_params(5, h, 12);
    const Batch b = random_batch(3, 10, 5, 12);
    const auto f = forward(b, p, h);
    for (const auto& o : f.devices)
        for (double v : o.p_hat) CHECK((v > 0.0 && v < 1.0));
    p.cls_w.fill(0.0);
    p.cls_b.fill(0.0);
    const auto z = forward(b, p, h);
    for (const auto& o : z.devices)
        for (double v : o.p_hat) CHECK(v == 0.5);
}

TEST_CASE("forward: relabeling devices permutes outputs") {
    const HyperParams h = small_hyper();
    const ModelParams p = random_params(5, h, 13);
    Batch b = random_batch(4, 9, 5, 13);
    b.graph = DeviceGraph{4, {{0, 1, 1.0}, {1, 2, 0.5}, {2, 3, 0.7}, {0, 3, 0.2}, {1, 3, 0.9}}, true};
    const std::vector<int> perm{2, 0, 3, 1};  // new index i holds old device perm[i]
    std::vector<int> inv(4);
    for (int i = 0; i < 4; ++i) inv[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = i;
    Batch pb;
    for (int old : perm) pb.devices.push_back(b.devices[static_cast<std::size_t>(old)]);
    pb.graph.n_nodes = 4;
    for (const auto& e : b.graph.edges) {
        int a = inv[static_cast<std::size_t>(e.i)], c = inv[static_cast<std::size_t>(e.j)];
        pb.graph.edges.push_back({std::min(a, c), std::max(a, c), e.weight});
    }
    const auto f = forward(b, p, h);
    const auto g = forward(pb, p, h);
    for (std::size_t i = 0; i < 4; ++i) {
        const auto& o = g.devices[i];
        const auto& e = f.devices[static_cast<std::size_t>(perm[i])];
        for (std::size_t t = 0; t < o.p_hat.size(); ++t) {
            CHECK(o.p_hat[t] == doctest::Approx(e.p_hat[t]).epsilon(1e-12));
            CHECK(o.delta_hat[t] == doctest::Approx(e.delta_hat[t]).epsilon(1e-12));
        }
        for (std::size_t k = 0; k < o.x_hat.size(); ++k)
            CHECK(o.x_hat.data[k] == doctest::Approx(e.x_hat.data[k]).epsilon(1e-12));
    }
}

TEST_CASE("forward: ablations isolate devices and drift inputs") {
    HyperParams h = small_hyper();
    const ModelParams p = random_params(5, h, 14);
    Batch b = random_batch(3, 8, 5, 14);

    h.use_graph_attention = false;
    const auto before = forward(b, p, h);
    auto rng = make_rng(14, Stream::diag, 1);
    b.devices[1] = random_window(8, 5, rng);
    b.devices[2] = random_window(8, 5, rng);
    const auto after = forward(b, p, h);
    CHECK(before.devices[0].p_hat == after.devices[0].p_hat);
    CHECK(before.devices[0].x_hat == after.devices[0].x_hat);

    h = small_hyper();
    h.use_drift_embedding = false;
    const auto a = forward(b, p, h);
    for (auto& w : b.devices) w.d = test::random_mat(8, 4, rng);
    const auto c = forward(b, p, h);
    for (std::size_t n = 0; n < 3; ++n) {
        CHECK(a.devices[n].p_hat == c.devices[n].p_hat);
        CHECK(a.devices[n].delta_hat == c.devices[n].delta_hat);
    }
}

TEST_CASE("composite loss: perfect outputs give zero") {
    HyperParams h = small_hyper();
    h.mu_k = 10.0;
    const Batch b = random_batch(2, 6, 5, 15);
    ForwardResult f;
    f.curvature = 3.0;
    for (const auto& w : b.devices) {
        DeviceOutput o;
        for (std::size_t t = 0; t < w.steps(); ++t) {
            o.logit.push_back(w.labels[t] ? 60.0 : -60.0);
            o.over_logit.push_back(w.over_label[t] ? 60.0 : -60.0);
            o.delta_hat.push_back(w.delta[t] + 3.0);
        }
        o.x_hat = w.x;
        f.devices.push_back(o);
    }
    const auto l = composite_loss(f, b, h);
    CHECK(l.total < 1e-12);
}

TEST_CASE("composite loss: reconstruction-only arithmetic") {
    HyperParams h = small_hyper();
    h.lambda_cls = h.lambda_delta = h.lambda_k = h.lambda_over = 0.0;
    h.lambda_rec = 0.25;
    const Batch b = random_batch(2, 6, 5, 16);
    ForwardResult f;
    for (const auto& w : b.devices) {
        DeviceOutput o;
        o.logit.assign(w.steps(), 0.0);
        o.over_logit.assign(w.steps(), 0.0);
        o.delta_hat.assign(w.steps(), 0.0);
        o.x_hat = w.x;
        for (double& v : o.x_hat.data) v += 1.0;
        f.devices.push_back(o);
    }
    CHECK(composite_loss(f, b, h).total == doctest::Approx(0.25 * 2 * 6 * 5));
}

TEST_CASE("composite loss: rejects labels outside {0, 1}") {
    const HyperParams h = small_hyper();
    const ModelParams p = random_params(5, h, 17);
    Batch b = random_batch(2, 6, 5, 17);
    const auto f = forward(b, p, h);
    b.devices[0].labels[3] = 2;
    CHECK_THROWS_AS(composite_loss(f, b, h), ValidationError);
}

TEST_CASE("grad: analytic gradients match central differences for every tensor") {
    const HyperParams h = small_hyper();
    const ModelParams p = random_params(5, h, 18);
    const Batch b = random_batch(2, 8, 5, 18);
    for (const auto& [name, err] : gradient_errors(b, p, h)) {
        INFO(name);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("grad: gradient check holds on a graph with several neighbors and curvature target from nominal steps") {
    HyperParams h = small_hyper();
    h.mu_k_mode = CurvatureTarget::nominal_mean;
    const ModelParams p = random_params(5, h, 19);
    Batch b = random_batch(4, 7, 5, 19);
    b.graph = DeviceGraph{4, {{0, 1, 1.0}, {0, 2, 1.0}, {0, 3, 1.0}, {2, 3, 1.0}}, true};
    for (const auto& [name, err] : gradient_errors(b, p, h)) {
        INFO(name);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("grad: all-zero weights give a zero gradient") {
    HyperParams h = small_hyper();
    h.lambda_rec = h.lambda_cls = h.lambda_delta = h.lambda_k = h.lambda_over = 0.0;
    const ModelParams p = random_params(5, h, 20);
    const Batch b = random_batch(3, 6, 5, 20);
    const auto g = grad(b, p, h);
    CHECK(g.loss.total == 0.0);
    for (const auto& [name, m] : g.grad.tensors())
        for (double v : m->data) CHECK(v == 0.0);
}

TEST_CASE("grad: a small descent step lowers the loss") {
    const HyperParams h = small_hyper();
    const ModelParams p = random_params(5, h, 21);
    const Batch b = random_batch(3, 10, 5, 21);
    const auto g = grad(b, p, h);
    // Probe downward from a generous step until the first-order regime is reached.
    bool decreased = false;
    for (double lr = 1e-1; lr >= 1e-8; lr /= 10.0) {
        ModelParams q = p;
        sgd_step(q, g.grad, lr);
        if (loss_at(b, q, h) < g.loss.total) {
            decreased = true;
            // Every smaller step keeps decreasing too.
            for (double s = lr / 10.0; s >= lr / 1000.0; s /= 10.0) {
                ModelParams r = p;
                sgd_step(r, g.grad, s);
                CHECK(loss_at(b, r, h) < g.loss.total);
            }
            break;
        }
    }
    CHECK(decreased);
}

TEST_CASE("grad: serial and parallel execution are bit-identical") {
    const HyperParams h = small_hyper();
    const ModelParams p = random_params(5, h, 22);
    const Batch b = random_batch(5, 12, 5, 22);
    const auto a = grad(b, p, h, Exec::serial);
    const auto c = grad(b, p, h, Exec::parallel);
    CHECK(a.loss.total == c.loss.total);
    CHECK(a.grad == c.grad);
}

TEST_CASE("predict_overflow_inputs: differences and proximity") {
    const std::vector<double> flat(6, 0.4), ramp{0, 1, 2, 3, 4, 5}, prox(6, 0.0);
    for (const auto& q : predict_overflow_inputs(flat, prox)) {
        CHECK(q[1] == 0.0);
        CHECK(q[2] == 0.0);
    }
    const auto r = predict_overflow_inputs(ramp, prox);
    CHECK(r[0][1] == 0.0);
    for (std::size_t t = 1; t < r.size(); ++t) CHECK(r[t][1] == 1.0);
    for (const auto& q : r) CHECK(q[2] == 0.0);
    CHECK(overflow_proximity(2147483647.0, 10.0) == 1.0);
    CHECK(overflow_proximity(2147483637.0, 10.0) == 0.0);
}

TEST_CASE("hyper validation rejects bad values") {
    HyperParams h;
    h.d_model = 3;
    CHECK_THROWS_AS(h.validate(), ValidationError);
    h = HyperParams{};
    h.n_layers = 0;
    CHECK_THROWS_AS(h.validate(), ValidationError);
    h = HyperParams{};
    h.lambda_delta = -1.0;
    CHECK_THROWS_AS(h.validate(), ValidationError);
}

namespace {

// One device, 200 steps, an offset shock at step 120.
DeviceSeries overfit_series(const HyperParams& h) {
    const datagen::PhysicalConfig phys;
    const Mat x = datagen::synth_physical(phys, 200, 5);
    datagen::ScenarioSpec sc{datagen::ScenarioKind::offset_shock, 120, 2.0};
    clockdyn::ClockParams clock;
    clock.shock_prob = 0.0;
    auto trace = datagen::build_device_trace(x, clock, sc, clockdyn::TimeConstants{}, 5);
    const auto stats = datagen::normalize_fit({&trace});
    return prepare_series(trace, stats, h);
}

}  // namespace

TEST_CASE("fit: same seed gives bit-identical parameters and a finite loss trace") {
    HyperParams h;
    h.epochs = 3;
    const DeviceSeries s = overfit_series(h);
    const DeviceGraph g{1, {}, true};
    const auto a = fit_series({s}, g, 60, 30, h);
    const auto b = fit_series({s}, g, 60, 30, h);
    CHECK(a.params == b.params);
    CHECK(a.epoch_loss == b.epoch_loss);
    REQUIRE(a.epoch_loss.size() == 3);
    for (double v : a.epoch_loss) CHECK(std::isfinite(v));
}

TEST_CASE("fit: overfits a single offset-shock device") {
    HyperParams h;
    h.epochs = 500;
    const DeviceSeries s = overfit_series(h);
    const DeviceGraph g{1, {}, true};
    const auto r = fit_series({s}, g, 60, 20, h);
    const auto pred = predict_series({&s}, g, 60, r.params, h);
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t t = 0; t < s.all.steps(); ++t) {
        const int yhat = pred[0].p_hat[t] > 0.5 ? 1 : 0;
        tp += yhat && s.all.labels[t];
        fp += yhat && !s.all.labels[t];
        fn += !yhat && s.all.labels[t];
    }
    const double f1 = 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
    CHECK(f1 == 1.0);
}

TEST_CASE("checkpoint round trip is bit-exact") {
    Checkpoint c;
    c.hyper = small_hyper();
    c.params = random_params(5, c.hyper, 23);
    c.normalization = {{"a", "b"}, {0.1, 1.0 / 3.0}, {2.0, 1e-300}};
    c.window = 40;
    const auto path = std::filesystem::temp_directory_path() / "tg_ckpt_roundtrip.json";
    save_checkpoint(c, path);
    const Checkpoint r = load_checkpoint(path);
    std::filesystem::remove(path);
    CHECK(r.params == c.params);
    CHECK(r.normalization == c.normalization);
    CHECK(r.window == 40);
    CHECK(r.hyper.mu_k == c.hyper.mu_k);
    CHECK(r.hyper.d_model == 8);
}
