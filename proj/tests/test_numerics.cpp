#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gallop/error.hpp"
#include "gallop/graph.hpp"
#include "gallop/model.hpp"
#include "gallop/params.hpp"
#include "gallop/rng.hpp"

#include <cmath>
#include <map>

using namespace gallop;

namespace {

std::map<std::string, Tensor> no_inputs() { return {}; }

// central differences over a scalar-output graph, used as the oracle for backward()
LayerGradients finite_diff_gradients(Graph& g, const ParameterSet& params,
                                     const std::map<std::string, Tensor>& inputs,
                                     int loss_node, double h = 1e-5) {
    ParameterSet work = snapshot(params);
    LayerGradients out = zero_gradients(work);
    for (std::size_t l = 0; l < work.layer_count(); ++l) {
        auto& values = work.layer(l).values.data;
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double orig = values[i];
            values[i] = orig + h;
            const double up = g.forward(work, inputs, loss_node).data[0];
            values[i] = orig - h;
            const double down = g.forward(work, inputs, loss_node).data[0];
            values[i] = orig;
            out[l].data[i] = (up - down) / (2.0 * h);
        }
    }
    return out;
}

double max_rel_dev(const LayerGradients& a, const LayerGradients& b) {
    double worst = 0.0;
    for (std::size_t l = 0; l < a.size(); ++l) {
        for (std::size_t i = 0; i < a[l].size(); ++i) {
            const double denom = std::max({std::fabs(a[l].data[i]), std::fabs(b[l].data[i]), 1e-8});
            worst = std::max(worst, std::fabs(a[l].data[i] - b[l].data[i]) / denom);
        }
    }
    return worst;
}

} // namespace

TEST_CASE("forward: identity graph returns its input") {
    Graph g;
    ParameterSet ps;
    g.input("x", 1, 3);
    const Tensor out = g.forward(ps, {{"x", Tensor::row_vector({1, 2, 3})}});
    CHECK(out.data == std::vector<double>{1, 2, 3});
}

TEST_CASE("forward: identity matmul") {
    Graph g;
    ParameterSet ps;
    ps.add_layer("w", 2, 2);
    ps.layer(0).values.at(0, 0) = 1.0;
    ps.layer(0).values.at(1, 1) = 1.0;
    const int x = g.input("x", 1, 2);
    g.matmul(x, g.parameter(ps, "w"));
    const Tensor out = g.forward(ps, {{"x", Tensor::row_vector({5, 7})}});
    CHECK(out.data[0] == doctest::Approx(5));
    CHECK(out.data[1] == doctest::Approx(7));
}

TEST_CASE("forward: softmax of equal logits is uniform") {
    Graph g;
    ParameterSet ps;
    g.softmax(g.input("x", 1, 2));
    const Tensor out = g.forward(ps, {{"x", Tensor::row_vector({0, 0})}});
    CHECK(out.data[0] == doctest::Approx(0.5));
    CHECK(out.data[1] == doctest::Approx(0.5));
}

TEST_CASE("forward: shape mismatch names the node") {
    Graph g;
    ParameterSet ps;
    ps.add_layer("w", 3, 2);
    const int x = g.input("x", 1, 2);
    g.matmul(x, g.parameter(ps, "w"));
    CHECK_THROWS_WITH_AS(g.forward(ps, {{"x", Tensor::row_vector({1, 2})}}),
                         doctest::Contains("matmul"), Error);
}

TEST_CASE("backward: quadratic in a parameter") {
    // L = theta^2 at theta = 3 -> dL/dtheta = 6
    Graph g;
    ParameterSet ps;
    ps.add_layer("theta", 1, 1);
    ps.layer(0).values.data[0] = 3.0;
    const int t = g.parameter(ps, "theta");
    g.mul(t, t);
    g.forward(ps, no_inputs());
    const LayerGradients grads = g.backward(ps, 1);
    CHECK(grads[0].data[0] == doctest::Approx(6.0));
}

TEST_CASE("backward: loss constant in a parameter gives zero") {
    Graph g;
    ParameterSet ps;
    ps.add_layer("theta", 1, 1);
    ps.add_layer("used", 1, 1);
    ps.layer(1).values.data[0] = 2.0;
    g.parameter(ps, "theta"); // present but disconnected
    const int u = g.parameter(ps, "used");
    const int loss = g.mul(u, u);
    g.forward(ps, no_inputs());
    const LayerGradients grads = g.backward(ps, loss);
    CHECK(grads[0].data[0] == 0.0);
    CHECK(grads[1].data[0] == doctest::Approx(4.0));
}

TEST_CASE("backward: before forward is an error") {
    Graph g;
    ParameterSet ps;
    ps.add_layer("theta", 1, 1);
    const int t = g.parameter(ps, "theta");
    g.mul(t, t);
    CHECK_THROWS_AS((void)g.backward(ps, 1), Error);
}

TEST_CASE("backward: non-scalar loss is an error") {
    Graph g;
    ParameterSet ps;
    const int x = g.input("x", 1, 2);
    g.forward(ps, {{"x", Tensor::row_vector({1, 2})}});
    CHECK_THROWS_AS((void)g.backward(ps, x), Error);
}

TEST_CASE("backward matches central differences on a two-layer mlp") {
    ModelConfig cfg;
    cfg.arch = ArchKind::mlp;
    cfg.input_dim = 4;
    cfg.hidden_width = 8;
    cfg.depth = 2;
    cfg.output_dim = 3;
    Model m = build_model(cfg, 7);

    RandomSource rng(11);
    std::vector<double> feat(4);
    for (auto& v : feat) v = rng.uniform(-1.0, 1.0);
    const auto inputs = model_inputs(m, Tensor::row_vector(feat), 1);

    m.graph.forward(m.params, inputs);
    const LayerGradients analytic = m.graph.backward(m.params, m.loss_node);
    const LayerGradients fd = finite_diff_gradients(m.graph, m.params, inputs, m.loss_node);
    CHECK(max_rel_dev(analytic, fd) < 1e-4);
}

TEST_CASE("per-op gradients match central differences on random inputs") {
    // one graph exercising every differentiable op
    RandomSource rng(3);
    ParameterSet ps;
    ps.add_layer("a", 2, 3);
    ps.add_layer("b", 2, 3);
    ps.add_layer("c", 3, 2);
    ps.add_layer("row", 1, 3);
    ps.add_layer("emb", 4, 3);
    for (std::size_t l = 0; l < ps.layer_count(); ++l) {
        for (auto& v : ps.layer(l).values.data) v = rng.uniform(-1.0, 1.0);
    }

    Graph g;
    const int a = g.parameter(ps, "a");
    const int b = g.parameter(ps, "b");
    const int row = g.parameter(ps, "row");
    Tensor ids(2, 1);
    ids.at(0, 0) = 2;
    ids.at(1, 0) = 0;
    const int gathered = g.embedding(g.parameter(ps, "emb"), g.constant(ids)); // 2x3
    int h = g.add(g.mul(a, b), gathered);
    h = g.add(h, row); // row broadcast
    h = g.gelu(h);
    h = g.layer_norm(h);
    h = g.mul(h, row);
    h = g.relu(g.add(h, g.constant(Tensor(2, 3, 0.25))));
    const int att = g.softmax(g.matmul_nt(h, b));                            // 2x2
    const int mixed = g.matmul(att, g.matmul(h, g.parameter(ps, "c")));      // 2x2
    const int logits_row = g.matmul(g.constant(Tensor(1, 2, 0.5)), mixed);   // 1x2
    const int loss = g.cross_entropy(logits_row, g.constant(Tensor::scalar(1)));

    g.forward(ps, no_inputs());
    const LayerGradients analytic = g.backward(ps, loss);
    const LayerGradients fd = finite_diff_gradients(g, ps, no_inputs(), loss);
    CHECK(max_rel_dev(analytic, fd) < 1e-4);
}

TEST_CASE("backward is deterministic") {
    ModelConfig cfg;
    cfg.input_dim = 6;
    cfg.hidden_width = 8;
    cfg.depth = 3;
    cfg.output_dim = 4;
    Model m = build_model(cfg, 5);
    RandomSource rng(2);
    std::vector<double> feat(6);
    for (auto& v : feat) v = rng.normal();
    const auto inputs = model_inputs(m, Tensor::row_vector(feat), 2);

    m.graph.forward(m.params, inputs);
    const LayerGradients g1 = m.graph.backward(m.params, m.loss_node);
    m.graph.forward(m.params, inputs);
    const LayerGradients g2 = m.graph.backward(m.params, m.loss_node);
    for (std::size_t l = 0; l < g1.size(); ++l) CHECK(bitwise_equal(g1[l], g2[l]));
}

TEST_CASE("gradient of a summed loss equals the sum of per-example gradients") {
    ModelConfig cfg;
    cfg.input_dim = 3;
    cfg.hidden_width = 5;
    cfg.depth = 2;
    cfg.output_dim = 2;
    Model m = build_model(cfg, 9);

    RandomSource rng(4);
    LayerGradients sum = zero_gradients(m.params);
    std::vector<std::map<std::string, Tensor>> all_inputs;
    for (int n = 0; n < 3; ++n) {
        std::vector<double> feat(3);
        for (auto& v : feat) v = rng.uniform(-1.0, 1.0);
        all_inputs.push_back(model_inputs(m, Tensor::row_vector(feat), n % 2));
    }
    for (const auto& in : all_inputs) {
        m.graph.forward(m.params, in);
        const LayerGradients g = m.graph.backward(m.params, m.loss_node);
        for (std::size_t l = 0; l < g.size(); ++l) {
            for (std::size_t i = 0; i < g[l].size(); ++i) sum[l].data[i] += g[l].data[i];
        }
    }

    // same three examples through one graph with a summed loss
    Graph g;
    int total = -1;
    std::map<std::string, Tensor> bound;
    for (int n = 0; n < 3; ++n) {
        const std::string xn = "x" + std::to_string(n);
        const std::string yn = "y" + std::to_string(n);
        int h = g.input(xn, 1, 3);
        bound[xn] = all_inputs[static_cast<std::size_t>(n)].at("x");
        for (int l = 1; l <= cfg.depth; ++l) {
            h = g.matmul(h, g.parameter(m.params, "fc" + std::to_string(l)));
            if (l < cfg.depth) h = g.relu(h);
        }
        const int yid = g.input(yn, 1, 1);
        bound[yn] = all_inputs[static_cast<std::size_t>(n)].at("y");
        const int loss_n = g.cross_entropy(h, yid);
        total = (total < 0) ? loss_n : g.add(total, loss_n);
    }
    g.forward(m.params, bound);
    const LayerGradients joint = g.backward(m.params, total);
    CHECK(max_rel_dev(joint, sum) < 1e-10);
}

TEST_CASE("finite_diff_check: linear regression style graph") {
    Graph g;
    ParameterSet ps;
    ps.add_layer("w", 5, 2);
    RandomSource rng(8);
    for (auto& v : ps.layer(0).values.data) v = rng.uniform(-1.0, 1.0);
    const int x = g.input("x", 1, 5);
    const int pred = g.matmul(x, g.parameter(ps, "w"));
    // squared error against a fixed target via (pred - t) elementwise, summed by matmul
    const int diff = g.add(pred, g.constant(Tensor::row_vector({-0.3, 0.7})));
    const int sq = g.mul(diff, diff);
    g.matmul(sq, g.constant(Tensor(2, 1, 0.5)));

    std::vector<double> feat(5);
    for (auto& v : feat) v = rng.uniform(-1.0, 1.0);
    const auto report = finite_diff_check(g, ps, {{"x", Tensor::row_vector(feat)}},
                                          static_cast<int>(g.node_count()) - 1, 1e-6);
    CHECK(report.pass);
    CHECK(report.max_rel_dev < 1e-6);
    CHECK(report.layers.size() == 1);
}

TEST_CASE("finite_diff_check: zero weights and zero target deviate exactly zero") {
    Graph g;
    ParameterSet ps;
    ps.add_layer("w", 3, 1);
    const int x = g.input("x", 1, 3);
    const int pred = g.matmul(x, g.parameter(ps, "w"));
    g.mul(pred, pred);
    const auto report = finite_diff_check(g, ps, {{"x", Tensor::row_vector({0, 0, 0})}},
                                          static_cast<int>(g.node_count()) - 1, 1e-12);
    CHECK(report.pass);
    CHECK(report.max_rel_dev == 0.0);
}

TEST_CASE("finite_diff_check: micro-transformer") {
    ModelConfig cfg;
    cfg.arch = ArchKind::micro_transformer;
    cfg.input_dim = 6;
    cfg.hidden_width = 16;
    cfg.n_heads = 2;
    cfg.n_blocks = 1;
    cfg.vocab_size = 8;
    cfg.context_len = 8;
    cfg.output_dim = 4;
    cfg.quant_lo = -2.0;
    cfg.quant_hi = 2.0;
    Model m = build_model(cfg, 13);
    REQUIRE(m.params.total_count() <= 10000);

    RandomSource rng(17);
    std::vector<double> feat(6);
    for (auto& v : feat) v = rng.uniform(-1.5, 1.5);
    const auto inputs = model_inputs(m, Tensor::row_vector(feat), 2);
    const auto report = finite_diff_check(m.graph, m.params, inputs, m.loss_node, 1e-4);
    CHECK(report.pass);
    CHECK(report.max_rel_dev < 1e-4);
}
