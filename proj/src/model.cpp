#include "gallop/model.hpp"

#include "gallop/error.hpp"
#include "gallop/rng.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace gallop {

namespace {

void init_layer(ParameterSet& params, std::size_t layer_idx, std::uint64_t seed, double scale) {
    RandomSource rng(derive_seed(seed, layer_idx));
    for (auto& v : params.layer(layer_idx).values.data) v = scale * rng.normal();
}

void init_layer_ones(ParameterSet& params, std::size_t layer_idx) {
    for (auto& v : params.layer(layer_idx).values.data) v = 1.0;
}

Model build_mlp(const ModelConfig& cfg, std::uint64_t seed) {
    require(cfg.depth >= 2, "mlp: depth must be at least 2, got ", cfg.depth);
    Model m;
    m.config = cfg;

    const auto p = static_cast<std::size_t>(cfg.input_dim);
    const auto k = static_cast<std::size_t>(cfg.hidden_width);
    const auto q = static_cast<std::size_t>(cfg.output_dim);

    for (int l = 1; l <= cfg.depth; ++l) {
        const std::size_t rows = (l == 1) ? p : k;
        const std::size_t cols = (l == cfg.depth) ? q : k;
        const std::size_t idx = m.params.add_layer("fc" + std::to_string(l), rows, cols);
        init_layer(m.params, idx, seed, 1.0 / std::sqrt(static_cast<double>(rows)));
    }

    const int x = m.graph.input("x", 1, p);
    const int y = m.graph.input("y", 1, 1);
    int h = x;
    for (int l = 1; l <= cfg.depth; ++l) {
        h = m.graph.matmul(h, m.graph.parameter(m.params, "fc" + std::to_string(l)));
        if (l < cfg.depth) h = m.graph.relu(h);
    }
    m.logits_node = h;
    m.loss_node = m.graph.cross_entropy(h, y);
    return m;
}

Model build_micro_transformer(const ModelConfig& cfg, std::uint64_t seed) {
    require(cfg.n_heads > 0 && cfg.hidden_width % cfg.n_heads == 0,
            "transformer: hidden_width ", cfg.hidden_width, " not divisible by ", cfg.n_heads, " heads");
    require(cfg.input_dim <= cfg.context_len,
            "transformer: sequence length ", cfg.input_dim, " exceeds context ", cfg.context_len);
    require(cfg.vocab_size >= 2, "transformer: vocab_size must be at least 2");

    Model m;
    m.config = cfg;

    const auto d = static_cast<std::size_t>(cfg.hidden_width);
    const auto dh = static_cast<std::size_t>(cfg.hidden_width / cfg.n_heads);
    const auto seq = static_cast<std::size_t>(cfg.input_dim);
    const auto q = static_cast<std::size_t>(cfg.output_dim);

    std::size_t li = 0; // running layer index for per-layer init streams
    auto add_normal = [&](const std::string& name, std::size_t rows, std::size_t cols, double scale) {
        const std::size_t idx = m.params.add_layer(name, rows, cols);
        init_layer(m.params, idx, seed, scale);
        ++li;
    };
    auto add_ones = [&](const std::string& name, std::size_t cols) {
        const std::size_t idx = m.params.add_layer(name, 1, cols);
        init_layer_ones(m.params, idx);
        ++li;
    };

    const double emb_scale = 0.5;
    add_normal("tok_emb", static_cast<std::size_t>(cfg.vocab_size), d, emb_scale);
    add_normal("pos_emb", static_cast<std::size_t>(cfg.context_len), d, emb_scale);
    for (int b = 0; b < cfg.n_blocks; ++b) {
        const std::string pre = "blk" + std::to_string(b) + ".";
        add_ones(pre + "ln1.scale", d);
        for (int h = 0; h < cfg.n_heads; ++h) {
            const std::string hs = std::to_string(h);
            add_normal(pre + "attn.wq" + hs, d, dh, 1.0 / std::sqrt(static_cast<double>(d)));
            add_normal(pre + "attn.wk" + hs, d, dh, 1.0 / std::sqrt(static_cast<double>(d)));
            add_normal(pre + "attn.wv" + hs, d, dh, 1.0 / std::sqrt(static_cast<double>(d)));
            add_normal(pre + "attn.wo" + hs, dh, d, 1.0 / std::sqrt(static_cast<double>(dh)));
        }
        add_ones(pre + "ln2.scale", d);
        add_normal(pre + "mlp.fc1", d, 4 * d, 1.0 / std::sqrt(static_cast<double>(d)));
        add_normal(pre + "mlp.fc2", 4 * d, d, 1.0 / std::sqrt(static_cast<double>(4 * d)));
    }
    add_ones("ln_f.scale", d);
    add_normal("head", d, q, 1.0 / std::sqrt(static_cast<double>(d)));

    Graph& g = m.graph;
    const int tokens = g.input("tokens", seq, 1);
    const int y = g.input("y", 1, 1);

    Tensor positions(seq, 1);
    for (std::size_t t = 0; t < seq; ++t) positions.at(t, 0) = static_cast<double>(t);

    int x = g.add(g.embedding(g.parameter(m.params, "tok_emb"), tokens),
                  g.embedding(g.parameter(m.params, "pos_emb"), g.constant(std::move(positions))));

    const int att_scale = g.constant(Tensor::scalar(1.0 / std::sqrt(static_cast<double>(dh))));

    for (int b = 0; b < cfg.n_blocks; ++b) {
        const std::string pre = "blk" + std::to_string(b) + ".";
        int normed = g.mul(g.layer_norm(x), g.parameter(m.params, pre + "ln1.scale"));
        int attn_out = -1;
        for (int h = 0; h < cfg.n_heads; ++h) {
            const std::string hs = std::to_string(h);
            const int qh = g.matmul(normed, g.parameter(m.params, pre + "attn.wq" + hs));
            const int kh = g.matmul(normed, g.parameter(m.params, pre + "attn.wk" + hs));
            const int vh = g.matmul(normed, g.parameter(m.params, pre + "attn.wv" + hs));
            const int weights = g.softmax(g.mul(g.matmul_nt(qh, kh), att_scale));
            const int head_out = g.matmul(g.matmul(weights, vh), g.parameter(m.params, pre + "attn.wo" + hs));
            attn_out = (attn_out < 0) ? head_out : g.add(attn_out, head_out);
        }
        x = g.add(x, attn_out);

        int normed2 = g.mul(g.layer_norm(x), g.parameter(m.params, pre + "ln2.scale"));
        int mlp = g.matmul(g.gelu(g.matmul(normed2, g.parameter(m.params, pre + "mlp.fc1"))),
                           g.parameter(m.params, pre + "mlp.fc2"));
        x = g.add(x, mlp);
    }

    x = g.mul(g.layer_norm(x), g.parameter(m.params, "ln_f.scale"));

    Tensor pool(1, seq, 1.0 / static_cast<double>(seq));
    const int pooled = g.matmul(g.constant(std::move(pool)), x);
    m.logits_node = g.matmul(pooled, g.parameter(m.params, "head"));
    m.loss_node = g.cross_entropy(m.logits_node, y);
    return m;
}

Tensor quantize_features(const ModelConfig& cfg, const Tensor& features) {
    Tensor tokens(features.size(), 1);
    const double span = cfg.quant_hi - cfg.quant_lo;
    for (std::size_t i = 0; i < features.size(); ++i) {
        const double unit = (features.data[i] - cfg.quant_lo) / span;
        const auto bin = static_cast<long long>(std::floor(unit * cfg.vocab_size));
        const long long clamped = std::clamp(bin, 0ll, static_cast<long long>(cfg.vocab_size) - 1);
        tokens.at(i, 0) = static_cast<double>(clamped);
    }
    return tokens;
}

} // namespace

Model build_model(const ModelConfig& config, std::uint64_t rng_seed) {
    require(config.input_dim > 0 && config.hidden_width > 0 && config.output_dim > 0,
            "model config: dimensions must be positive");
    switch (config.arch) {
        case ArchKind::mlp: return build_mlp(config, rng_seed);
        case ArchKind::micro_transformer: return build_micro_transformer(config, rng_seed);
    }
    fail("model config: unknown architecture");
}

std::map<std::string, Tensor> model_inputs(const Model& model, const Tensor& features, int answer) {
    std::map<std::string, Tensor> in;
    if (model.config.arch == ArchKind::mlp) {
        require(features.size() == static_cast<std::size_t>(model.config.input_dim),
                "model: expected ", model.config.input_dim, " features, got ", features.size());
        in.emplace("x", features);
    } else {
        require(features.size() == static_cast<std::size_t>(model.config.input_dim),
                "model: expected ", model.config.input_dim, " features, got ", features.size());
        in.emplace("tokens", quantize_features(model.config, features));
    }
    in.emplace("y", Tensor::scalar(static_cast<double>(answer)));
    return in;
}

double example_loss(Model& model, const ParameterSet& params, const Example& ex, const Task& task) {
    const auto in = model_inputs(model, ex.features, task.answer_token(ex.label));
    return model.graph.forward(params, in, model.loss_node).data[0];
}

LayerGradients example_gradients(Model& model, const ParameterSet& params, const Example& ex, const Task& task) {
    const auto in = model_inputs(model, ex.features, task.answer_token(ex.label));
    model.graph.forward(params, in);
    return model.graph.backward(params, model.loss_node);
}

int predict_answer(Model& model, const ParameterSet& params, const Tensor& features) {
    const auto in = model_inputs(model, features, 0);
    const Tensor& logits = model.graph.forward(params, in, model.logits_node);
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits.data[i] > logits.data[best]) best = i;
    }
    return static_cast<int>(best);
}

double accuracy_pct(Model& model, const ParameterSet& params, const Task& task,
                    std::span<const Example> examples) {
    require(!examples.empty(), "accuracy: empty example set");
    std::size_t correct = 0;
    for (const auto& ex : examples) {
        if (predict_answer(model, params, ex.features) == task.answer_token(ex.label)) ++correct;
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(examples.size());
}

} // namespace gallop
