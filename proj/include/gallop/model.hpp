#pragma once

#include "gallop/graph.hpp"
#include "gallop/params.hpp"
#include "gallop/tasks.hpp"

#include <cstdint>
#include <span>
#include <string>

namespace gallop {

enum class ArchKind { mlp, micro_transformer };

struct ModelConfig {
    ArchKind arch = ArchKind::mlp;
    int input_dim = 22;   // p (for the default suite: 16 raw + 5 cue + 1 constant)
    int hidden_width = 64; // k
    int depth = 4;         // total layer count for the mlp (input+hidden+output matrices)
    int output_dim = 20;   // q, the answer-token vocabulary

    // micro-transformer
    int vocab_size = 256;  // feature quantization bins
    int context_len = 32;
    int n_heads = 2;
    int n_blocks = 1;
    double quant_lo = -8.0; // feature value mapped to token 0
    double quant_hi = 8.0;  // feature value mapped to token vocab_size-1

    std::uint64_t init_seed = 0;

    bool operator==(const ModelConfig&) const = default;
};

/// A built predictor: static graph plus its parameter store. The graph's
/// terminal node is the scalar training loss; `logits_node` exposes the
/// pre-softmax answer scores for prediction.
struct Model {
    ModelConfig config;
    Graph graph;
    ParameterSet params;
    int logits_node = -1;
    int loss_node = -1;
};

Model build_model(const ModelConfig& config, std::uint64_t rng_seed);

/// Maps example features to the graph's named inputs ("x" or "tokens", plus "y").
std::map<std::string, Tensor> model_inputs(const Model& model, const Tensor& features, int answer);

double example_loss(Model& model, const ParameterSet& params, const Example& ex, const Task& task);
LayerGradients example_gradients(Model& model, const ParameterSet& params, const Example& ex, const Task& task);

/// Argmax answer token (lowest index wins ties).
int predict_answer(Model& model, const ParameterSet& params, const Tensor& features);

/// Exact-match accuracy over a split, in percent.
double accuracy_pct(Model& model, const ParameterSet& params, const Task& task,
                    std::span<const Example> examples);

} // namespace gallop
