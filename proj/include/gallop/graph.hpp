#pragma once

#include "gallop/params.hpp"
#include "gallop/tensor.hpp"

#include <map>
#include <string>
#include <vector>

namespace gallop {

enum class OpKind {
    input,
    parameter,
    constant,
    matmul,     // A(m,k) * B(k,n)
    matmul_nt,  // A(m,k) * B(n,k)^T
    add,        // elementwise; b may broadcast as 1xN row or 1x1 scalar
    mul,        // elementwise; same broadcasting as add
    relu,
    gelu,       // tanh approximation
    softmax,    // row-wise
    layer_norm, // row-wise, no affine part
    embedding,  // a: table (V,d), b: ids (T,1) -> (T,d)
    cross_entropy, // a: logits (1,q), b: target id (1,1) -> (1,1)
};

const char* op_name(OpKind kind);

struct GraphNode {
    OpKind kind;
    int a = -1;
    int b = -1;
    std::string name;   // input name, or parameter layer name
    int param = -1;     // parameter layer index
    double eps = 0.0;   // layer_norm
    std::size_t rows = 0, cols = 0; // declared shape for input/parameter
    Tensor value;       // cached forward output
    Tensor grad;        // backward scratch
};

/// Reverse-mode autodiff over a static operation graph. Nodes are appended in
/// topological order; parameter leaves reference layers of a ParameterSet by
/// index, so the same graph can be re-evaluated as the parameters change.
class Graph {
public:
    int input(std::string name, std::size_t rows, std::size_t cols);
    int parameter(const ParameterSet& params, std::string_view layer_name);
    int constant(Tensor value);

    int matmul(int a, int b);
    int matmul_nt(int a, int b);
    int add(int a, int b);
    int mul(int a, int b);
    int relu(int a);
    int gelu(int a);
    int softmax(int a);
    int layer_norm(int a, double eps = 1e-5);
    int embedding(int table, int ids);
    int cross_entropy(int logits, int target);

    std::size_t node_count() const { return nodes_.size(); }
    const GraphNode& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

    /// Evaluates every node and returns the output of `output_node`
    /// (defaults to the last node). All intermediates stay cached.
    const Tensor& forward(const ParameterSet& params,
                          const std::map<std::string, Tensor>& inputs,
                          int output_node = -1);

    /// Gradients of the scalar at `loss_node` w.r.t. every parameter layer,
    /// aligned with the ParameterSet layer order; untouched layers are zero.
    LayerGradients backward(const ParameterSet& params, int loss_node);

    const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

private:
    int add_node(GraphNode node);
    int check_id(int id, const char* what) const;

    std::vector<GraphNode> nodes_;
    bool forward_done_ = false;
};

struct FiniteDiffLayerReport {
    std::string layer;
    double max_rel_dev = 0.0;
    double mean_rel_dev = 0.0;
};

struct FiniteDiffReport {
    std::vector<FiniteDiffLayerReport> layers;
    double max_rel_dev = 0.0;
    bool pass = false;
};

/// Central-difference check of backward() over every parameter entry.
/// Intended for models with at most ~1e4 parameters.
FiniteDiffReport finite_diff_check(Graph& graph,
                                   const ParameterSet& params,
                                   const std::map<std::string, Tensor>& inputs,
                                   int loss_node,
                                   double tolerance,
                                   double step = 1e-5);

} // namespace gallop
