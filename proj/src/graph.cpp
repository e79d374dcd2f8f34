#include "gallop/graph.hpp"

#include "gallop/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

namespace gallop {

namespace {

constexpr double kGeluCoeff = 0.044715;
const double kGeluScale = std::sqrt(2.0 / 3.14159265358979323846);

bool broadcast_compatible(const Tensor& a, const Tensor& b) {
    if (a.same_shape(b)) return true;
    if (b.rows == 1 && b.cols == a.cols) return true; // row broadcast
    if (b.rows == 1 && b.cols == 1) return true;      // scalar broadcast
    return false;
}

double broadcast_at(const Tensor& b, std::size_t r, std::size_t c) {
    if (b.rows == 1 && b.cols == 1) return b.data[0];
    if (b.rows == 1) return b.data[c];
    return b.at(r, c);
}

// accumulate g into the broadcast-shaped gradient of b
void broadcast_accum(Tensor& gb, const Tensor& g, std::size_t r, std::size_t c, double v) {
    if (gb.rows == 1 && gb.cols == 1) {
        gb.data[0] += v;
    } else if (gb.rows == 1 && g.rows > 1) {
        gb.data[c] += v;
    } else {
        gb.at(r, c) += v;
    }
}

void matmul_accum(Tensor& out, const Tensor& a, const Tensor& b, bool at, bool bt) {
    // out += op(a) * op(b), where op transposes when the flag is set
    const std::size_t m = at ? a.cols : a.rows;
    const std::size_t k = at ? a.rows : a.cols;
    const std::size_t n = bt ? b.rows : b.cols;
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = at ? a.at(p, i) : a.at(i, p);
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) {
                const double bv = bt ? b.at(j, p) : b.at(p, j);
                out.at(i, j) += av * bv;
            }
        }
    }
}

} // namespace

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::input: return "input";
        case OpKind::parameter: return "parameter";
        case OpKind::constant: return "constant";
        case OpKind::matmul: return "matmul";
        case OpKind::matmul_nt: return "matmul_nt";
        case OpKind::add: return "add";
        case OpKind::mul: return "mul";
        case OpKind::relu: return "relu";
        case OpKind::gelu: return "gelu";
        case OpKind::softmax: return "softmax";
        case OpKind::layer_norm: return "layer_norm";
        case OpKind::embedding: return "embedding";
        case OpKind::cross_entropy: return "cross_entropy";
    }
    return "?";
}

int Graph::add_node(GraphNode node) {
    nodes_.push_back(std::move(node));
    forward_done_ = false;
    return static_cast<int>(nodes_.size()) - 1;
}

int Graph::check_id(int id, const char* what) const {
    require(id >= 0 && id < static_cast<int>(nodes_.size()), "graph: ", what, " refers to unknown node ", id);
    return id;
}

int Graph::input(std::string name, std::size_t rows, std::size_t cols) {
    GraphNode n{OpKind::input};
    n.name = std::move(name);
    n.rows = rows;
    n.cols = cols;
    return add_node(std::move(n));
}

int Graph::parameter(const ParameterSet& params, std::string_view layer_name) {
    const int idx = params.find(layer_name);
    require(idx >= 0, "graph: unknown parameter layer '", layer_name, "'");
    GraphNode n{OpKind::parameter};
    n.name = std::string(layer_name);
    n.param = idx;
    n.rows = params.layer(static_cast<std::size_t>(idx)).values.rows;
    n.cols = params.layer(static_cast<std::size_t>(idx)).values.cols;
    return add_node(std::move(n));
}

int Graph::constant(Tensor value) {
    GraphNode n{OpKind::constant};
    n.rows = value.rows;
    n.cols = value.cols;
    n.value = std::move(value);
    return add_node(std::move(n));
}

int Graph::matmul(int a, int b) {
    GraphNode n{OpKind::matmul};
    n.a = check_id(a, "matmul lhs");
    n.b = check_id(b, "matmul rhs");
    return add_node(std::move(n));
}

int Graph::matmul_nt(int a, int b) {
    GraphNode n{OpKind::matmul_nt};
    n.a = check_id(a, "matmul_nt lhs");
    n.b = check_id(b, "matmul_nt rhs");
    return add_node(std::move(n));
}

int Graph::add(int a, int b) {
    GraphNode n{OpKind::add};
    n.a = check_id(a, "add lhs");
    n.b = check_id(b, "add rhs");
    return add_node(std::move(n));
}

int Graph::mul(int a, int b) {
    GraphNode n{OpKind::mul};
    n.a = check_id(a, "mul lhs");
    n.b = check_id(b, "mul rhs");
    return add_node(std::move(n));
}

int Graph::relu(int a) {
    GraphNode n{OpKind::relu};
    n.a = check_id(a, "relu arg");
    return add_node(std::move(n));
}

int Graph::gelu(int a) {
    GraphNode n{OpKind::gelu};
    n.a = check_id(a, "gelu arg");
    return add_node(std::move(n));
}

int Graph::softmax(int a) {
    GraphNode n{OpKind::softmax};
    n.a = check_id(a, "softmax arg");
    return add_node(std::move(n));
}

int Graph::layer_norm(int a, double eps) {
    GraphNode n{OpKind::layer_norm};
    n.a = check_id(a, "layer_norm arg");
    n.eps = eps;
    return add_node(std::move(n));
}

int Graph::embedding(int table, int ids) {
    GraphNode n{OpKind::embedding};
    n.a = check_id(table, "embedding table");
    n.b = check_id(ids, "embedding ids");
    return add_node(std::move(n));
}

int Graph::cross_entropy(int logits, int target) {
    GraphNode n{OpKind::cross_entropy};
    n.a = check_id(logits, "cross_entropy logits");
    n.b = check_id(target, "cross_entropy target");
    return add_node(std::move(n));
}

const Tensor& Graph::forward(const ParameterSet& params,
                             const std::map<std::string, Tensor>& inputs,
                             int output_node) {
    require(!nodes_.empty(), "graph: forward on empty graph");
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
        GraphNode& n = nodes_[id];
        switch (n.kind) {
            case OpKind::input: {
                auto it = inputs.find(n.name);
                require(it != inputs.end(), "node ", id, " (input '", n.name, "'): not bound");
                require(it->second.rows == n.rows && it->second.cols == n.cols,
                        "node ", id, " (input '", n.name, "'): expected ", n.rows, "x", n.cols,
                        ", got ", it->second.rows, "x", it->second.cols);
                n.value = it->second;
                break;
            }
            case OpKind::parameter: {
                require(n.param >= 0 && n.param < static_cast<int>(params.layer_count()),
                        "node ", id, " (parameter '", n.name, "'): layer index out of range");
                n.value = params.layer(static_cast<std::size_t>(n.param)).values;
                break;
            }
            case OpKind::constant:
                break;
            case OpKind::matmul: {
                const Tensor& a = nodes_[n.a].value;
                const Tensor& b = nodes_[n.b].value;
                require(a.cols == b.rows, "node ", id, " (matmul): inner dims ", a.cols, " vs ", b.rows);
                Tensor out(a.rows, b.cols);
                matmul_accum(out, a, b, false, false);
                n.value = std::move(out);
                break;
            }
            case OpKind::matmul_nt: {
                const Tensor& a = nodes_[n.a].value;
                const Tensor& b = nodes_[n.b].value;
                require(a.cols == b.cols, "node ", id, " (matmul_nt): inner dims ", a.cols, " vs ", b.cols);
                Tensor out(a.rows, b.rows);
                // out = a * b^T
                for (std::size_t i = 0; i < a.rows; ++i) {
                    for (std::size_t j = 0; j < b.rows; ++j) {
                        double s = 0.0;
                        for (std::size_t p = 0; p < a.cols; ++p) s += a.at(i, p) * b.at(j, p);
                        out.at(i, j) = s;
                    }
                }
                n.value = std::move(out);
                break;
            }
            case OpKind::add:
            case OpKind::mul: {
                const Tensor& a = nodes_[n.a].value;
                const Tensor& b = nodes_[n.b].value;
                require(broadcast_compatible(a, b), "node ", id, " (", op_name(n.kind), "): shapes ",
                        a.rows, "x", a.cols, " vs ", b.rows, "x", b.cols);
                Tensor out(a.rows, a.cols);
                for (std::size_t r = 0; r < a.rows; ++r) {
                    for (std::size_t c = 0; c < a.cols; ++c) {
                        const double bv = broadcast_at(b, r, c);
                        out.at(r, c) = (n.kind == OpKind::add) ? a.at(r, c) + bv : a.at(r, c) * bv;
                    }
                }
                n.value = std::move(out);
                break;
            }
            case OpKind::relu: {
                const Tensor& a = nodes_[n.a].value;
                Tensor out(a.rows, a.cols);
                for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] > 0.0 ? a.data[i] : 0.0;
                n.value = std::move(out);
                break;
            }
            case OpKind::gelu: {
                const Tensor& a = nodes_[n.a].value;
                Tensor out(a.rows, a.cols);
                for (std::size_t i = 0; i < a.size(); ++i) {
                    const double x = a.data[i];
                    const double u = kGeluScale * (x + kGeluCoeff * x * x * x);
                    out.data[i] = 0.5 * x * (1.0 + std::tanh(u));
                }
                n.value = std::move(out);
                break;
            }
            case OpKind::softmax: {
                const Tensor& a = nodes_[n.a].value;
                Tensor out(a.rows, a.cols);
                for (std::size_t r = 0; r < a.rows; ++r) {
                    double mx = -std::numeric_limits<double>::infinity();
                    for (std::size_t c = 0; c < a.cols; ++c) mx = std::max(mx, a.at(r, c));
                    double sum = 0.0;
                    for (std::size_t c = 0; c < a.cols; ++c) {
                        const double e = std::exp(a.at(r, c) - mx);
                        out.at(r, c) = e;
                        sum += e;
                    }
                    for (std::size_t c = 0; c < a.cols; ++c) out.at(r, c) /= sum;
                }
                n.value = std::move(out);
                break;
            }
            case OpKind::layer_norm: {
                const Tensor& a = nodes_[n.a].value;
                Tensor out(a.rows, a.cols);
                for (std::size_t r = 0; r < a.rows; ++r) {
                    double mean = 0.0;
                    for (std::size_t c = 0; c < a.cols; ++c) mean += a.at(r, c);
                    mean /= static_cast<double>(a.cols);
                    double var = 0.0;
                    for (std::size_t c = 0; c < a.cols; ++c) {
                        const double d = a.at(r, c) - mean;
                        var += d * d;
                    }
                    var /= static_cast<double>(a.cols);
                    const double inv = 1.0 / std::sqrt(var + n.eps);
                    for (std::size_t c = 0; c < a.cols; ++c) out.at(r, c) = (a.at(r, c) - mean) * inv;
                }
                n.value = std::move(out);
                break;
            }
            case OpKind::embedding: {
                const Tensor& table = nodes_[n.a].value;
                const Tensor& ids = nodes_[n.b].value;
                require(ids.cols == 1, "node ", id, " (embedding): ids must be Tx1");
                Tensor out(ids.rows, table.cols);
                for (std::size_t t = 0; t < ids.rows; ++t) {
                    const double raw = ids.at(t, 0);
                    const auto row = static_cast<std::size_t>(raw);
                    require(raw >= 0.0 && row < table.rows,
                            "node ", id, " (embedding): id ", raw, " outside table of ", table.rows, " rows");
                    for (std::size_t c = 0; c < table.cols; ++c) out.at(t, c) = table.at(row, c);
                }
                n.value = std::move(out);
                break;
            }
            case OpKind::cross_entropy: {
                const Tensor& logits = nodes_[n.a].value;
                const Tensor& target = nodes_[n.b].value;
                require(logits.rows == 1, "node ", id, " (cross_entropy): logits must be 1xQ");
                require(target.size() == 1, "node ", id, " (cross_entropy): target must be a single id");
                const double raw = target.data[0];
                const auto t = static_cast<std::size_t>(raw);
                require(raw >= 0.0 && t < logits.cols,
                        "node ", id, " (cross_entropy): target ", raw, " outside ", logits.cols, " classes");
                double mx = -std::numeric_limits<double>::infinity();
                for (double v : logits.data) mx = std::max(mx, v);
                double sum = 0.0;
                for (double v : logits.data) sum += std::exp(v - mx);
                n.value = Tensor::scalar(std::log(sum) + mx - logits.data[t]);
                break;
            }
        }
        require(n.value.all_finite(), "node ", id, " (", op_name(n.kind), "): non-finite output");
    }
    forward_done_ = true;
    const int out = output_node < 0 ? static_cast<int>(nodes_.size()) - 1 : check_id(output_node, "forward output");
    return nodes_[static_cast<std::size_t>(out)].value;
}

LayerGradients Graph::backward(const ParameterSet& params, int loss_node) {
    require(forward_done_, "graph: backward called before forward");
    check_id(loss_node, "backward loss");
    GraphNode& loss = nodes_[static_cast<std::size_t>(loss_node)];
    require(loss.value.size() == 1, "graph: loss node must be scalar, got ",
            loss.value.rows, "x", loss.value.cols);

    for (auto& n : nodes_) {
        n.grad = Tensor(n.value.rows, n.value.cols);
    }
    loss.grad.data[0] = 1.0;

    LayerGradients out = zero_gradients(params);

    for (int id = loss_node; id >= 0; --id) {
        GraphNode& n = nodes_[static_cast<std::size_t>(id)];
        const Tensor& g = n.grad;
        switch (n.kind) {
            case OpKind::input:
            case OpKind::constant:
                break;
            case OpKind::parameter: {
                Tensor& dst = out[static_cast<std::size_t>(n.param)];
                for (std::size_t i = 0; i < g.size(); ++i) dst.data[i] += g.data[i];
                break;
            }
            case OpKind::matmul: {
                const Tensor& a = nodes_[n.a].value;
                const Tensor& b = nodes_[n.b].value;
                matmul_accum(nodes_[n.a].grad, g, b, false, true); // dA += g * B^T
                matmul_accum(nodes_[n.b].grad, a, g, true, false); // dB += A^T * g
                break;
            }
            case OpKind::matmul_nt: {
                const Tensor& a = nodes_[n.a].value;
                const Tensor& b = nodes_[n.b].value;
                matmul_accum(nodes_[n.a].grad, g, b, false, false); // dA += g * B
                matmul_accum(nodes_[n.b].grad, g, a, true, false);  // dB += g^T * A
                break;
            }
            case OpKind::add: {
                Tensor& ga = nodes_[n.a].grad;
                Tensor& gb = nodes_[n.b].grad;
                for (std::size_t r = 0; r < g.rows; ++r) {
                    for (std::size_t c = 0; c < g.cols; ++c) {
                        ga.at(r, c) += g.at(r, c);
                        broadcast_accum(gb, g, r, c, g.at(r, c));
                    }
                }
                break;
            }
            case OpKind::mul: {
                const Tensor& a = nodes_[n.a].value;
                const Tensor& b = nodes_[n.b].value;
                Tensor& ga = nodes_[n.a].grad;
                Tensor& gb = nodes_[n.b].grad;
                for (std::size_t r = 0; r < g.rows; ++r) {
                    for (std::size_t c = 0; c < g.cols; ++c) {
                        const double gv = g.at(r, c);
                        ga.at(r, c) += gv * broadcast_at(b, r, c);
                        broadcast_accum(gb, g, r, c, gv * a.at(r, c));
                    }
                }
                break;
            }
            case OpKind::relu: {
                const Tensor& a = nodes_[n.a].value;
                Tensor& ga = nodes_[n.a].grad;
                for (std::size_t i = 0; i < g.size(); ++i) {
                    if (a.data[i] > 0.0) ga.data[i] += g.data[i];
                }
                break;
            }
            case OpKind::gelu: {
                const Tensor& a = nodes_[n.a].value;
                Tensor& ga = nodes_[n.a].grad;
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const double x = a.data[i];
                    const double u = kGeluScale * (x + kGeluCoeff * x * x * x);
                    const double th = std::tanh(u);
                    const double du = kGeluScale * (1.0 + 3.0 * kGeluCoeff * x * x);
                    const double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
                    ga.data[i] += g.data[i] * d;
                }
                break;
            }
            case OpKind::softmax: {
                const Tensor& y = n.value;
                Tensor& ga = nodes_[n.a].grad;
                for (std::size_t r = 0; r < y.rows; ++r) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < y.cols; ++c) dot += g.at(r, c) * y.at(r, c);
                    for (std::size_t c = 0; c < y.cols; ++c) {
                        ga.at(r, c) += y.at(r, c) * (g.at(r, c) - dot);
                    }
                }
                break;
            }
            case OpKind::layer_norm: {
                const Tensor& y = n.value; // normalized output
                const Tensor& a = nodes_[n.a].value;
                Tensor& ga = nodes_[n.a].grad;
                const double inv_n = 1.0 / static_cast<double>(a.cols);
                for (std::size_t r = 0; r < a.rows; ++r) {
                    double mean = 0.0;
                    for (std::size_t c = 0; c < a.cols; ++c) mean += a.at(r, c);
                    mean *= inv_n;
                    double var = 0.0;
                    for (std::size_t c = 0; c < a.cols; ++c) {
                        const double d = a.at(r, c) - mean;
                        var += d * d;
                    }
                    var *= inv_n;
                    const double inv_std = 1.0 / std::sqrt(var + n.eps);
                    double g_mean = 0.0, gy_mean = 0.0;
                    for (std::size_t c = 0; c < a.cols; ++c) {
                        g_mean += g.at(r, c);
                        gy_mean += g.at(r, c) * y.at(r, c);
                    }
                    g_mean *= inv_n;
                    gy_mean *= inv_n;
                    for (std::size_t c = 0; c < a.cols; ++c) {
                        ga.at(r, c) += inv_std * (g.at(r, c) - g_mean - y.at(r, c) * gy_mean);
                    }
                }
                break;
            }
            case OpKind::embedding: {
                const Tensor& ids = nodes_[n.b].value;
                Tensor& gtable = nodes_[n.a].grad;
                for (std::size_t t = 0; t < ids.rows; ++t) {
                    const auto row = static_cast<std::size_t>(ids.at(t, 0));
                    for (std::size_t c = 0; c < gtable.cols; ++c) gtable.at(row, c) += g.at(t, c);
                }
                break;
            }
            case OpKind::cross_entropy: {
                const Tensor& logits = nodes_[n.a].value;
                const Tensor& target = nodes_[n.b].value;
                Tensor& ga = nodes_[n.a].grad;
                const auto t = static_cast<std::size_t>(target.data[0]);
                double mx = -std::numeric_limits<double>::infinity();
                for (double v : logits.data) mx = std::max(mx, v);
                double sum = 0.0;
                for (double v : logits.data) sum += std::exp(v - mx);
                const double gv = g.data[0];
                for (std::size_t c = 0; c < logits.cols; ++c) {
                    const double p = std::exp(logits.data[c] - mx) / sum;
                    ga.data[c] += gv * (p - (c == t ? 1.0 : 0.0));
                }
                break;
            }
        }
    }
    return out;
}

FiniteDiffReport finite_diff_check(Graph& graph,
                                   const ParameterSet& params,
                                   const std::map<std::string, Tensor>& inputs,
                                   int loss_node,
                                   double tolerance,
                                   double step) {
    ParameterSet work = snapshot(params);
    graph.forward(work, inputs);
    const LayerGradients analytic = graph.backward(work, loss_node);

    FiniteDiffReport report;
    double global_max = 0.0;
    for (std::size_t l = 0; l < work.layer_count(); ++l) {
        FiniteDiffLayerReport lr;
        lr.layer = work.layer(l).name;
        double sum_rel = 0.0;
        auto& values = work.layer(l).values.data;
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double orig = values[i];
            values[i] = orig + step;
            const double up = graph.forward(work, inputs, loss_node).data[0];
            values[i] = orig - step;
            const double down = graph.forward(work, inputs, loss_node).data[0];
            values[i] = orig;
            require(std::isfinite(up) && std::isfinite(down),
                    "finite_diff_check: non-finite loss at perturbed entry ", i, " of layer '", lr.layer, "'");
            const double fd = (up - down) / (2.0 * step);
            const double ad = analytic[l].data[i];
            const double denom = std::max({std::fabs(fd), std::fabs(ad), 1e-8});
            const double rel = std::fabs(fd - ad) / denom;
            sum_rel += rel;
            lr.max_rel_dev = std::max(lr.max_rel_dev, rel);
        }
        lr.mean_rel_dev = values.empty() ? 0.0 : sum_rel / static_cast<double>(values.size());
        global_max = std::max(global_max, lr.max_rel_dev);
        report.layers.push_back(std::move(lr));
    }
    report.max_rel_dev = global_max;
    report.pass = global_max <= tolerance;
    // restore cached values for the unperturbed point
    graph.forward(work, inputs);
    return report;
}

} // namespace gallop
