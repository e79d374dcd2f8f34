#include "gallop/trainer.hpp"

#include "gallop/error.hpp"
#include "gallop/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace gallop {

const char* schedule_name(ScheduleKind k) {
    switch (k) {
        case ScheduleKind::cosine_warmup: return "cosine";
        case ScheduleKind::linear_warmup: return "linear";
        case ScheduleKind::constant: return "constant";
    }
    return "?";
}

const char* optimizer_name(OptimizerKind k) {
    switch (k) {
        case OptimizerKind::sgd: return "sgd";
        case OptimizerKind::adamw: return "adamw";
    }
    return "?";
}

OptimizerState OptimizerState::for_params(const ParameterSet& params, OptimizerKind kind) {
    OptimizerState s;
    if (kind == OptimizerKind::adamw) {
        s.m = zero_gradients(params);
        s.v = zero_gradients(params);
    }
    return s;
}

double lr_at(const TrainConfig& config, std::int64_t step, std::int64_t total_steps) {
    require(step >= 0, "lr_at: negative step");
    const double lr = config.learning_rate;
    const auto warmup = static_cast<std::int64_t>(config.warmup_steps);
    if (warmup > 0 && step <= warmup) {
        return lr * static_cast<double>(step) / static_cast<double>(warmup);
    }
    if (config.schedule == ScheduleKind::constant) return lr;
    const double span = static_cast<double>(std::max<std::int64_t>(total_steps - warmup, 1));
    const double progress = std::clamp(static_cast<double>(step - warmup) / span, 0.0, 1.0);
    if (config.schedule == ScheduleKind::linear_warmup) return lr * (1.0 - progress);
    return lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

void masked_step(ParameterSet& params, const LayerGradients& grads, const SparsityMask* mask,
                 OptimizerState& state, const TrainConfig& config, std::int64_t total_steps) {
    require(grads.size() == params.layer_count(), "masked_step: gradient/parameter layer mismatch");
    if (mask) {
        require(mask->same_structure(params), "masked_step: mask/parameter structure mismatch");
    }
    state.step += 1;
    const double lr = lr_at(config, state.step, total_steps);

    const bool adaptive = config.optimizer == OptimizerKind::adamw;
    const double bias1 = adaptive ? 1.0 - std::pow(config.beta1, static_cast<double>(state.step)) : 1.0;
    const double bias2 = adaptive ? 1.0 - std::pow(config.beta2, static_cast<double>(state.step)) : 1.0;

    for (std::size_t l = 0; l < params.layer_count(); ++l) {
        auto& theta = params.layer(l).values.data;
        const auto& g = grads[l].data;
        require(g.size() == theta.size(), "masked_step: gradient shape mismatch at layer '",
                params.layer(l).name, "'");
        for (std::size_t i = 0; i < theta.size(); ++i) {
            if (mask && !mask->get(l, i)) continue;
            double update;
            if (adaptive) {
                double& m = state.m[l].data[i];
                double& v = state.v[l].data[i];
                m = config.beta1 * m + (1.0 - config.beta1) * g[i];
                v = config.beta2 * v + (1.0 - config.beta2) * g[i] * g[i];
                const double m_hat = m / bias1;
                const double v_hat = v / bias2;
                update = lr * (m_hat / (std::sqrt(v_hat) + config.adam_eps) + config.weight_decay * theta[i]);
            } else {
                update = lr * g[i];
            }
            const double next = theta[i] - update;
            require(std::isfinite(next), "masked_step: non-finite update in layer '",
                    params.layer(l).name, "'");
            theta[i] = next;
        }
    }
}

FinetuneResult finetune(Model& model, const ParameterSet& start, const SparsityMask* mask,
                        const Task& task, const TrainConfig& config) {
    require(!task.train.empty(), "finetune: task has no train split");
    require(!task.test.empty(), "finetune: task has no test split");
    require(config.epochs >= 1, "finetune: epochs must be at least 1");
    require(config.batch_size >= 1, "finetune: batch size must be at least 1");
    require(config.learning_rate >= 0.0, "finetune: learning rate must be nonnegative");

    ParameterSet params = snapshot(start);
    OptimizerState state = OptimizerState::for_params(params, config.optimizer);

    const auto n = task.train.size();
    const auto steps_per_epoch = static_cast<std::int64_t>((n + config.batch_size - 1) / config.batch_size);
    const std::int64_t total_steps = steps_per_epoch * config.epochs;

    FinetuneResult result;
    double best_metric = -1.0;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        RandomSource shuffle_rng(derive_seed(config.seed, 40 + static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        for (std::size_t b = 0; b < n; b += config.batch_size) {
            const std::size_t hi = std::min(n, b + config.batch_size);
            LayerGradients batch_grads = zero_gradients(params);
            for (std::size_t i = b; i < hi; ++i) {
                const Example& ex = task.train[order[i]];
                const auto in = model_inputs(model, ex.features, task.answer_token(ex.label));
                const double loss = model.graph.forward(params, in, model.loss_node).data[0];
                require(std::isfinite(loss), "finetune: non-finite loss at step ", state.step + 1,
                        " (epoch ", epoch, ")");
                loss_sum += loss;
                LayerGradients g = model.graph.backward(params, model.loss_node);
                for (std::size_t l = 0; l < g.size(); ++l) {
                    for (std::size_t j = 0; j < g[l].size(); ++j) batch_grads[l].data[j] += g[l].data[j];
                }
            }
            const double inv = 1.0 / static_cast<double>(hi - b);
            for (auto& layer : batch_grads) {
                for (auto& v : layer.data) v *= inv;
            }
            masked_step(params, batch_grads, mask, state, config, total_steps);
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = loss_sum / static_cast<double>(n);
        stats.id_accuracy = accuracy_pct(model, params, task, task.test);
        result.trace.push_back(stats);

        if (stats.id_accuracy > best_metric) {
            best_metric = stats.id_accuracy;
            result.best_epoch = epoch;
            result.best_params = snapshot(params);
        }
    }
    return result;
}

ParameterSet interpolate_weights(const ParameterSet& base, const ParameterSet& tuned, double alpha) {
    require(base.same_structure(tuned), "interpolate_weights: parameter sets have different structure");
    require(alpha >= 0.0 && alpha <= 1.0, "interpolate_weights: alpha ", alpha, " outside [0,1]");
    if (alpha == 0.0) return snapshot(base);
    if (alpha == 1.0) return snapshot(tuned);
    ParameterSet out = snapshot(base);
    for (std::size_t l = 0; l < out.layer_count(); ++l) {
        auto& dst = out.layer(l).values.data;
        const auto& a = base.layer(l).values.data;
        const auto& b = tuned.layer(l).values.data;
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = (1.0 - alpha) * a[i] + alpha * b[i];
    }
    return out;
}

} // namespace gallop
