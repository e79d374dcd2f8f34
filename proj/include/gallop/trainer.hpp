#pragma once

#include "gallop/model.hpp"
#include "gallop/params.hpp"
#include "gallop/selection.hpp"
#include "gallop/tasks.hpp"

#include <cstdint>
#include <vector>

namespace gallop {

enum class ScheduleKind { cosine_warmup, linear_warmup, constant };
enum class OptimizerKind { sgd, adamw };

const char* schedule_name(ScheduleKind k);
const char* optimizer_name(OptimizerKind k);

struct TrainConfig {
    // Desk-scale defaults; LLM-scale recipes run the same shape with
    // lr 2e-5, warmup 100, cosine, batch 16, 3 epochs.
    double learning_rate = 1e-3;
    ScheduleKind schedule = ScheduleKind::cosine_warmup;
    int warmup_steps = 20;
    int batch_size = 16;
    int epochs = 3;
    OptimizerKind optimizer = OptimizerKind::adamw;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.0;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;

    bool operator==(const TrainConfig&) const = default;
};

struct OptimizerState {
    std::vector<Tensor> m; // first moments (adamw)
    std::vector<Tensor> v; // second moments (adamw)
    std::int64_t step = 0;

    static OptimizerState for_params(const ParameterSet& params, OptimizerKind kind);
};

/// Scheduled learning rate at a 1-based optimizer step: linear ramp
/// 0 -> lr over the warmup, then decay (cosine/linear) to 0 at total_steps.
double lr_at(const TrainConfig& config, std::int64_t step, std::int64_t total_steps);

/// One optimizer step. Masked-off entries are skipped entirely: their values
/// stay bit-identical and their moments stay zero. mask == nullptr is dense.
void masked_step(ParameterSet& params, const LayerGradients& grads, const SparsityMask* mask,
                 OptimizerState& state, const TrainConfig& config, std::int64_t total_steps);

struct EpochStats {
    int epoch = 0;         // 1-based
    double train_loss = 0; // mean over the epoch's examples
    double id_accuracy = 0;
};

struct FinetuneResult {
    ParameterSet best_params; // checkpoint from the best epoch
    int best_epoch = 0;
    std::vector<EpochStats> trace;
};

/// Mini-batch fine-tuning of `start` on the task's train split; returns the
/// checkpoint of the epoch with the highest test-split accuracy (the ID test
/// set doubles as the early-stopping dev set). mask == nullptr is dense
/// fine-tuning.
FinetuneResult finetune(Model& model, const ParameterSet& start, const SparsityMask* mask,
                        const Task& task, const TrainConfig& config);

/// Elementwise (1-alpha)*base + alpha*tuned; alpha in {0,1} returns the
/// respective endpoint bit-exactly.
ParameterSet interpolate_weights(const ParameterSet& base, const ParameterSet& tuned, double alpha);

} // namespace gallop
