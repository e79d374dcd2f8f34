#pragma once

#include "gallop/tensor.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace gallop {

/// One classification example. `features` is a 1xP row; for generated suites
/// the layout is [raw features | one-hot format cue | constant 1]. `answer`
/// is the format-resolved output token the model must emit exactly.
struct Example {
    Tensor features;
    int label = 0;
    int task_id = 0;
    int answer = 0;
};

struct Task {
    int id = 0;
    int format_id = -1; // -1: labels are already answer tokens (CSV, pretraining mix)
    int n_classes = 0;
    std::vector<Example> train;
    std::vector<Example> test;
    std::vector<double> shift; // input-marginal offset of this task vs the shared backbone
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;

    int answer_token(int label) const {
        return format_id < 0 ? label : format_id * n_classes + label;
    }
};

struct SuiteParams {
    int n_tasks = 8;
    int feature_dim = 16;
    int n_classes = 4;
    int train_size = 512;
    int test_size = 256;
    // group sizes over tasks, in order; tasks within a group share a response format
    std::vector<int> format_groups = {4, 1, 1, 1, 1};
    double class_separation = 3.0;
    double noise_sigma = 1.0;
    double shift_magnitude = 6.0;
    int pretrain_size = 4096;
    int pretrain_test_size = 1024;
    // relative frequency of each format in the pretraining mix; defaults to
    // uniform when empty. A skewed mix leaves rarely-seen formats encoded in
    // low-magnitude weights, the regime sparse fine-tuning is sensitive to.
    std::vector<double> pretrain_format_weights;
    std::uint64_t seed = 0;

    bool operator==(const SuiteParams&) const = default;
};

/// Synthetic multi-task suite: every task draws labels from shared class
/// prototypes, offset by a per-task shift, and answers in its group's format.
/// `pretrain` mixes the zero-shift backbone across all formats and is the
/// training corpus for the vanilla model.
struct TaskSuite {
    SuiteParams params;
    int n_formats = 0;
    std::vector<Task> tasks;
    Task pretrain;
    std::vector<std::vector<double>> class_prototypes; // [n_classes][feature_dim]

    int input_dim() const { return params.feature_dim + n_formats + 1; }
    int answer_vocab() const { return params.n_classes * n_formats; }
};

TaskSuite generate_suite(const SuiteParams& params, std::uint64_t seed);

/// CSV with a header row; the column named "label" carries the integer class,
/// all other columns are features. The first ceil(train_fraction*N) rows form
/// the train split, in file order.
Task load_csv_dataset(const std::string& path, double train_fraction = 0.8);
void export_csv(const Task& task, const std::string& path);

/// First ceil(fraction*N) training examples in stored order.
std::vector<Example> take_fraction(const Task& task, double fraction);

/// Variant used by --phase1-shuffle-seed: same size, uniformly shuffled order.
std::vector<Example> take_fraction_shuffled(const Task& task, double fraction, std::uint64_t shuffle_seed);

} // namespace gallop
