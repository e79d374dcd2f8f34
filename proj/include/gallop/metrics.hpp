#pragma once

#include <map>
#include <string>
#include <vector>

namespace gallop {

/// Per-task test accuracies (percent) for one fine-tuning run.
struct RunRecord {
    int finetuned_task = 0;               // f
    std::map<int, double> accuracy;       // task id -> accuracy in [0,100]
};

/// Accuracy on the fine-tuned task's own test set.
double id_accuracy(const RunRecord& rec);

/// Mean accuracy over all other tasks' test sets.
double ood_accuracy(const RunRecord& rec);

/// Clamped relative drop of OOD accuracy vs the vanilla model, in [0,1].
/// A vanilla OOD accuracy of zero is the degenerate regime: the ratio is
/// defined as 0 and `degenerate` (when given) is set.
double forget_ratio(const RunRecord& rec, const RunRecord& vanilla, bool* degenerate = nullptr);

/// Count of OOD tasks whose accuracy floors to 0% (accuracy < 1 percent).
int collapse_rate(const RunRecord& rec);

struct ExperimentReport {
    std::string algorithm;
    double density = 0.0;
    std::vector<RunRecord> runs;
    std::vector<RunRecord> vanilla; // paired by finetuned_task
    double mean_id = 0.0;
    double mean_ood = 0.0;
    double mean_forget = 0.0;
    double mean_collapse = 0.0;
};

/// Averages the four metrics across one run per task.
ExperimentReport aggregate(std::string algorithm, double density,
                           std::vector<RunRecord> runs, std::vector<RunRecord> vanilla);

std::string report_csv_header();
std::string report_csv_rows(const ExperimentReport& report);

} // namespace gallop
