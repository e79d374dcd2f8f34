#pragma once

#include "gallop/metrics.hpp"
#include "gallop/model.hpp"
#include "gallop/selection.hpp"
#include "gallop/tasks.hpp"
#include "gallop/trainer.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace gallop {

/// Experiment grid: algorithms x densities x seeds x tasks, one fine-tuning
/// run per cell, all starting from the shared pretrained (vanilla) model.
struct ExperimentSpec {
    SuiteParams suite;
    std::vector<std::string> suite_csv; // when nonempty, tasks come from these files instead
    ModelConfig model;
    std::vector<std::string> algorithms = {"gallop"};
    double wise_ft_alpha = 0.5;
    std::vector<double> densities = {0.0037, 0.0073, 0.0145, 0.0286};
    std::vector<std::uint64_t> seeds = {1};
    TrainConfig train;
    TrainConfig pretrain; // vanilla model training on the suite's backbone mix
    SelectionConfig selection; // density and seed are overridden per cell
    // when false, run seeds feed only phase-1 sampling and the training data
    // order stays fixed across seeds
    bool vary_train_seed = true;
    std::string output_dir = "out";

    bool operator==(const ExperimentSpec&) const = default;
};

bool algorithm_known(const std::string& name);
bool algorithm_uses_density(const std::string& name);

std::string spec_to_json(const ExperimentSpec& spec);
ExperimentSpec spec_from_json(const std::string& text);
ExperimentSpec load_spec(const std::string& path);
void save_spec(const ExperimentSpec& spec, const std::string& path);

struct RunArtifact {
    std::string checkpoint_path;
    std::string trace_path;
    std::string record_path;
};

struct CellResult {
    std::string algorithm;
    double density = 0.0; // 0 for density-free algorithms (dense, wise-ft)
    std::uint64_t seed = 0;
    int task = 0;
    RunRecord record;
    RunArtifact artifact;
    bool reused = false; // satisfied from persisted artifacts
    bool failed = false;
    std::string error;
};

/// The suite plus the pretrained vanilla model state shared by every cell.
struct Workbench {
    TaskSuite suite;
    ParameterSet vanilla_params;
    RunRecord vanilla_accuracies; // finetuned_task unset; per-task map filled
};

Workbench prepare_workbench(const ExperimentSpec& spec);

struct SeededReport {
    std::uint64_t seed = 0;
    ExperimentReport report;
};

struct RoundRobinResult {
    std::vector<CellResult> cells;
    std::vector<SeededReport> reports; // one per (algorithm, density, seed)
    int failed_cells = 0;
};

/// Worker count for independent cells; reads GALLOP_WORKERS, defaults to 1.
int worker_count_from_env();

RoundRobinResult run_round_robin(const ExperimentSpec& spec);

struct MotivationRow {
    double density = 0.0;
    std::string criterion;
    double mean_id = 0.0;
    double mean_ood = 0.0;
};

struct MotivationResult {
    std::vector<MotivationRow> rows; // per (density, criterion), averaged over seeds and runs
    double vanilla_mean_id = 0.0;
    RoundRobinResult detail;
};

/// Side-by-side smallest- vs largest-magnitude selection across the grid.
MotivationResult run_motivation_ablation(const ExperimentSpec& spec);

struct StabilityRow {
    std::string algorithm;
    std::uint64_t seed = 0;
    double mean_id = 0.0;
    double mean_ood = 0.0;
    double mean_forget = 0.0;
    double mean_collapse = 0.0;
};

struct StabilitySummary {
    std::string algorithm;
    double median_id = 0.0, iqr_id = 0.0;
    double median_ood = 0.0, iqr_ood = 0.0;
};

struct StabilityResult {
    double density = 0.0;
    std::vector<StabilityRow> rows;
    std::vector<StabilitySummary> summary;
    int failed_cells = 0;
};

/// Multi-seed replication of the round robin at the highest density.
StabilityResult run_stability_study(const ExperimentSpec& spec, int n_seeds);

struct DensityCheckRow {
    double score_sample = 0.0;
    double density = 0.0;
    double effective = 0.0;
    double rel_error = 0.0;
    bool ok = false;
    std::string error; // per-cell failure (e.g. sample rank out of bounds)
};

struct DensityCheckResult {
    std::vector<DensityCheckRow> rows;
    bool all_ok = true;
};

/// Effective vs requested density over (score sample, density) grids, using a
/// phase-1 score field from the suite's first task. Relative error is against
/// the attainable target floor(density*D)/D.
DensityCheckResult verify_effective_density(const ExperimentSpec& spec,
                                            const std::vector<double>& sample_grid,
                                            const std::vector<double>& density_grid,
                                            double tolerance);

// interpolation quantile over a sorted sequence, used for the IQR summaries
double sorted_quantile(const std::vector<double>& sorted, double p);

} // namespace gallop
