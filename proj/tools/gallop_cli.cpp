#include "gallop/checkpoint.hpp"
#include "gallop/error.hpp"
#include "gallop/harness.hpp"
#include "gallop/metrics.hpp"
#include "gallop/rng.hpp"
#include "gallop/selection.hpp"
#include "gallop/tasks.hpp"
#include "gallop/trainer.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace gallop;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitPartial = 1;
constexpr int kExitConfig = 2;

struct TaskSource {
    std::string config_path;
    std::string csv_path;
    int task_index = 0;
};

ExperimentSpec spec_from(const TaskSource& src) {
    if (!src.config_path.empty()) return load_spec(src.config_path);
    return ExperimentSpec{};
}

// Resolve the (suite, task) pair a subcommand operates on.
std::pair<TaskSuite, int> resolve_task(const ExperimentSpec& spec, const TaskSource& src) {
    if (!src.csv_path.empty()) {
        TaskSuite suite;
        suite.n_formats = 1;
        Task t = load_csv_dataset(src.csv_path);
        suite.params.feature_dim = static_cast<int>(t.train.front().features.size());
        suite.params.n_classes = t.n_classes;
        suite.params.n_tasks = 1;
        suite.params.format_groups = {1};
        suite.tasks.push_back(std::move(t));
        return {std::move(suite), 0};
    }
    TaskSuite suite = generate_suite(spec.suite, spec.suite.seed);
    require(src.task_index >= 0 && src.task_index < static_cast<int>(suite.tasks.size()),
            "task index ", src.task_index, " outside suite of ", suite.tasks.size(), " tasks");
    return {std::move(suite), src.task_index};
}

int run_select(const TaskSource& src, const std::string& checkpoint_path,
               const std::string& out_path, const std::string& stats_path,
               const SelectionConfig& overrides) {
    ExperimentSpec spec = spec_from(src);
    auto [suite, task_idx] = resolve_task(spec, src);

    Checkpoint ck = load_checkpoint(checkpoint_path);
    Model model = build_model(ck.config, ck.config.init_seed);
    require(model.params.same_structure(ck.params), "checkpoint does not match its own config");

    SelectionConfig sel = spec.selection;
    sel.criterion = overrides.criterion;
    sel.density = overrides.density;
    sel.score_sample = overrides.score_sample;
    sel.data_fraction = overrides.data_fraction;
    sel.seed = overrides.seed;
    sel.strict_sample_rank = overrides.strict_sample_rank;

    SparsityMask mask = select_mask(model, ck.params, suite.tasks[static_cast<std::size_t>(task_idx)], sel);
    save_checkpoint(out_path, ck.config, ck.params, &mask);

    std::ostringstream os;
    os.precision(17);
    os << "layer,size,ones,density\n";
    for (const auto& row : mask_layer_densities(mask, ck.params)) {
        os << row.layer << "," << row.size << "," << row.ones << "," << row.density << "\n";
    }
    if (stats_path.empty()) {
        std::cout << os.str();
    } else {
        std::ofstream out(stats_path);
        require(out.is_open(), "cannot write '", stats_path, "'");
        out << os.str();
    }
    std::cout << "selected " << mask.ones() << " of " << ck.params.total_count()
              << " parameters (effective density "
              << effective_density(mask, ck.params.total_count()) << ")\n";
    return kExitOk;
}

int run_finetune(const TaskSource& src, const std::string& checkpoint_path,
                 const std::string& out_path, const std::string& trace_path) {
    ExperimentSpec spec = spec_from(src);
    auto [suite, task_idx] = resolve_task(spec, src);

    Checkpoint ck = load_checkpoint(checkpoint_path);
    Model model = build_model(ck.config, ck.config.init_seed);

    const SparsityMask* mask = ck.mask ? &*ck.mask : nullptr;
    FinetuneResult ft = finetune(model, ck.params, mask, suite.tasks[static_cast<std::size_t>(task_idx)],
                                 spec.train);
    save_checkpoint(out_path, ck.config, ft.best_params, mask);

    std::ostringstream os;
    os.precision(17);
    os << "epoch,train_loss,id_accuracy\n";
    for (const auto& e : ft.trace) os << e.epoch << "," << e.train_loss << "," << e.id_accuracy << "\n";
    if (trace_path.empty()) {
        std::cout << os.str();
    } else {
        std::ofstream out(trace_path);
        require(out.is_open(), "cannot write '", trace_path, "'");
        out << os.str();
    }
    std::cout << "best epoch " << ft.best_epoch << ", checkpoint written to " << out_path << "\n";
    return kExitOk;
}

int run_evaluate(const TaskSource& src, const std::string& checkpoint_path) {
    ExperimentSpec spec = spec_from(src);
    Checkpoint ck = load_checkpoint(checkpoint_path);
    Model model = build_model(ck.config, ck.config.init_seed);

    TaskSuite suite;
    if (!src.csv_path.empty()) {
        auto [s, idx] = resolve_task(spec, src);
        suite = std::move(s);
    } else {
        suite = generate_suite(spec.suite, spec.suite.seed);
    }

    std::cout << "task,accuracy\n";
    std::cout.precision(17);
    for (const auto& task : suite.tasks) {
        std::cout << task.id << "," << accuracy_pct(model, ck.params, task, task.test) << "\n";
    }
    return kExitOk;
}

int run_report(const std::string& output_dir) {
    const fs::path index = fs::path(output_dir) / "index.json";
    require(fs::exists(index), "no index.json under '", output_dir, "' (run round-robin first)");
    std::ifstream in(index);
    std::ostringstream ss;
    ss << in.rdbuf();
    std::cout << ss.str() << "\n";
    const fs::path agg = fs::path(output_dir) / "reports" / "aggregate.csv";
    if (fs::exists(agg)) {
        std::ifstream f(agg);
        std::cout << f.rdbuf();
    }
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"sparse fine-tuning toolkit: dual-criterion parameter selection, "
                 "masked optimization, and generalization studies"};
    app.require_subcommand(1);

    TaskSource src;
    std::string checkpoint_path, out_path, stats_path, trace_path, output_dir;
    SelectionConfig sel;
    std::string criterion_str = "gallop";
    int n_seeds = 20;
    std::vector<double> sample_grid = {0.1, 1.0};
    std::vector<double> density_grid = {0.0037, 0.0073, 0.0145, 0.0286};
    double tolerance = 0.10;
    std::uint64_t init_seed = 0;

    auto add_source = [&](CLI::App* cmd, bool with_task) {
        cmd->add_option("--config", src.config_path, "experiment config JSON");
        cmd->add_option("--csv", src.csv_path, "single CSV task instead of the generated suite");
        if (with_task) cmd->add_option("--task", src.task_index, "task index inside the suite");
    };

    auto* init = app.add_subcommand("init", "write a fresh checkpoint for the configured model");
    add_source(init, false);
    init->add_option("--out", out_path, "checkpoint path")->required();
    init->add_option("--seed", init_seed, "initialization seed");

    auto* select = app.add_subcommand("select", "phase 1: build a sparsity mask from a checkpoint");
    add_source(select, true);
    select->add_option("--checkpoint", checkpoint_path, "input checkpoint")->required();
    select->add_option("--out", out_path, "checkpoint+mask output path")->required();
    select->add_option("--stats-csv", stats_path, "per-layer density CSV (stdout when omitted)");
    select->add_option("--criterion", criterion_str, "gallop|gradient-only|magnitude-smallest|magnitude-largest|random");
    select->add_option("--density", sel.density, "target density in (0,1)");
    select->add_option("--sample", sel.score_sample, "score sample proportion (1.0 = exact top-k)");
    select->add_option("--data-fraction", sel.data_fraction, "train fraction for the gradient pass");
    select->add_option("--seed", sel.seed, "sampling seed");
    select->add_flag("--strict-rank", sel.strict_sample_rank,
                     "index the sampled scores literally at floor(density*D)");

    auto* ft = app.add_subcommand("finetune", "phase 2: fine-tune a checkpoint (masked when present)");
    add_source(ft, true);
    ft->add_option("--checkpoint", checkpoint_path, "input checkpoint")->required();
    ft->add_option("--out", out_path, "output checkpoint")->required();
    ft->add_option("--trace-csv", trace_path, "per-epoch metric trace (stdout when omitted)");

    auto* ev = app.add_subcommand("evaluate", "per-task test accuracy of a checkpoint");
    add_source(ev, false);
    ev->add_option("--checkpoint", checkpoint_path, "checkpoint to evaluate")->required();

    auto* rr = app.add_subcommand("round-robin", "fine-tune on every task, evaluate on all");
    rr->add_option("--config", src.config_path, "experiment config JSON")->required();

    auto* mot = app.add_subcommand("ablate-motivation", "smallest vs largest magnitude selection grid");
    mot->add_option("--config", src.config_path, "experiment config JSON")->required();

    auto* stab = app.add_subcommand("stability", "multi-seed replication at the highest density");
    stab->add_option("--config", src.config_path, "experiment config JSON")->required();
    stab->add_option("--seeds", n_seeds, "number of seeds");

    auto* vd = app.add_subcommand("verify-density", "effective vs requested density across grids");
    vd->add_option("--config", src.config_path, "experiment config JSON")->required();
    vd->add_option("--sample-grid", sample_grid, "score sample proportions");
    vd->add_option("--density-grid", density_grid, "densities");
    vd->add_option("--tolerance", tolerance, "relative error tolerance");

    auto* rep = app.add_subcommand("report", "print the index and aggregate CSV of a finished run");
    rep->add_option("--output-dir", output_dir, "experiment output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (init->parsed()) {
            ExperimentSpec spec = spec_from(src);
            TaskSuite suite = spec.suite_csv.empty() && src.csv_path.empty()
                ? generate_suite(spec.suite, spec.suite.seed)
                : resolve_task(spec, src).first;
            ModelConfig cfg = spec.model;
            cfg.input_dim = suite.input_dim();
            cfg.output_dim = suite.answer_vocab();
            cfg.init_seed = init_seed;
            Model model = build_model(cfg, init_seed);
            save_checkpoint(out_path, cfg, model.params, nullptr);
            std::cout << "wrote " << out_path << " (" << model.params.total_count() << " parameters)\n";
            return kExitOk;
        }
        if (select->parsed()) {
            const auto crit = criterion_from_name(criterion_str);
            require(crit.has_value(), "unknown criterion '", criterion_str, "'");
            sel.criterion = *crit;
            return run_select(src, checkpoint_path, out_path, stats_path, sel);
        }
        if (ft->parsed()) return run_finetune(src, checkpoint_path, out_path, trace_path);
        if (ev->parsed()) return run_evaluate(src, checkpoint_path);
        if (rr->parsed()) {
            RoundRobinResult result = run_round_robin(load_spec(src.config_path));
            std::cout << result.cells.size() << " cells, " << result.failed_cells << " failed\n";
            for (const auto& cell : result.cells) {
                if (cell.failed) {
                    std::cerr << "failed: " << cell.algorithm << " rho=" << cell.density << " seed="
                              << cell.seed << " task=" << cell.task << ": " << cell.error << "\n";
                }
            }
            return result.failed_cells == 0 ? kExitOk : kExitPartial;
        }
        if (mot->parsed()) {
            MotivationResult result = run_motivation_ablation(load_spec(src.config_path));
            std::cout << "density,criterion,mean_id,mean_ood\n";
            for (const auto& row : result.rows) {
                std::cout << row.density << "," << row.criterion << "," << row.mean_id << ","
                          << row.mean_ood << "\n";
            }
            std::cout << "vanilla mean ID: " << result.vanilla_mean_id << "\n";
            return result.detail.failed_cells == 0 ? kExitOk : kExitPartial;
        }
        if (stab->parsed()) {
            StabilityResult result = run_stability_study(load_spec(src.config_path), n_seeds);
            std::cout << "algorithm,median_id,iqr_id,median_ood,iqr_ood\n";
            for (const auto& s : result.summary) {
                std::cout << s.algorithm << "," << s.median_id << "," << s.iqr_id << ","
                          << s.median_ood << "," << s.iqr_ood << "\n";
            }
            return result.failed_cells == 0 ? kExitOk : kExitPartial;
        }
        if (vd->parsed()) {
            DensityCheckResult result = verify_effective_density(load_spec(src.config_path),
                                                                 sample_grid, density_grid, tolerance);
            std::cout << "score_sample,density,effective_density,rel_error,ok\n";
            for (const auto& row : result.rows) {
                std::cout << row.score_sample << "," << row.density << "," << row.effective << ","
                          << row.rel_error << "," << (row.ok ? 1 : 0) << "\n";
            }
            return result.all_ok ? kExitOk : kExitPartial;
        }
        if (rep->parsed()) return run_report(output_dir);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitPartial;
    }
    return kExitConfig;
}
