#include "gallop/harness.hpp"

#include "gallop/checkpoint.hpp"
#include "gallop/error.hpp"
#include "gallop/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <thread>

namespace fs = std::filesystem;

namespace gallop {

namespace {

using nlohmann::json;

json train_config_to_json(const TrainConfig& c) {
    return json{
        {"learning_rate", c.learning_rate},
        {"schedule", schedule_name(c.schedule)},
        {"warmup_steps", c.warmup_steps},
        {"batch_size", c.batch_size},
        {"epochs", c.epochs},
        {"optimizer", optimizer_name(c.optimizer)},
        {"beta1", c.beta1},
        {"beta2", c.beta2},
        {"weight_decay", c.weight_decay},
        {"adam_eps", c.adam_eps},
        {"seed", c.seed},
    };
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    const std::string sched = j.value("schedule", std::string(schedule_name(c.schedule)));
    if (sched == "cosine") c.schedule = ScheduleKind::cosine_warmup;
    else if (sched == "linear") c.schedule = ScheduleKind::linear_warmup;
    else if (sched == "constant") c.schedule = ScheduleKind::constant;
    else fail("config: unknown schedule '", sched, "'");
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    const std::string opt = j.value("optimizer", std::string(optimizer_name(c.optimizer)));
    if (opt == "sgd") c.optimizer = OptimizerKind::sgd;
    else if (opt == "adamw") c.optimizer = OptimizerKind::adamw;
    else fail("config: unknown optimizer '", opt, "'");
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.seed = j.value("seed", c.seed);
    return c;
}

json selection_config_to_json(const SelectionConfig& c) {
    json j{
        {"criterion", criterion_name(c.criterion)},
        {"density", c.density},
        {"data_fraction", c.data_fraction},
        {"score_sample", c.score_sample},
        {"epsilon", c.epsilon},
        {"gradient_mode", c.gradient_mode == GradientMode::mean_of_abs ? "mean-of-abs" : "abs-of-mean"},
        {"strict_sample_rank", c.strict_sample_rank},
        {"seed", c.seed},
        {"exclude_layers", c.exclude_layers},
    };
    if (c.phase1_shuffle_seed) j["phase1_shuffle_seed"] = *c.phase1_shuffle_seed;
    else j["phase1_shuffle_seed"] = nullptr;
    return j;
}

SelectionConfig selection_config_from_json(const json& j) {
    SelectionConfig c;
    const std::string crit = j.value("criterion", std::string(criterion_name(c.criterion)));
    const auto parsed = criterion_from_name(crit);
    require(parsed.has_value(), "config: unknown criterion '", crit, "'");
    c.criterion = *parsed;
    c.density = j.value("density", c.density);
    c.data_fraction = j.value("data_fraction", c.data_fraction);
    c.score_sample = j.value("score_sample", c.score_sample);
    c.epsilon = j.value("epsilon", c.epsilon);
    const std::string mode = j.value("gradient_mode", "mean-of-abs");
    if (mode == "mean-of-abs") c.gradient_mode = GradientMode::mean_of_abs;
    else if (mode == "abs-of-mean") c.gradient_mode = GradientMode::abs_of_mean;
    else fail("config: unknown gradient_mode '", mode, "'");
    c.strict_sample_rank = j.value("strict_sample_rank", c.strict_sample_rank);
    c.seed = j.value("seed", c.seed);
    if (j.contains("phase1_shuffle_seed") && !j["phase1_shuffle_seed"].is_null()) {
        c.phase1_shuffle_seed = j["phase1_shuffle_seed"].get<std::uint64_t>();
    }
    c.exclude_layers = j.value("exclude_layers", c.exclude_layers);
    return c;
}

json suite_params_to_json(const SuiteParams& p) {
    return json{
        {"n_tasks", p.n_tasks},
        {"feature_dim", p.feature_dim},
        {"n_classes", p.n_classes},
        {"train_size", p.train_size},
        {"test_size", p.test_size},
        {"format_groups", p.format_groups},
        {"class_separation", p.class_separation},
        {"noise_sigma", p.noise_sigma},
        {"shift_magnitude", p.shift_magnitude},
        {"pretrain_size", p.pretrain_size},
        {"pretrain_test_size", p.pretrain_test_size},
        {"pretrain_format_weights", p.pretrain_format_weights},
        {"seed", p.seed},
    };
}

SuiteParams suite_params_from_json(const json& j) {
    SuiteParams p;
    p.n_tasks = j.value("n_tasks", p.n_tasks);
    p.feature_dim = j.value("feature_dim", p.feature_dim);
    p.n_classes = j.value("n_classes", p.n_classes);
    p.train_size = j.value("train_size", p.train_size);
    p.test_size = j.value("test_size", p.test_size);
    p.format_groups = j.value("format_groups", p.format_groups);
    p.class_separation = j.value("class_separation", p.class_separation);
    p.noise_sigma = j.value("noise_sigma", p.noise_sigma);
    p.shift_magnitude = j.value("shift_magnitude", p.shift_magnitude);
    p.pretrain_size = j.value("pretrain_size", p.pretrain_size);
    p.pretrain_test_size = j.value("pretrain_test_size", p.pretrain_test_size);
    p.pretrain_format_weights = j.value("pretrain_format_weights", p.pretrain_format_weights);
    p.seed = j.value("seed", p.seed);
    return p;
}

std::string density_dir(double density) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "rho_%.6f", density);
    return buf;
}

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    require(out.is_open(), "cannot write '", path.string(), "'");
    out << text;
    require(static_cast<bool>(out), "write to '", path.string(), "' failed");
}

ModelConfig resolve_model_config(const ExperimentSpec& spec, const TaskSuite& suite) {
    ModelConfig cfg = spec.model;
    cfg.input_dim = suite.input_dim();
    cfg.output_dim = suite.answer_vocab();
    return cfg;
}

RunRecord evaluate_all_tasks(Model& model, const ParameterSet& params, const TaskSuite& suite) {
    RunRecord rec;
    for (const auto& task : suite.tasks) {
        rec.accuracy[task.id] = accuracy_pct(model, params, task, task.test);
    }
    return rec;
}

TaskSuite load_csv_suite(const ExperimentSpec& spec) {
    TaskSuite suite;
    suite.params = spec.suite;
    suite.n_formats = 1;
    int max_classes = 0;
    for (std::size_t i = 0; i < spec.suite_csv.size(); ++i) {
        Task t = load_csv_dataset(spec.suite_csv[i]);
        t.id = static_cast<int>(i);
        for (auto& ex : t.train) ex.task_id = t.id;
        for (auto& ex : t.test) ex.task_id = t.id;
        max_classes = std::max(max_classes, t.n_classes);
        suite.tasks.push_back(std::move(t));
    }
    require(suite.tasks.size() >= 2, "csv suite: need at least 2 task files");
    // vanilla corpus: union of all train/test splits
    Task& pre = suite.pretrain;
    pre.id = -1;
    pre.format_id = -1;
    pre.n_classes = max_classes;
    for (const auto& t : suite.tasks) {
        pre.train.insert(pre.train.end(), t.train.begin(), t.train.end());
        pre.test.insert(pre.test.end(), t.test.begin(), t.test.end());
    }
    // normalize suite bookkeeping so input_dim()/answer_vocab() reflect the data
    suite.params.n_classes = max_classes;
    suite.params.feature_dim = static_cast<int>(suite.tasks.front().train.front().features.size());
    suite.params.n_tasks = static_cast<int>(suite.tasks.size());
    suite.n_formats = 1;
    suite.params.format_groups = {suite.params.n_tasks};
    return suite;
}

struct CellPlan {
    std::string algorithm;
    double density = 0.0;
    std::uint64_t seed = 0;
    int task = 0;
    bool wise_ft = false;
};

std::uint64_t cell_tag(const CellPlan& plan) {
    return derive_seed(std::bit_cast<std::uint64_t>(plan.density),
                       static_cast<std::uint64_t>(plan.task));
}

fs::path cell_dir(const ExperimentSpec& spec, const CellPlan& plan) {
    fs::path dir = fs::path(spec.output_dir) / "runs" / plan.algorithm;
    if (algorithm_uses_density(plan.algorithm)) dir /= density_dir(plan.density);
    dir /= "seed_" + std::to_string(plan.seed);
    dir /= "task_" + std::to_string(plan.task);
    return dir;
}

bool try_load_record(const fs::path& record_path, CellResult& result) {
    std::ifstream in(record_path);
    if (!in.is_open()) return false;
    json j;
    try {
        in >> j;
        result.record.finetuned_task = j.at("task").get<int>();
        for (const auto& [key, value] : j.at("accuracies").items()) {
            result.record.accuracy[std::stoi(key)] = value.get<double>();
        }
    } catch (const std::exception&) {
        return false; // treat unreadable records as absent and re-run the cell
    }
    return true;
}

void write_record(const fs::path& record_path, const CellResult& result, int best_epoch) {
    json j;
    j["algorithm"] = result.algorithm;
    j["density"] = result.density;
    j["seed"] = result.seed;
    j["task"] = result.task;
    j["best_epoch"] = best_epoch;
    json acc = json::object();
    for (const auto& [task, value] : result.record.accuracy) acc[std::to_string(task)] = value;
    j["accuracies"] = acc;
    write_text_file(record_path, j.dump(2));
}

std::string trace_csv(const std::vector<EpochStats>& trace) {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,train_loss,id_accuracy\n";
    for (const auto& e : trace) os << e.epoch << "," << e.train_loss << "," << e.id_accuracy << "\n";
    return os.str();
}

// one fine-tuning cell; throws on failure, caller records it
void execute_cell(const ExperimentSpec& spec, const Workbench& bench, const CellPlan& plan,
                  CellResult& result) {
    result.algorithm = plan.algorithm;
    result.density = algorithm_uses_density(plan.algorithm) ? plan.density : 0.0;
    result.seed = plan.seed;
    result.task = plan.task;

    const fs::path dir = cell_dir(spec, plan);
    result.artifact.checkpoint_path = (dir / "checkpoint.bin").string();
    result.artifact.trace_path = (dir / "trace.csv").string();
    result.artifact.record_path = (dir / "record.json").string();

    if (try_load_record(dir / "record.json", result)) {
        result.reused = true;
        return;
    }
    fs::create_directories(dir);

    const ModelConfig model_cfg = resolve_model_config(spec, bench.suite);
    Model model = build_model(model_cfg, model_cfg.init_seed);
    const Task& task = bench.suite.tasks[static_cast<std::size_t>(plan.task)];

    ParameterSet tuned;
    std::vector<EpochStats> trace;
    int best_epoch = 0;

    if (plan.wise_ft) {
        // post-processing of the dense run's checkpoint
        CellPlan dense_plan = plan;
        dense_plan.algorithm = "dense";
        dense_plan.wise_ft = false;
        const fs::path dense_ckpt = cell_dir(spec, dense_plan) / "checkpoint.bin";
        require(fs::exists(dense_ckpt), "wise-ft: dense checkpoint missing at '", dense_ckpt.string(), "'");
        Checkpoint dense = load_checkpoint(dense_ckpt.string());
        tuned = interpolate_weights(bench.vanilla_params, dense.params, spec.wise_ft_alpha);
    } else {
        TrainConfig train_cfg = spec.train;
        train_cfg.seed = spec.vary_train_seed
            ? derive_seed(spec.train.seed, plan.seed, cell_tag(plan))
            : derive_seed(spec.train.seed, cell_tag(plan));

        std::optional<SparsityMask> mask;
        if (plan.algorithm != "dense") {
            const auto criterion = criterion_from_name(plan.algorithm);
            require(criterion.has_value(), "unknown selection algorithm '", plan.algorithm, "'");
            SelectionConfig sel = spec.selection;
            sel.criterion = *criterion;
            sel.density = plan.density;
            sel.seed = derive_seed(spec.selection.seed, plan.seed, cell_tag(plan));
            mask = select_mask(model, bench.vanilla_params, task, sel);
        }

        FinetuneResult ft = finetune(model, bench.vanilla_params, mask ? &*mask : nullptr, task, train_cfg);
        tuned = std::move(ft.best_params);
        trace = std::move(ft.trace);
        best_epoch = ft.best_epoch;
        save_checkpoint(result.artifact.checkpoint_path, model_cfg, tuned, mask ? &*mask : nullptr);
        write_text_file(dir / "trace.csv", trace_csv(trace));
    }

    if (plan.wise_ft) {
        save_checkpoint(result.artifact.checkpoint_path, model_cfg, tuned, nullptr);
        write_text_file(dir / "trace.csv", trace_csv({}));
    }

    result.record = evaluate_all_tasks(model, tuned, bench.suite);
    result.record.finetuned_task = plan.task;
    write_record(dir / "record.json", result, best_epoch);
}

void run_cells(const ExperimentSpec& spec, const Workbench& bench,
               const std::vector<CellPlan>& plans, std::vector<CellResult>& results) {
    const std::size_t base = results.size();
    results.resize(base + plans.size());
    std::atomic<std::size_t> next{0};
    const int workers = std::max(1, std::min<int>(worker_count_from_env(),
                                                  static_cast<int>(plans.size())));
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= plans.size()) break;
            CellResult& result = results[base + i];
            try {
                execute_cell(spec, bench, plans[i], result);
            } catch (const std::exception& e) {
                result.algorithm = plans[i].algorithm;
                result.density = algorithm_uses_density(plans[i].algorithm) ? plans[i].density : 0.0;
                result.seed = plans[i].seed;
                result.task = plans[i].task;
                result.failed = true;
                result.error = e.what();
            }
        }
    };
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(workers));
        for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
}

void write_reports(const ExperimentSpec& spec, const Workbench& bench, RoundRobinResult& rr) {
    const fs::path reports = fs::path(spec.output_dir) / "reports";
    fs::create_directories(reports);

    // group cells by (algorithm, density, seed)
    struct Key {
        std::string alg;
        double density;
        std::uint64_t seed;
        bool operator<(const Key& o) const {
            return std::tie(alg, density, seed) < std::tie(o.alg, o.density, o.seed);
        }
    };
    std::map<Key, std::vector<const CellResult*>> groups;
    for (const auto& cell : rr.cells) {
        if (cell.failed) continue;
        groups[Key{cell.algorithm, cell.density, cell.seed}].push_back(&cell);
    }

    std::ostringstream summary;
    summary.precision(17);
    summary << "algorithm,density,seed,task,id_accuracy,ood_accuracy,forget_ratio,collapse_rate\n";
    std::ostringstream agg;
    agg.precision(17);
    agg << "algorithm,density,seed,mean_id,mean_ood,mean_forget,mean_collapse\n";

    for (const auto& [key, cells] : groups) {
        std::vector<RunRecord> runs;
        std::vector<RunRecord> vanilla;
        for (const CellResult* cell : cells) {
            runs.push_back(cell->record);
            RunRecord v = bench.vanilla_accuracies;
            v.finetuned_task = cell->task;
            vanilla.push_back(std::move(v));
        }
        ExperimentReport report = aggregate(key.alg, key.density, std::move(runs), std::move(vanilla));

        for (const auto& r : report.runs) {
            const RunRecord* v = nullptr;
            for (const auto& cand : report.vanilla) {
                if (cand.finetuned_task == r.finetuned_task) v = &cand;
            }
            summary << key.alg << "," << key.density << "," << key.seed << "," << r.finetuned_task
                    << "," << id_accuracy(r) << "," << ood_accuracy(r) << ","
                    << forget_ratio(r, *v) << "," << collapse_rate(r) << "\n";
        }
        agg << key.alg << "," << key.density << "," << key.seed << "," << report.mean_id << ","
            << report.mean_ood << "," << report.mean_forget << "," << report.mean_collapse << "\n";

        json jr;
        jr["algorithm"] = report.algorithm;
        jr["density"] = report.density;
        jr["seed"] = key.seed;
        jr["mean_id"] = report.mean_id;
        jr["mean_ood"] = report.mean_ood;
        jr["mean_forget"] = report.mean_forget;
        jr["mean_collapse"] = report.mean_collapse;
        json jruns = json::array();
        for (const auto& r : report.runs) {
            json one;
            one["task"] = r.finetuned_task;
            json acc = json::object();
            for (const auto& [t, a] : r.accuracy) acc[std::to_string(t)] = a;
            one["accuracies"] = acc;
            jruns.push_back(one);
        }
        jr["runs"] = jruns;
        char name[128];
        std::snprintf(name, sizeof(name), "report_%s_rho%.6f_seed%llu.json", key.alg.c_str(), key.density,
                      static_cast<unsigned long long>(key.seed));
        write_text_file(reports / name, jr.dump(2));

        rr.reports.push_back(SeededReport{key.seed, std::move(report)});
    }

    write_text_file(reports / "summary.csv", summary.str());
    write_text_file(reports / "aggregate.csv", agg.str());

    json index;
    index["spec"] = json::parse(spec_to_json(spec));
    json jcells = json::array();
    for (const auto& cell : rr.cells) {
        json c;
        c["algorithm"] = cell.algorithm;
        c["density"] = cell.density;
        c["seed"] = cell.seed;
        c["task"] = cell.task;
        c["failed"] = cell.failed;
        c["reused"] = cell.reused;
        if (cell.failed) c["error"] = cell.error;
        else c["record"] = cell.artifact.record_path;
        jcells.push_back(c);
    }
    index["cells"] = jcells;
    write_text_file(fs::path(spec.output_dir) / "index.json", index.dump(2));
}

} // namespace

bool algorithm_known(const std::string& name) {
    return criterion_from_name(name).has_value() || name == "dense" || name == "wise-ft";
}

bool algorithm_uses_density(const std::string& name) {
    return criterion_from_name(name).has_value();
}

std::string spec_to_json(const ExperimentSpec& spec) {
    json j;
    j["suite"] = suite_params_to_json(spec.suite);
    j["suite_csv"] = spec.suite_csv;
    j["model"] = json::parse(model_config_to_json(spec.model));
    j["algorithms"] = spec.algorithms;
    j["wise_ft_alpha"] = spec.wise_ft_alpha;
    j["densities"] = spec.densities;
    j["seeds"] = spec.seeds;
    j["train"] = train_config_to_json(spec.train);
    j["pretrain"] = train_config_to_json(spec.pretrain);
    j["selection"] = selection_config_to_json(spec.selection);
    j["vary_train_seed"] = spec.vary_train_seed;
    j["output"] = spec.output_dir;
    return j.dump(2);
}

ExperimentSpec spec_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        fail("config: invalid JSON: ", e.what());
    }
    ExperimentSpec spec;
    if (j.contains("suite")) spec.suite = suite_params_from_json(j["suite"]);
    spec.suite_csv = j.value("suite_csv", spec.suite_csv);
    if (j.contains("model")) spec.model = model_config_from_json(j["model"].dump());
    spec.algorithms = j.value("algorithms", spec.algorithms);
    spec.wise_ft_alpha = j.value("wise_ft_alpha", spec.wise_ft_alpha);
    spec.densities = j.value("densities", spec.densities);
    spec.seeds = j.value("seeds", spec.seeds);
    if (j.contains("train")) spec.train = train_config_from_json(j["train"]);
    if (j.contains("pretrain")) spec.pretrain = train_config_from_json(j["pretrain"]);
    if (j.contains("selection")) spec.selection = selection_config_from_json(j["selection"]);
    spec.vary_train_seed = j.value("vary_train_seed", spec.vary_train_seed);
    spec.output_dir = j.value("output", spec.output_dir);

    require(!spec.algorithms.empty(), "config: empty algorithm list");
    for (const auto& a : spec.algorithms) require(algorithm_known(a), "config: unknown algorithm '", a, "'");
    require(!spec.densities.empty(), "config: empty density list");
    for (double d : spec.densities) require(d > 0.0 && d < 1.0, "config: density ", d, " outside (0,1)");
    require(!spec.seeds.empty(), "config: empty seed list");
    return spec;
}

ExperimentSpec load_spec(const std::string& path) {
    std::ifstream in(path);
    require(in.is_open(), "config: cannot open '", path, "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return spec_from_json(ss.str());
}

void save_spec(const ExperimentSpec& spec, const std::string& path) {
    write_text_file(path, spec_to_json(spec));
}

int worker_count_from_env() {
    const char* env = std::getenv("GALLOP_WORKERS");
    if (!env) return 1;
    const int n = std::atoi(env);
    return n >= 1 ? n : 1;
}

Workbench prepare_workbench(const ExperimentSpec& spec) {
    Workbench bench;
    bench.suite = spec.suite_csv.empty() ? generate_suite(spec.suite, spec.suite.seed)
                                         : load_csv_suite(spec);

    const ModelConfig model_cfg = resolve_model_config(spec, bench.suite);
    const fs::path vanilla_dir = fs::path(spec.output_dir) / "vanilla";
    const fs::path vanilla_ckpt = vanilla_dir / "checkpoint.bin";

    Model model = build_model(model_cfg, model_cfg.init_seed);
    bool loaded = false;
    if (fs::exists(vanilla_ckpt)) {
        Checkpoint ck = load_checkpoint(vanilla_ckpt.string());
        if (ck.config == model_cfg && ck.params.same_structure(model.params)) {
            bench.vanilla_params = std::move(ck.params);
            loaded = true;
        }
    }
    if (!loaded) {
        FinetuneResult pre = finetune(model, model.params, nullptr, bench.suite.pretrain, spec.pretrain);
        bench.vanilla_params = std::move(pre.best_params);
        fs::create_directories(vanilla_dir);
        save_checkpoint(vanilla_ckpt.string(), model_cfg, bench.vanilla_params, nullptr);
    }
    bench.vanilla_accuracies = evaluate_all_tasks(model, bench.vanilla_params, bench.suite);
    return bench;
}

RoundRobinResult run_round_robin(const ExperimentSpec& spec) {
    Workbench bench = prepare_workbench(spec);

    const int n_tasks = static_cast<int>(bench.suite.tasks.size());
    require(n_tasks >= 2, "round-robin: need at least 2 tasks");

    std::vector<CellPlan> first_phase;
    std::vector<CellPlan> wise_phase;
    bool wants_wise = false;
    std::set<std::string> algs(spec.algorithms.begin(), spec.algorithms.end());
    if (algs.contains("wise-ft")) {
        wants_wise = true;
        algs.insert("dense"); // wise-ft edits the dense checkpoint
    }

    for (const auto& alg : algs) {
        if (alg == "wise-ft") continue;
        const bool with_density = algorithm_uses_density(alg);
        const std::vector<double> densities = with_density ? spec.densities : std::vector<double>{0.0};
        for (double density : densities) {
            for (std::uint64_t seed : spec.seeds) {
                for (int task = 0; task < n_tasks; ++task) {
                    first_phase.push_back(CellPlan{alg, density, seed, task, false});
                }
            }
        }
    }
    if (wants_wise) {
        for (std::uint64_t seed : spec.seeds) {
            for (int task = 0; task < n_tasks; ++task) {
                wise_phase.push_back(CellPlan{"wise-ft", 0.0, seed, task, true});
            }
        }
    }

    RoundRobinResult rr;
    run_cells(spec, bench, first_phase, rr.cells);
    run_cells(spec, bench, wise_phase, rr.cells); // after the dense barrier

    for (const auto& cell : rr.cells) {
        if (cell.failed) ++rr.failed_cells;
    }
    write_reports(spec, bench, rr);
    return rr;
}

MotivationResult run_motivation_ablation(const ExperimentSpec& spec) {
    std::set<std::string> algs(spec.algorithms.begin(), spec.algorithms.end());
    require(algs.contains("magnitude-smallest") && algs.contains("magnitude-largest"),
            "motivation ablation: spec must list both magnitude-smallest and magnitude-largest");

    ExperimentSpec sub = spec;
    sub.algorithms = {"magnitude-smallest", "magnitude-largest"};
    MotivationResult result;
    result.detail = run_round_robin(sub);

    Workbench bench = prepare_workbench(sub); // vanilla cached, so this is a read
    double vanilla_id = 0.0;
    for (const auto& task : bench.suite.tasks) {
        vanilla_id += bench.vanilla_accuracies.accuracy.at(task.id);
    }
    result.vanilla_mean_id = vanilla_id / static_cast<double>(bench.suite.tasks.size());

    for (double density : spec.densities) {
        for (const std::string& crit : sub.algorithms) {
            double id = 0.0, ood = 0.0;
            int n = 0;
            for (const auto& seeded : result.detail.reports) {
                if (seeded.report.algorithm != crit || seeded.report.density != density) continue;
                id += seeded.report.mean_id;
                ood += seeded.report.mean_ood;
                ++n;
            }
            if (n == 0) continue;
            result.rows.push_back(MotivationRow{density, crit, id / n, ood / n});
        }
    }

    std::ostringstream os;
    os.precision(17);
    os << "density,criterion,mean_id,mean_ood\n";
    os << 0.0 << ",vanilla," << result.vanilla_mean_id << "," << result.vanilla_mean_id << "\n";
    for (const auto& row : result.rows) {
        os << row.density << "," << row.criterion << "," << row.mean_id << "," << row.mean_ood << "\n";
    }
    fs::create_directories(fs::path(spec.output_dir) / "reports");
    write_text_file(fs::path(spec.output_dir) / "reports" / "motivation.csv", os.str());
    return result;
}

double sorted_quantile(const std::vector<double>& sorted, double p) {
    require(!sorted.empty(), "quantile: empty data");
    if (sorted.size() == 1) return sorted.front();
    const double pos = std::clamp(p, 0.0, 1.0) * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(lo);
    if (lo + 1 >= sorted.size()) return sorted.back();
    return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}

StabilityResult run_stability_study(const ExperimentSpec& spec, int n_seeds) {
    require(n_seeds >= 2, "stability study: need at least 2 seeds");
    StabilityResult result;
    result.density = *std::max_element(spec.densities.begin(), spec.densities.end());

    ExperimentSpec sub = spec;
    sub.densities = {result.density};
    sub.seeds.clear();
    const std::uint64_t base = spec.seeds.empty() ? 0 : spec.seeds.front();
    for (int i = 0; i < n_seeds; ++i) sub.seeds.push_back(derive_seed(base, 2000 + static_cast<std::uint64_t>(i)));

    RoundRobinResult rr = run_round_robin(sub);
    result.failed_cells = rr.failed_cells;

    for (const auto& alg : sub.algorithms) {
        const double want_density = algorithm_uses_density(alg) ? result.density : 0.0;
        std::vector<double> ids, oods;
        for (std::uint64_t seed : sub.seeds) {
            for (const auto& seeded : rr.reports) {
                if (seeded.seed != seed || seeded.report.algorithm != alg ||
                    seeded.report.density != want_density) continue;
                StabilityRow row;
                row.algorithm = alg;
                row.seed = seed;
                row.mean_id = seeded.report.mean_id;
                row.mean_ood = seeded.report.mean_ood;
                row.mean_forget = seeded.report.mean_forget;
                row.mean_collapse = seeded.report.mean_collapse;
                ids.push_back(row.mean_id);
                oods.push_back(row.mean_ood);
                result.rows.push_back(std::move(row));
            }
        }
        if (ids.empty()) continue;
        std::sort(ids.begin(), ids.end());
        std::sort(oods.begin(), oods.end());
        StabilitySummary summary;
        summary.algorithm = alg;
        summary.median_id = sorted_quantile(ids, 0.5);
        summary.iqr_id = sorted_quantile(ids, 0.75) - sorted_quantile(ids, 0.25);
        summary.median_ood = sorted_quantile(oods, 0.5);
        summary.iqr_ood = sorted_quantile(oods, 0.75) - sorted_quantile(oods, 0.25);
        result.summary.push_back(std::move(summary));
    }

    std::ostringstream rows;
    rows.precision(17);
    rows << "algorithm,seed,mean_id,mean_ood,mean_forget,mean_collapse\n";
    for (const auto& row : result.rows) {
        rows << row.algorithm << "," << row.seed << "," << row.mean_id << "," << row.mean_ood << ","
             << row.mean_forget << "," << row.mean_collapse << "\n";
    }
    std::ostringstream sum;
    sum.precision(17);
    sum << "algorithm,median_id,iqr_id,median_ood,iqr_ood\n";
    for (const auto& s : result.summary) {
        sum << s.algorithm << "," << s.median_id << "," << s.iqr_id << "," << s.median_ood << ","
            << s.iqr_ood << "\n";
    }
    fs::create_directories(fs::path(spec.output_dir) / "reports");
    write_text_file(fs::path(spec.output_dir) / "reports" / "stability.csv", rows.str());
    write_text_file(fs::path(spec.output_dir) / "reports" / "stability_summary.csv", sum.str());
    return result;
}

DensityCheckResult verify_effective_density(const ExperimentSpec& spec,
                                            const std::vector<double>& sample_grid,
                                            const std::vector<double>& density_grid,
                                            double tolerance) {
    DensityCheckResult result;
    TaskSuite suite = spec.suite_csv.empty() ? generate_suite(spec.suite, spec.suite.seed)
                                             : load_csv_suite(spec);
    const ModelConfig model_cfg = resolve_model_config(spec, suite);
    Model model = build_model(model_cfg, model_cfg.init_seed);
    const Task& task = suite.tasks.front();
    const std::size_t total = model.params.total_count();

    const auto subset = take_fraction(task, spec.selection.data_fraction);
    GradientAccumulator acc = accumulate_gradients(model, model.params, task, subset,
                                                   spec.selection.gradient_mode);
    ScoreField scores = compute_scores(acc, model.params, spec.selection.epsilon);

    std::size_t cell = 0;
    for (double s : sample_grid) {
        for (double density : density_grid) {
            DensityCheckRow row;
            row.score_sample = s;
            row.density = density;
            try {
                ScoreSample sample = sample_scores(scores, s, derive_seed(spec.selection.seed, cell));
                const double threshold = compute_threshold(sample, density, total,
                                                           spec.selection.strict_sample_rank);
                std::optional<std::size_t> exact_k;
                if (s == 1.0 && !spec.selection.strict_sample_rank) {
                    exact_k = static_cast<std::size_t>(std::floor(density * static_cast<double>(total)));
                }
                SparsityMask mask = build_mask(scores, threshold, exact_k);
                row.effective = effective_density(mask, total);
                const double target = std::floor(density * static_cast<double>(total))
                                      / static_cast<double>(total);
                row.rel_error = target > 0.0 ? std::fabs(row.effective - target) / target
                                             : std::fabs(row.effective);
                row.ok = row.rel_error <= tolerance;
            } catch (const std::exception& e) {
                row.error = e.what();
                row.ok = false;
            }
            if (!row.ok) result.all_ok = false;
            result.rows.push_back(std::move(row));
            ++cell;
        }
    }

    std::ostringstream os;
    os.precision(17);
    os << "score_sample,density,effective_density,rel_error,ok,error\n";
    for (const auto& row : result.rows) {
        os << row.score_sample << "," << row.density << "," << row.effective << "," << row.rel_error
           << "," << (row.ok ? 1 : 0) << "," << row.error << "\n";
    }
    fs::create_directories(fs::path(spec.output_dir) / "reports");
    write_text_file(fs::path(spec.output_dir) / "reports" / "density_check.csv", os.str());
    return result;
}

} // namespace gallop
