#include "gallop/tasks.hpp"

#include "gallop/error.hpp"
#include "gallop/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace gallop {

namespace {

std::vector<double> random_unit_vector(RandomSource& rng, int dim) {
    std::vector<double> v(static_cast<std::size_t>(dim));
    double norm2 = 0.0;
    do {
        norm2 = 0.0;
        for (auto& x : v) {
            x = rng.normal();
            norm2 += x * x;
        }
    } while (norm2 < 1e-12);
    const double inv = 1.0 / std::sqrt(norm2);
    for (auto& x : v) x *= inv;
    return v;
}

Example make_example(const TaskSuite& suite, const std::vector<double>& shift,
                     int cls, int format, int task_id, RandomSource& rng) {
    const auto& p = suite.params;
    std::vector<double> feat(static_cast<std::size_t>(suite.input_dim()), 0.0);
    for (int d = 0; d < p.feature_dim; ++d) {
        feat[static_cast<std::size_t>(d)] = suite.class_prototypes[static_cast<std::size_t>(cls)][static_cast<std::size_t>(d)]
                                          + shift[static_cast<std::size_t>(d)]
                                          + p.noise_sigma * rng.normal();
    }
    feat[static_cast<std::size_t>(p.feature_dim + format)] = 1.0; // format cue
    feat.back() = 1.0;                                            // constant channel
    Example ex;
    ex.features = Tensor::row_vector(std::move(feat));
    ex.label = cls;
    ex.task_id = task_id;
    ex.answer = format * p.n_classes + cls;
    return ex;
}

std::vector<Example> draw_split(const TaskSuite& suite, const Task& task, int count, std::uint64_t seed) {
    RandomSource rng(seed);
    std::vector<Example> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        const int cls = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(suite.params.n_classes)));
        out.push_back(make_example(suite, task.shift, cls, task.format_id, task.id, rng));
    }
    return out;
}

} // namespace

TaskSuite generate_suite(const SuiteParams& params, std::uint64_t seed) {
    require(params.n_tasks >= 2, "suite: need at least 2 tasks, got ", params.n_tasks);
    require(params.feature_dim > 0, "suite: feature_dim must be positive");
    require(params.n_classes >= 2, "suite: need at least 2 classes");
    require(params.train_size > 0 && params.test_size > 0, "suite: split sizes must be positive");
    require(params.noise_sigma > 0.0, "suite: noise_sigma must be positive");
    const int group_total = std::accumulate(params.format_groups.begin(), params.format_groups.end(), 0);
    require(group_total == params.n_tasks, "suite: format_groups sum to ", group_total,
            " but n_tasks is ", params.n_tasks);
    for (int g : params.format_groups) require(g > 0, "suite: format group sizes must be positive");
    if (!params.pretrain_format_weights.empty()) {
        require(params.pretrain_format_weights.size() == params.format_groups.size(),
                "suite: pretrain_format_weights needs one entry per format group");
        for (double w : params.pretrain_format_weights) {
            require(w > 0.0, "suite: pretrain format weights must be positive");
        }
    }

    TaskSuite suite;
    suite.params = params;
    suite.n_formats = static_cast<int>(params.format_groups.size());

    RandomSource proto_rng(derive_seed(seed, 1));
    for (int c = 0; c < params.n_classes; ++c) {
        auto dir = random_unit_vector(proto_rng, params.feature_dim);
        for (auto& x : dir) x *= params.class_separation;
        suite.class_prototypes.push_back(std::move(dir));
    }

    // format of task i: walk the group sizes
    std::vector<int> task_format;
    for (int g = 0; g < suite.n_formats; ++g) {
        for (int i = 0; i < params.format_groups[static_cast<std::size_t>(g)]; ++i) task_format.push_back(g);
    }

    for (int t = 0; t < params.n_tasks; ++t) {
        Task task;
        task.id = t;
        task.format_id = task_format[static_cast<std::size_t>(t)];
        task.n_classes = params.n_classes;
        task.noise_sigma = params.noise_sigma;
        task.seed = derive_seed(seed, 100 + static_cast<std::uint64_t>(t));
        RandomSource shift_rng(derive_seed(task.seed, 2));
        task.shift = random_unit_vector(shift_rng, params.feature_dim);
        for (auto& x : task.shift) x *= params.shift_magnitude;
        task.train = draw_split(suite, task, params.train_size, derive_seed(task.seed, 3));
        task.test = draw_split(suite, task, params.test_size, derive_seed(task.seed, 4));
        suite.tasks.push_back(std::move(task));
    }

    // pretraining mix: zero shift, uniformly random formats, labels stored as
    // answer tokens (format_id = -1 marks the identity label->answer mapping)
    Task& pre = suite.pretrain;
    pre.id = -1;
    pre.format_id = -1;
    pre.n_classes = suite.answer_vocab();
    pre.noise_sigma = params.noise_sigma;
    pre.seed = derive_seed(seed, 7);
    pre.shift.assign(static_cast<std::size_t>(params.feature_dim), 0.0);
    RandomSource pre_rng(derive_seed(pre.seed, 3));
    RandomSource pre_test_rng(derive_seed(pre.seed, 4));
    std::vector<double> format_cdf(static_cast<std::size_t>(suite.n_formats), 0.0);
    {
        double total = 0.0;
        for (int f = 0; f < suite.n_formats; ++f) {
            total += params.pretrain_format_weights.empty()
                ? 1.0
                : params.pretrain_format_weights[static_cast<std::size_t>(f)];
            format_cdf[static_cast<std::size_t>(f)] = total;
        }
        for (auto& c : format_cdf) c /= total;
    }
    auto draw_format = [&](RandomSource& rng) {
        const double u = rng.uniform01();
        for (int f = 0; f < suite.n_formats; ++f) {
            if (u < format_cdf[static_cast<std::size_t>(f)]) return f;
        }
        return suite.n_formats - 1;
    };
    auto draw_mix = [&](RandomSource& rng, int count) {
        std::vector<Example> out;
        out.reserve(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) {
            const int cls = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(params.n_classes)));
            const int fmt = draw_format(rng);
            Example ex = make_example(suite, pre.shift, cls, fmt, pre.id, rng);
            ex.label = ex.answer; // identity mapping for the mixed task
            out.push_back(std::move(ex));
        }
        return out;
    };
    pre.train = draw_mix(pre_rng, params.pretrain_size);
    pre.test = draw_mix(pre_test_rng, params.pretrain_test_size);

    return suite;
}

Task load_csv_dataset(const std::string& path, double train_fraction) {
    require(train_fraction > 0.0 && train_fraction <= 1.0, "csv: train_fraction out of (0,1]");
    std::ifstream in(path);
    require(in.is_open(), "csv: cannot open '", path, "'");

    std::string line;
    require(static_cast<bool>(std::getline(in, line)), "csv: '", path, "' is empty");
    std::vector<std::string> columns;
    {
        std::stringstream ss(line);
        std::string col;
        while (std::getline(ss, col, ',')) columns.push_back(col);
    }
    int label_col = -1;
    for (std::size_t i = 0; i < columns.size(); ++i) {
        if (columns[i] == "label") label_col = static_cast<int>(i);
    }
    require(label_col >= 0, "csv: '", path, "' header has no 'label' column");
    require(columns.size() >= 2, "csv: '", path, "' needs at least one feature column");

    Task task;
    task.format_id = -1;
    int line_no = 1;
    std::vector<Example> all;
    int max_label = -1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> feats;
        int label = -1;
        int col = 0;
        while (std::getline(ss, cell, ',')) {
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(cell, &used);
            } catch (const std::exception&) {
                fail("csv: '", path, "' line ", line_no, ": cannot parse '", cell, "'");
            }
            require(used == cell.size(), "csv: '", path, "' line ", line_no, ": trailing junk in '", cell, "'");
            if (col == label_col) {
                label = static_cast<int>(v);
                require(label >= 0 && static_cast<double>(label) == v,
                        "csv: '", path, "' line ", line_no, ": label must be a nonnegative integer");
            } else {
                feats.push_back(v);
            }
            ++col;
        }
        require(col == static_cast<int>(columns.size()),
                "csv: '", path, "' line ", line_no, ": expected ", columns.size(), " cells, got ", col);
        Example ex;
        ex.features = Tensor::row_vector(std::move(feats));
        ex.label = label;
        ex.answer = label;
        all.push_back(std::move(ex));
        max_label = std::max(max_label, label);
    }
    require(!all.empty(), "csv: '", path, "' has no data rows");
    task.n_classes = max_label + 1;
    const auto n_train = static_cast<std::size_t>(
        std::ceil(train_fraction * static_cast<double>(all.size())));
    for (std::size_t i = 0; i < all.size(); ++i) {
        (i < n_train ? task.train : task.test).push_back(std::move(all[i]));
    }
    return task;
}

void export_csv(const Task& task, const std::string& path) {
    std::ofstream out(path);
    require(out.is_open(), "csv: cannot write '", path, "'");
    require(!task.train.empty() || !task.test.empty(), "csv: nothing to export");
    const std::size_t dim = (!task.train.empty() ? task.train.front() : task.test.front()).features.size();
    for (std::size_t d = 0; d < dim; ++d) out << "f" << d << ",";
    out << "label\n";
    out.precision(17);
    auto write_rows = [&](const std::vector<Example>& rows) {
        for (const auto& ex : rows) {
            for (double v : ex.features.data) out << v << ",";
            out << ex.label << "\n";
        }
    };
    write_rows(task.train);
    write_rows(task.test);
    require(static_cast<bool>(out), "csv: write to '", path, "' failed");
}

std::vector<Example> take_fraction(const Task& task, double fraction) {
    require(fraction > 0.0 && fraction <= 1.0, "take_fraction: fraction ", fraction, " outside (0,1]");
    const auto n = static_cast<std::size_t>(
        std::ceil(fraction * static_cast<double>(task.train.size())));
    return {task.train.begin(), task.train.begin() + static_cast<std::ptrdiff_t>(n)};
}

std::vector<Example> take_fraction_shuffled(const Task& task, double fraction, std::uint64_t shuffle_seed) {
    require(fraction > 0.0 && fraction <= 1.0, "take_fraction: fraction ", fraction, " outside (0,1]");
    std::vector<std::size_t> order(task.train.size());
    std::iota(order.begin(), order.end(), 0);
    RandomSource rng(shuffle_seed);
    rng.shuffle(order);
    const auto n = static_cast<std::size_t>(
        std::ceil(fraction * static_cast<double>(task.train.size())));
    std::vector<Example> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(task.train[order[i]]);
    return out;
}

} // namespace gallop
