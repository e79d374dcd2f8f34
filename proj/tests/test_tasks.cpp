#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gallop/error.hpp"
#include "gallop/tasks.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>

using namespace gallop;

namespace {

SuiteParams tiny_suite() {
    SuiteParams p;
    p.n_tasks = 4;
    p.feature_dim = 6;
    p.n_classes = 2;
    p.train_size = 32;
    p.test_size = 16;
    p.format_groups = {2, 1, 1};
    p.pretrain_size = 64;
    p.pretrain_test_size = 32;
    return p;
}

std::uint64_t fnv1a(const Example& ex) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](const void* p, std::size_t n) {
        const auto* bytes = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    };
    mix(ex.features.data.data(), ex.features.data.size() * sizeof(double));
    mix(&ex.label, sizeof(ex.label));
    return h;
}

double normal_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))); }

// Expected accuracy of the nearest-prototype rule fitted on task A's
// distribution and evaluated on task B's, for the 2-class generator.
double analytic_cross_accuracy(const TaskSuite& suite, const Task& fit, const Task& eval) {
    const auto& p0 = suite.class_prototypes[0];
    const auto& p1 = suite.class_prototypes[1];
    double m2 = 0.0, proj = 0.0;
    for (std::size_t d = 0; d < p0.size(); ++d) {
        const double w = p0[d] - p1[d];
        m2 += w * w;
        proj += w * (eval.shift[d] - fit.shift[d]);
    }
    const double m = std::sqrt(m2);
    const double t = proj / m;
    const double sigma = suite.params.noise_sigma;
    return 0.5 * (normal_cdf((m / 2 + t) / sigma) + normal_cdf((m / 2 - t) / sigma));
}

struct TempFile {
    std::string path;
    explicit TempFile(const char* name)
        : path((std::filesystem::temp_directory_path() / name).string()) {}
    ~TempFile() { std::remove(path.c_str()); }
};

} // namespace

TEST_CASE("generate_suite: deterministic given seed") {
    const TaskSuite a = generate_suite(tiny_suite(), 0);
    const TaskSuite b = generate_suite(tiny_suite(), 0);
    REQUIRE(a.tasks.size() == b.tasks.size());
    for (std::size_t t = 0; t < a.tasks.size(); ++t) {
        REQUIRE(a.tasks[t].train.size() == b.tasks[t].train.size());
        for (std::size_t i = 0; i < a.tasks[t].train.size(); ++i) {
            CHECK(bitwise_equal(a.tasks[t].train[i].features, b.tasks[t].train[i].features));
            CHECK(a.tasks[t].train[i].label == b.tasks[t].train[i].label);
        }
    }
    const TaskSuite c = generate_suite(tiny_suite(), 1);
    CHECK_FALSE(bitwise_equal(a.tasks[0].train[0].features, c.tasks[0].train[0].features));
}

TEST_CASE("generate_suite: format groups land as specified") {
    SuiteParams p = tiny_suite();
    p.n_tasks = 8;
    p.format_groups = {4, 1, 1, 1, 1};
    const TaskSuite suite = generate_suite(p, 0);
    REQUIRE(suite.n_formats == 5);
    std::map<int, int> group_sizes;
    for (const auto& t : suite.tasks) group_sizes[t.format_id]++;
    CHECK(group_sizes[0] == 4);
    CHECK(group_sizes[1] == 1);
    CHECK(group_sizes[2] == 1);
    CHECK(group_sizes[3] == 1);
    CHECK(group_sizes[4] == 1);
    // tasks sharing a format share answer tokens
    CHECK(suite.tasks[0].answer_token(1) == suite.tasks[1].answer_token(1));
    CHECK(suite.tasks[0].answer_token(1) != suite.tasks[4].answer_token(1));
}

TEST_CASE("generate_suite: invalid specs are rejected") {
    SuiteParams p = tiny_suite();
    p.n_tasks = 1;
    p.format_groups = {1};
    CHECK_THROWS_AS((void)generate_suite(p, 0), Error);
    p = tiny_suite();
    p.format_groups = {1, 1}; // does not sum to n_tasks
    CHECK_THROWS_AS((void)generate_suite(p, 0), Error);
    p = tiny_suite();
    p.train_size = 0;
    CHECK_THROWS_AS((void)generate_suite(p, 0), Error);
}

TEST_CASE("generate_suite: train/test splits are disjoint (hash check)") {
    const TaskSuite suite = generate_suite(tiny_suite(), 3);
    for (const auto& task : suite.tasks) {
        std::set<std::uint64_t> train_hashes;
        for (const auto& ex : task.train) train_hashes.insert(fnv1a(ex));
        CHECK(train_hashes.size() == task.train.size());
        for (const auto& ex : task.test) {
            CHECK_FALSE(train_hashes.contains(fnv1a(ex)));
        }
    }
}

TEST_CASE("zero shift makes every task's distribution identical (analytic)") {
    SuiteParams p = tiny_suite();
    p.shift_magnitude = 0.0;
    const TaskSuite suite = generate_suite(p, 5);
    const double base = analytic_cross_accuracy(suite, suite.tasks[0], suite.tasks[0]);
    for (const auto& fit : suite.tasks) {
        for (const auto& eval : suite.tasks) {
            CHECK(analytic_cross_accuracy(suite, fit, eval) == doctest::Approx(base).epsilon(1e-12));
        }
    }
}

TEST_CASE("cross-task analytic accuracy decreases monotonically with shift magnitude") {
    std::vector<double> magnitudes = {0.0, 0.5, 1.0, 2.0, 4.0};
    std::vector<double> means;
    for (double mag : magnitudes) {
        SuiteParams p = tiny_suite();
        p.shift_magnitude = mag;
        const TaskSuite suite = generate_suite(p, 7);
        double sum = 0.0;
        int count = 0;
        for (const auto& fit : suite.tasks) {
            for (const auto& eval : suite.tasks) {
                if (fit.id == eval.id) continue;
                sum += analytic_cross_accuracy(suite, fit, eval);
                ++count;
            }
        }
        means.push_back(sum / count);
    }
    for (std::size_t i = 1; i < means.size(); ++i) {
        CHECK(means[i] <= means[i - 1] + 1e-12);
    }
    CHECK(means.back() < means.front());
}

TEST_CASE("pretraining mix has zero shift and balanced content") {
    const TaskSuite suite = generate_suite(tiny_suite(), 9);
    for (double s : suite.pretrain.shift) CHECK(s == 0.0);
    CHECK(suite.pretrain.train.size() == 64);
    // labels are answer tokens covering several formats
    std::set<int> answers;
    for (const auto& ex : suite.pretrain.train) {
        CHECK(ex.label == ex.answer);
        answers.insert(ex.answer);
    }
    CHECK(answers.size() > static_cast<std::size_t>(suite.params.n_classes));
}

TEST_CASE("take_fraction: ceiling prefix semantics") {
    const TaskSuite suite = generate_suite(tiny_suite(), 11);
    Task task = suite.tasks[0];

    task.train.resize(10);
    CHECK(take_fraction(task, 1.0).size() == 10);

    task.train.resize(4);
    auto half = take_fraction(task, 0.5);
    CHECK(half.size() == 2);
    CHECK(bitwise_equal(half[0].features, task.train[0].features));
    CHECK(bitwise_equal(half[1].features, task.train[1].features));

    task.train.resize(5);
    CHECK(take_fraction(task, 0.5).size() == 3);

    CHECK_THROWS_AS((void)take_fraction(task, 0.0), Error);
    CHECK_THROWS_AS((void)take_fraction(task, 1.5), Error);
}

TEST_CASE("take_fraction_shuffled: same size, permuted, deterministic") {
    const TaskSuite suite = generate_suite(tiny_suite(), 13);
    const Task& task = suite.tasks[0];
    const auto a = take_fraction_shuffled(task, 0.5, 4);
    const auto b = take_fraction_shuffled(task, 0.5, 4);
    REQUIRE(a.size() == b.size());
    CHECK(a.size() == take_fraction(task, 0.5).size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(bitwise_equal(a[i].features, b[i].features));

    const auto c = take_fraction_shuffled(task, 0.5, 5);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!bitwise_equal(a[i].features, c[i].features)) any_diff = true;
    }
    CHECK(any_diff);
}

TEST_CASE("csv: small file parses into a task") {
    TempFile tmp("gallop_tasks_small.csv");
    {
        std::ofstream out(tmp.path);
        out << "f0,f1,label\n0.5,1.5,0\n-1.0,2.0,1\n3.0,-0.25,0\n";
    }
    const Task task = load_csv_dataset(tmp.path, 1.0);
    CHECK(task.train.size() == 3);
    CHECK(task.test.empty());
    CHECK(task.n_classes == 2);
    CHECK(task.train[1].features.data[0] == -1.0);
    CHECK(task.train[1].label == 1);
}

TEST_CASE("csv: missing label column names it") {
    TempFile tmp("gallop_tasks_nolabel.csv");
    {
        std::ofstream out(tmp.path);
        out << "f0,f1,target\n1,2,0\n";
    }
    CHECK_THROWS_WITH_AS((void)load_csv_dataset(tmp.path), doctest::Contains("label"), Error);
}

TEST_CASE("csv: malformed row reports the line number") {
    TempFile tmp("gallop_tasks_badrow.csv");
    {
        std::ofstream out(tmp.path);
        out << "f0,f1,label\n1,2,0\nbogus,2,1\n";
    }
    CHECK_THROWS_WITH_AS((void)load_csv_dataset(tmp.path), doctest::Contains("line 3"), Error);
}

TEST_CASE("csv: export then load round-trips exactly") {
    const TaskSuite suite = generate_suite(tiny_suite(), 17);
    const Task& orig = suite.tasks[2];
    TempFile tmp("gallop_tasks_roundtrip.csv");
    export_csv(orig, tmp.path);

    const double fraction = static_cast<double>(orig.train.size()) /
                            static_cast<double>(orig.train.size() + orig.test.size());
    const Task loaded = load_csv_dataset(tmp.path, fraction);
    REQUIRE(loaded.train.size() == orig.train.size());
    REQUIRE(loaded.test.size() == orig.test.size());
    for (std::size_t i = 0; i < orig.train.size(); ++i) {
        CHECK(bitwise_equal(loaded.train[i].features, orig.train[i].features));
        CHECK(loaded.train[i].label == orig.train[i].label);
    }
    for (std::size_t i = 0; i < orig.test.size(); ++i) {
        CHECK(bitwise_equal(loaded.test[i].features, orig.test[i].features));
        CHECK(loaded.test[i].label == orig.test[i].label);
    }
}
