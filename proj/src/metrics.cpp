#include "gallop/metrics.hpp"

#include "gallop/error.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <utility>

namespace gallop {

double id_accuracy(const RunRecord& rec) {
    auto it = rec.accuracy.find(rec.finetuned_task);
    require(it != rec.accuracy.end(), "id_accuracy: task ", rec.finetuned_task, " missing from record");
    return it->second;
}

double ood_accuracy(const RunRecord& rec) {
    require(rec.accuracy.size() >= 2, "ood_accuracy: need at least 2 tasks, got ", rec.accuracy.size());
    require(rec.accuracy.contains(rec.finetuned_task),
            "ood_accuracy: task ", rec.finetuned_task, " missing from record");
    double sum = 0.0;
    for (const auto& [task, acc] : rec.accuracy) {
        if (task != rec.finetuned_task) sum += acc;
    }
    return sum / static_cast<double>(rec.accuracy.size() - 1);
}

double forget_ratio(const RunRecord& rec, const RunRecord& vanilla, bool* degenerate) {
    require(rec.finetuned_task == vanilla.finetuned_task,
            "forget_ratio: run and vanilla records disagree on the fine-tuned task");
    if (degenerate) *degenerate = false;
    const double base = ood_accuracy(vanilla);
    if (base == 0.0) {
        // no pre-trained OOD skill to lose; matches the definition's limit
        if (degenerate) *degenerate = true;
        return 0.0;
    }
    const double tuned = ood_accuracy(rec);
    return std::max(0.0, (base - tuned) / base);
}

int collapse_rate(const RunRecord& rec) {
    require(rec.accuracy.size() >= 2, "collapse_rate: need at least 2 tasks");
    int n = 0;
    for (const auto& [task, acc] : rec.accuracy) {
        if (task == rec.finetuned_task) continue;
        if (std::floor(acc) == 0.0) ++n;
    }
    return n;
}

ExperimentReport aggregate(std::string algorithm, double density,
                           std::vector<RunRecord> runs, std::vector<RunRecord> vanilla) {
    require(!runs.empty(), "aggregate: no runs");
    require(runs.size() == vanilla.size(), "aggregate: ", runs.size(), " runs vs ",
            vanilla.size(), " vanilla records");
    std::set<int> seen;
    for (const auto& r : runs) {
        require(seen.insert(r.finetuned_task).second, "aggregate: duplicate run for task ", r.finetuned_task);
    }

    // pair vanilla records by fine-tuned task
    auto find_vanilla = [&](int task) -> const RunRecord& {
        for (const auto& v : vanilla) {
            if (v.finetuned_task == task) return v;
        }
        fail("aggregate: no vanilla record for task ", task);
    };

    ExperimentReport report;
    report.algorithm = std::move(algorithm);
    report.density = density;
    double id = 0.0, ood = 0.0, forget = 0.0, collapse = 0.0;
    for (const auto& r : runs) {
        const RunRecord& v = find_vanilla(r.finetuned_task);
        id += id_accuracy(r);
        ood += ood_accuracy(r);
        forget += forget_ratio(r, v);
        collapse += static_cast<double>(collapse_rate(r));
    }
    const double inv = 1.0 / static_cast<double>(runs.size());
    report.mean_id = id * inv;
    report.mean_ood = ood * inv;
    report.mean_forget = forget * inv;
    report.mean_collapse = collapse * inv;
    report.runs = std::move(runs);
    report.vanilla = std::move(vanilla);
    return report;
}

std::string report_csv_header() {
    return "algorithm,density,finetuned_task,id_accuracy,ood_accuracy,forget_ratio,collapse_rate\n";
}

std::string report_csv_rows(const ExperimentReport& report) {
    std::ostringstream os;
    os.precision(17);
    for (const auto& r : report.runs) {
        const RunRecord* v = nullptr;
        for (const auto& cand : report.vanilla) {
            if (cand.finetuned_task == r.finetuned_task) v = &cand;
        }
        os << report.algorithm << "," << report.density << "," << r.finetuned_task << ","
           << id_accuracy(r) << "," << ood_accuracy(r) << ","
           << (v ? forget_ratio(r, *v) : 0.0) << "," << collapse_rate(r) << "\n";
    }
    return os.str();
}

} // namespace gallop
