#include "gallop/selection.hpp"

#include "gallop/error.hpp"
#include "gallop/rng.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace gallop {

GradientAccumulator GradientAccumulator::for_params(const ParameterSet& params, GradientMode mode) {
    GradientAccumulator acc;
    acc.mode = mode;
    acc.sums = zero_gradients(params);
    return acc;
}

void GradientAccumulator::add(const LayerGradients& grads) {
    require(grads.size() == sums.size(), "gradient accumulator: layer count mismatch");
    for (std::size_t l = 0; l < grads.size(); ++l) {
        require(grads[l].same_shape(sums[l]), "gradient accumulator: shape mismatch at layer ", l);
        for (std::size_t i = 0; i < grads[l].size(); ++i) {
            const double g = grads[l].data[i];
            sums[l].data[i] += (mode == GradientMode::mean_of_abs) ? std::fabs(g) : g;
        }
    }
    ++count;
}

Tensor GradientAccumulator::mean_layer(std::size_t l) const {
    require(count > 0, "gradient accumulator: no examples accumulated");
    Tensor out = sums[l];
    const double inv = 1.0 / static_cast<double>(count);
    for (auto& v : out.data) v *= inv;
    return out;
}

GradientAccumulator accumulate_gradients(Model& model, const ParameterSet& params,
                                         const Task& task, std::span<const Example> subset,
                                         GradientMode mode) {
    require(!subset.empty(), "accumulate_gradients: empty subset");
    GradientAccumulator acc = GradientAccumulator::for_params(params, mode);
    for (std::size_t n = 0; n < subset.size(); ++n) {
        LayerGradients grads = example_gradients(model, params, subset[n], task);
        for (std::size_t l = 0; l < grads.size(); ++l) {
            for (double g : grads[l].data) {
                require(std::isfinite(g), "accumulate_gradients: non-finite gradient at example ", n,
                        ", layer '", params.layer(l).name, "'");
            }
        }
        acc.add(grads);
    }
    return acc;
}

std::size_t ScoreField::total_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.size();
    return n;
}

ScoreField compute_scores(const GradientAccumulator& acc, const ParameterSet& params, double epsilon) {
    require(epsilon > 0.0, "compute_scores: epsilon must be positive");
    require(acc.sums.size() == params.layer_count(), "compute_scores: accumulator/parameter layer mismatch");
    ScoreField field;
    field.epsilon = epsilon;
    for (std::size_t l = 0; l < params.layer_count(); ++l) {
        const Tensor& theta = params.layer(l).values;
        require(acc.sums[l].same_shape(theta), "compute_scores: shape mismatch at layer '",
                params.layer(l).name, "'");
        Tensor g = acc.mean_layer(l);
        for (std::size_t i = 0; i < g.size(); ++i) {
            g.data[i] = std::fabs(g.data[i]) / (std::fabs(theta.data[i]) + epsilon);
        }
        field.layers.push_back(std::move(g));
        field.layer_names.push_back(params.layer(l).name);
        field.layer_excluded.push_back(0);
    }
    return field;
}

const char* criterion_name(Criterion c) {
    switch (c) {
        case Criterion::gallop: return "gallop";
        case Criterion::gradient_only: return "gradient-only";
        case Criterion::magnitude_smallest: return "magnitude-smallest";
        case Criterion::magnitude_largest: return "magnitude-largest";
        case Criterion::random_uniform: return "random";
    }
    return "?";
}

std::optional<Criterion> criterion_from_name(std::string_view name) {
    for (Criterion c : {Criterion::gallop, Criterion::gradient_only, Criterion::magnitude_smallest,
                        Criterion::magnitude_largest, Criterion::random_uniform}) {
        if (name == criterion_name(c)) return c;
    }
    return std::nullopt;
}

ScoreField baseline_scores(Criterion criterion, const GradientAccumulator* acc,
                           const ParameterSet& params, double epsilon, std::uint64_t rng_seed) {
    if (criterion == Criterion::gallop) {
        require(acc != nullptr, "baseline_scores: gallop criterion needs a gradient accumulator");
        return compute_scores(*acc, params, epsilon);
    }
    ScoreField field;
    field.epsilon = epsilon;
    for (std::size_t l = 0; l < params.layer_count(); ++l) {
        const Tensor& theta = params.layer(l).values;
        Tensor s(theta.rows, theta.cols);
        switch (criterion) {
            case Criterion::gradient_only: {
                require(acc != nullptr, "baseline_scores: gradient-only criterion needs a gradient accumulator");
                Tensor g = acc->mean_layer(l);
                for (std::size_t i = 0; i < s.size(); ++i) s.data[i] = std::fabs(g.data[i]);
                break;
            }
            case Criterion::magnitude_smallest:
                for (std::size_t i = 0; i < s.size(); ++i) s.data[i] = 1.0 / (std::fabs(theta.data[i]) + epsilon);
                break;
            case Criterion::magnitude_largest:
                for (std::size_t i = 0; i < s.size(); ++i) s.data[i] = std::fabs(theta.data[i]);
                break;
            case Criterion::random_uniform: {
                RandomSource rng(derive_seed(rng_seed, l));
                for (std::size_t i = 0; i < s.size(); ++i) s.data[i] = rng.uniform01();
                break;
            }
            case Criterion::gallop:
                break; // handled above
        }
        field.layers.push_back(std::move(s));
        field.layer_names.push_back(params.layer(l).name);
        field.layer_excluded.push_back(0);
    }
    return field;
}

ScoreSample sample_scores(const ScoreField& scores, double proportion, std::uint64_t rng_seed) {
    require(proportion > 0.0 && proportion <= 1.0, "sample_scores: proportion ", proportion, " outside (0,1]");
    ScoreSample sample;
    sample.proportion = proportion;
    for (std::size_t l = 0; l < scores.layers.size(); ++l) {
        const auto n = scores.layers[l].size();
        if (scores.layer_excluded[l]) {
            sample.per_layer_counts.push_back(0);
            continue;
        }
        const auto m = static_cast<std::size_t>(std::floor(proportion * static_cast<double>(n)));
        sample.per_layer_counts.push_back(m);
        if (m == n) {
            sample.values.insert(sample.values.end(), scores.layers[l].data.begin(), scores.layers[l].data.end());
            continue;
        }
        // Floyd's selection: m distinct indices from [0, n)
        RandomSource rng(derive_seed(rng_seed, l));
        std::unordered_set<std::size_t> chosen;
        chosen.reserve(m * 2);
        for (std::size_t j = n - m; j < n; ++j) {
            const auto t = static_cast<std::size_t>(rng.uniform_below(j + 1));
            if (!chosen.insert(t).second) chosen.insert(j);
        }
        std::vector<std::size_t> ordered(chosen.begin(), chosen.end());
        std::sort(ordered.begin(), ordered.end());
        for (std::size_t idx : ordered) sample.values.push_back(scores.layers[l].data[idx]);
    }
    return sample;
}

double compute_threshold(const ScoreSample& sample, double density, std::size_t total_params,
                         bool strict_sample_rank) {
    require(density > 0.0 && density < 1.0, "compute_threshold: density ", density, " outside (0,1)");
    require(!sample.values.empty(), "compute_threshold: empty sample");

    std::size_t rank; // 0-based index into the descending-sorted sample
    if (strict_sample_rank) {
        rank = static_cast<std::size_t>(std::floor(density * static_cast<double>(total_params)));
        require(rank < sample.values.size(), "compute_threshold: rank ", rank, " not covered by sample of ",
                sample.values.size(), " scores; increase the score sample proportion");
    } else {
        const auto k = static_cast<std::size_t>(
            std::floor(density * static_cast<double>(sample.values.size())));
        if (k == 0) return std::numeric_limits<double>::infinity();
        rank = k - 1; // k-th largest
        require(rank < sample.values.size(), "compute_threshold: rank ", rank, " not covered by sample of ",
                sample.values.size(), " scores; increase the score sample proportion");
    }
    std::vector<double> work = sample.values;
    std::nth_element(work.begin(), work.begin() + static_cast<std::ptrdiff_t>(rank), work.end(),
                     std::greater<double>());
    return work[rank];
}

void SparsityMask::init(const ParameterSet& shapes) {
    std::vector<std::size_t> sizes;
    for (const auto& l : shapes.layers()) sizes.push_back(l.size());
    init(std::move(sizes));
}

void SparsityMask::init(std::vector<std::size_t> layer_sizes) {
    layer_sizes_ = std::move(layer_sizes);
    words_.clear();
    ones_ = 0;
    for (std::size_t n : layer_sizes_) words_.emplace_back((n + 63) / 64, 0ull);
}

bool SparsityMask::get(std::size_t layer, std::size_t idx) const {
    return (words_[layer][idx >> 6] >> (idx & 63)) & 1ull;
}

void SparsityMask::set(std::size_t layer, std::size_t idx, bool value) {
    std::uint64_t& w = words_[layer][idx >> 6];
    const std::uint64_t bit = 1ull << (idx & 63);
    if (value) {
        if (!(w & bit)) ++ones_;
        w |= bit;
    } else {
        if (w & bit) --ones_;
        w &= ~bit;
    }
}

std::size_t SparsityMask::layer_ones(std::size_t l) const {
    std::size_t n = 0;
    for (std::uint64_t w : words_[l]) n += static_cast<std::size_t>(std::popcount(w));
    return n;
}

void SparsityMask::recount() {
    ones_ = 0;
    for (std::size_t l = 0; l < words_.size(); ++l) ones_ += layer_ones(l);
}

bool SparsityMask::same_structure(const ParameterSet& params) const {
    if (layer_sizes_.size() != params.layer_count()) return false;
    for (std::size_t l = 0; l < layer_sizes_.size(); ++l) {
        if (layer_sizes_[l] != params.layer(l).size()) return false;
    }
    return true;
}

SparsityMask build_mask(const ScoreField& scores, double threshold,
                        std::optional<std::size_t> exact_k) {
    SparsityMask mask;
    mask.threshold = threshold;
    std::vector<std::size_t> sizes;
    for (const auto& layer : scores.layers) sizes.push_back(layer.size());
    mask.init(std::move(sizes));

    std::size_t selected = 0;
    if (exact_k) {
        // strictly-greater entries first, then ties at the threshold in
        // layer-major order until the cap is reached
        for (std::size_t l = 0; l < scores.layers.size(); ++l) {
            if (scores.layer_excluded[l]) continue;
            const auto& s = scores.layers[l].data;
            for (std::size_t i = 0; i < s.size(); ++i) {
                if (s[i] > threshold) {
                    mask.set(l, i, true);
                    ++selected;
                }
            }
        }
        for (std::size_t l = 0; l < scores.layers.size() && selected < *exact_k; ++l) {
            if (scores.layer_excluded[l]) continue;
            const auto& s = scores.layers[l].data;
            for (std::size_t i = 0; i < s.size() && selected < *exact_k; ++i) {
                if (s[i] == threshold) {
                    mask.set(l, i, true);
                    ++selected;
                }
            }
        }
    } else {
        for (std::size_t l = 0; l < scores.layers.size(); ++l) {
            if (scores.layer_excluded[l]) continue;
            const auto& s = scores.layers[l].data;
            for (std::size_t i = 0; i < s.size(); ++i) {
                if (s[i] >= threshold) mask.set(l, i, true);
            }
        }
    }
    return mask;
}

double effective_density(const SparsityMask& mask, std::size_t total_params) {
    require(total_params > 0, "effective_density: zero parameter count");
    return static_cast<double>(mask.ones()) / static_cast<double>(total_params);
}

SparsityMask select_mask(Model& model, const ParameterSet& params, const Task& task,
                         const SelectionConfig& config) {
    std::vector<Example> subset = config.phase1_shuffle_seed
        ? take_fraction_shuffled(task, config.data_fraction, *config.phase1_shuffle_seed)
        : take_fraction(task, config.data_fraction);

    ScoreField scores;
    if (config.criterion == Criterion::gallop || config.criterion == Criterion::gradient_only) {
        GradientAccumulator acc = accumulate_gradients(model, params, task, subset, config.gradient_mode);
        scores = baseline_scores(config.criterion, &acc, params, config.epsilon, config.seed);
    } else {
        scores = baseline_scores(config.criterion, nullptr, params, config.epsilon, config.seed);
    }

    for (const auto& name : config.exclude_layers) {
        const int l = params.find(name);
        require(l >= 0, "select_mask: excluded layer '", name, "' not found");
        scores.layer_excluded[static_cast<std::size_t>(l)] = 1;
        for (auto& v : scores.layers[static_cast<std::size_t>(l)].data) v = 0.0;
    }

    // density is taken relative to the selectable pool (the whole model unless
    // layers are excluded)
    std::size_t selectable = 0;
    for (std::size_t l = 0; l < scores.layers.size(); ++l) {
        if (!scores.layer_excluded[l]) selectable += scores.layers[l].size();
    }
    ScoreSample sample = sample_scores(scores, config.score_sample, config.seed);
    const double threshold = compute_threshold(sample, config.density, selectable,
                                               config.strict_sample_rank);

    std::optional<std::size_t> exact_k;
    if (config.score_sample == 1.0 && !config.strict_sample_rank) {
        exact_k = static_cast<std::size_t>(std::floor(config.density * static_cast<double>(selectable)));
    }
    SparsityMask mask = build_mask(scores, threshold, exact_k);
    mask.target_density = config.density;
    mask.sample_seed = config.seed;
    return mask;
}

std::vector<LayerDensity> mask_layer_densities(const SparsityMask& mask, const ParameterSet& params) {
    require(mask.same_structure(params), "mask_layer_densities: mask/parameter structure mismatch");
    std::vector<LayerDensity> out;
    for (std::size_t l = 0; l < params.layer_count(); ++l) {
        LayerDensity d;
        d.layer = params.layer(l).name;
        d.size = params.layer(l).size();
        d.ones = mask.layer_ones(l);
        d.density = d.size ? static_cast<double>(d.ones) / static_cast<double>(d.size) : 0.0;
        out.push_back(std::move(d));
    }
    return out;
}

} // namespace gallop
