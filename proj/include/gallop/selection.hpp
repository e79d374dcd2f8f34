#pragma once

#include "gallop/model.hpp"
#include "gallop/params.hpp"
#include "gallop/tasks.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gallop {

/// Where the absolute value sits in the gradient average. `abs_of_mean`
/// lets per-example gradients cancel before the magnitude is taken;
/// `mean_of_abs` (the in-place practical form, and the default) does not.
enum class GradientMode { mean_of_abs, abs_of_mean };

struct GradientAccumulator {
    std::vector<Tensor> sums; // per layer, aligned with ParameterSet order
    std::size_t count = 0;
    GradientMode mode = GradientMode::mean_of_abs;

    static GradientAccumulator for_params(const ParameterSet& params, GradientMode mode);

    /// Folds one example's gradients in, applying the mode's abs placement.
    void add(const LayerGradients& grads);

    Tensor mean_layer(std::size_t l) const;
};

GradientAccumulator accumulate_gradients(Model& model, const ParameterSet& params,
                                         const Task& task, std::span<const Example> subset,
                                         GradientMode mode);

struct ScoreField {
    std::vector<Tensor> layers;
    std::vector<std::string> layer_names;
    std::vector<std::uint8_t> layer_excluded; // excluded layers score 0 and are never sampled/selected
    double epsilon = 1e-8;

    std::size_t total_count() const;
};

/// score = |mean gradient| / (|parameter| + epsilon), elementwise.
ScoreField compute_scores(const GradientAccumulator& acc, const ParameterSet& params, double epsilon);

enum class Criterion { gallop, gradient_only, magnitude_smallest, magnitude_largest, random_uniform };

const char* criterion_name(Criterion c);
std::optional<Criterion> criterion_from_name(std::string_view name);

/// Alternative score fields for the ablation criteria. Gradient criteria
/// require `acc`; magnitude criteria and random ignore it.
ScoreField baseline_scores(Criterion criterion, const GradientAccumulator* acc,
                           const ParameterSet& params, double epsilon, std::uint64_t rng_seed);

struct ScoreSample {
    std::vector<double> values;
    double proportion = 1.0;
    std::vector<std::size_t> per_layer_counts;
};

/// Per layer, floor(proportion * layer size) scores drawn uniformly without
/// replacement; deterministic given the seed.
ScoreSample sample_scores(const ScoreField& scores, double proportion, std::uint64_t rng_seed);

/// Threshold targeting the top floor(density*D) scores.
///
/// Default convention: the k-th largest sample value with k = floor(density *
/// sample size), so a fractional sample estimates the same population rank
/// that the full sort would use. `strict_sample_rank` instead indexes the
/// descending-sorted sample literally at floor(density*D) (0-based); with a
/// fractional sample that targets population rank ~density*D/proportion and
/// inflates the effective density accordingly.
/// Returns +infinity when the target count is zero (empty mask).
double compute_threshold(const ScoreSample& sample, double density, std::size_t total_params,
                         bool strict_sample_rank = false);

class SparsityMask {
public:
    void init(const ParameterSet& shapes);
    void init(std::vector<std::size_t> layer_sizes);

    bool get(std::size_t layer, std::size_t idx) const;
    void set(std::size_t layer, std::size_t idx, bool value);

    std::size_t layer_count() const { return layer_sizes_.size(); }
    std::size_t layer_size(std::size_t l) const { return layer_sizes_[l]; }
    std::size_t layer_ones(std::size_t l) const;
    std::size_t ones() const { return ones_; }

    const std::vector<std::vector<std::uint64_t>>& words() const { return words_; }
    std::vector<std::vector<std::uint64_t>>& words() { return words_; }
    void recount();

    bool same_structure(const ParameterSet& params) const;

    double threshold = 0.0;
    double target_density = 0.0;
    std::uint64_t sample_seed = 0;

private:
    std::vector<std::vector<std::uint64_t>> words_;
    std::vector<std::size_t> layer_sizes_;
    std::size_t ones_ = 0;
};

/// mask = 1 where score >= threshold. With `exact_k`, ties exactly at the
/// threshold are kept only until the total reaches k, in layer-major order.
SparsityMask build_mask(const ScoreField& scores, double threshold,
                        std::optional<std::size_t> exact_k = std::nullopt);

double effective_density(const SparsityMask& mask, std::size_t total_params);

struct SelectionConfig {
    Criterion criterion = Criterion::gallop;
    double density = 0.0145;
    double data_fraction = 0.5;   // share of the train split used for the gradient pass
    double score_sample = 0.1;    // share of scores sampled for thresholding; 1.0 = exact top-k
    double epsilon = 1e-8;
    GradientMode gradient_mode = GradientMode::mean_of_abs;
    bool strict_sample_rank = false;
    std::uint64_t seed = 0;
    std::optional<std::uint64_t> phase1_shuffle_seed; // random subset instead of prefix
    std::vector<std::string> exclude_layers; // density then counts against the remaining pool

    bool operator==(const SelectionConfig&) const = default;
};

/// Full phase-1 pipeline: gradient pass over the data fraction, scoring,
/// sampling, thresholding, mask construction.
SparsityMask select_mask(Model& model, const ParameterSet& params, const Task& task,
                         const SelectionConfig& config);

/// Per-layer density rows for the `select` subcommand's CSV output.
struct LayerDensity {
    std::string layer;
    std::size_t size = 0;
    std::size_t ones = 0;
    double density = 0.0;
};

std::vector<LayerDensity> mask_layer_densities(const SparsityMask& mask, const ParameterSet& params);

} // namespace gallop
