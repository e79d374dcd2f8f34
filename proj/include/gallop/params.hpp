#pragma once

#include "gallop/tensor.hpp"

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace gallop {

struct ParamLayer {
    std::string name;
    Tensor values;

    std::size_t size() const { return values.size(); }
};

/// Ordered, named collection of dense parameter matrices. Iteration order is
/// insertion order and doubles as the tie-breaking order during selection.
class ParameterSet {
public:
    std::size_t add_layer(std::string name, std::size_t rows, std::size_t cols);

    std::size_t layer_count() const { return layers_.size(); }
    ParamLayer& layer(std::size_t i) { return layers_[i]; }
    const ParamLayer& layer(std::size_t i) const { return layers_[i]; }

    /// Index of a named layer, -1 if absent.
    int find(std::string_view name) const;

    /// Total element count across all layers.
    std::size_t total_count() const;

    std::vector<ParamLayer>& layers() { return layers_; }
    const std::vector<ParamLayer>& layers() const { return layers_; }

    bool same_structure(const ParameterSet& other) const;

private:
    std::vector<ParamLayer> layers_;
};

/// Deep, independent copy.
ParameterSet snapshot(const ParameterSet& params);

/// Count of elementwise-unequal entries under bitwise comparison.
std::size_t diff_count(const ParameterSet& a, const ParameterSet& b);

/// Per-layer gradient tensors aligned with ParameterSet layer order.
using LayerGradients = std::vector<Tensor>;

LayerGradients zero_gradients(const ParameterSet& params);

} // namespace gallop
