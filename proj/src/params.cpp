#include "gallop/params.hpp"

#include "gallop/error.hpp"

#include <bit>
#include <cstdint>
#include <utility>

namespace gallop {

std::size_t ParameterSet::add_layer(std::string name, std::size_t rows, std::size_t cols) {
    require(rows > 0 && cols > 0, "parameter layer '", name, "': dimensions must be positive");
    require(find(name) < 0, "parameter layer '", name, "': duplicate name");
    layers_.push_back(ParamLayer{std::move(name), Tensor(rows, cols)});
    return layers_.size() - 1;
}

int ParameterSet::find(std::string_view name) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (layers_[i].name == name) return static_cast<int>(i);
    }
    return -1;
}

std::size_t ParameterSet::total_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.size();
    return n;
}

bool ParameterSet::same_structure(const ParameterSet& other) const {
    if (layers_.size() != other.layers_.size()) return false;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (layers_[i].name != other.layers_[i].name) return false;
        if (!layers_[i].values.same_shape(other.layers_[i].values)) return false;
    }
    return true;
}

ParameterSet snapshot(const ParameterSet& params) {
    return params;
}

std::size_t diff_count(const ParameterSet& a, const ParameterSet& b) {
    require(a.same_structure(b), "diff_count: parameter sets have different structure");
    std::size_t n = 0;
    for (std::size_t l = 0; l < a.layer_count(); ++l) {
        const auto& va = a.layer(l).values.data;
        const auto& vb = b.layer(l).values.data;
        for (std::size_t i = 0; i < va.size(); ++i) {
            if (std::bit_cast<std::uint64_t>(va[i]) != std::bit_cast<std::uint64_t>(vb[i])) ++n;
        }
    }
    return n;
}

LayerGradients zero_gradients(const ParameterSet& params) {
    LayerGradients grads;
    grads.reserve(params.layer_count());
    for (const auto& l : params.layers()) grads.emplace_back(l.values.rows, l.values.cols);
    return grads;
}

} // namespace gallop
