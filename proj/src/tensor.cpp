#include "gallop/tensor.hpp"

#include "gallop/error.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <utility>

namespace gallop {

Tensor Tensor::scalar(double v) {
    Tensor t(1, 1);
    t.data[0] = v;
    return t;
}

Tensor Tensor::row_vector(std::vector<double> values) {
    Tensor t;
    t.rows = 1;
    t.cols = values.size();
    t.data = std::move(values);
    return t;
}

Tensor Tensor::from_rows(std::size_t r, std::size_t c, std::vector<double> values) {
    require(values.size() == r * c, "tensor init: expected ", r * c, " values, got ", values.size());
    Tensor t;
    t.rows = r;
    t.cols = c;
    t.data = std::move(values);
    return t;
}

bool Tensor::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        if (std::bit_cast<std::uint64_t>(a.data[i]) != std::bit_cast<std::uint64_t>(b.data[i])) return false;
    }
    return true;
}

} // namespace gallop
