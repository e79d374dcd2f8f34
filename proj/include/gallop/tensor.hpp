#pragma once

#include <cstddef>
#include <vector>

namespace gallop {

/// Dense row-major matrix of f64. Rank-1 data is stored as a 1xN matrix.
struct Tensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    static Tensor scalar(double v);
    static Tensor row_vector(std::vector<double> values);
    static Tensor from_rows(std::size_t r, std::size_t c, std::vector<double> values);

    std::size_t size() const { return data.size(); }

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    bool same_shape(const Tensor& other) const { return rows == other.rows && cols == other.cols; }
    bool all_finite() const;
};

bool bitwise_equal(const Tensor& a, const Tensor& b);

} // namespace gallop
