#pragma once

#include "gbgn/error.hpp"

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

namespace gbgn {

// Dense row-major n-dimensional array of 64-bit reals. The universal value
// type of the engine; shape extents are always positive.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<int64_t> s, std::vector<double> d);

    static Tensor zeros(std::vector<int64_t> shape);
    static Tensor full(std::vector<int64_t> shape, double value);
    static Tensor scalar(double value);

    int rank() const { return static_cast<int>(shape.size()); }
    int64_t extent(int axis) const { return shape[static_cast<size_t>(axis)]; }
    int64_t size() const { return static_cast<int64_t>(data.size()); }

    double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    // Metadata-only reshape; element count must match.
    Tensor reshaped(std::vector<int64_t> new_shape) const;

    bool all_finite() const;
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

int64_t shape_product(const std::vector<int64_t>& shape);
std::string shape_str(const std::vector<int64_t>& shape);

inline void require_finite(const Tensor& t, const char* what) {
    if (!t.all_finite()) throw NumericError(std::string("non-finite values in ") + what);
}

} // namespace gbgn
