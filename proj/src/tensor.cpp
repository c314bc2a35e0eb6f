#include "gbgn/tensor.hpp"

#include <sstream>

namespace gbgn {

int64_t shape_product(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t e : shape) {
        if (e <= 0) throw ContractViolation("tensor extent must be positive, got " + shape_str(shape));
        n *= e;
    }
    return n;
}

std::string shape_str(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(std::vector<int64_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_product(shape) != static_cast<int64_t>(data.size()))
        throw ContractViolation("tensor data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
}

Tensor Tensor::zeros(std::vector<int64_t> shape) {
    int64_t n = shape_product(shape);
    Tensor t;
    t.shape = std::move(shape);
    t.data.assign(static_cast<size_t>(n), 0.0);
    return t;
}

Tensor Tensor::full(std::vector<int64_t> shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data.begin(), t.data.end(), value);
    return t;
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::reshaped(std::vector<int64_t> new_shape) const {
    if (shape_product(new_shape) != size())
        throw ContractViolation("reshape " + shape_str(shape) + " -> " + shape_str(new_shape) +
                                " changes element count");
    Tensor t;
    t.shape = std::move(new_shape);
    t.data = data;
    return t;
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

} // namespace gbgn
