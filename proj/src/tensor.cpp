#include "fairmeta/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace fairmeta {

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << ',';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

Tensor::Tensor() : data_(1, 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
        throw std::invalid_argument("tensor: shape " + shape_string(shape_) + " needs " +
                                    std::to_string(shape_size(shape_)) + " elements, got " +
                                    std::to_string(data_.size()));
    }
    if (shape_.size() > 2) {
        throw std::invalid_argument("tensor: rank > 2 is not supported");
    }
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::filled(Shape shape, double value) {
    const std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

std::size_t Tensor::rows() const {
    switch (rank()) {
    case 0:
    case 1: return 1;
    default: return shape_[0];
    }
}

std::size_t Tensor::cols() const {
    switch (rank()) {
    case 0: return 1;
    case 1: return shape_[0];
    default: return shape_[1];
    }
}

double Tensor::item() const {
    if (data_.size() != 1) {
        throw std::invalid_argument("tensor: item() on tensor of shape " + shape_string(shape_));
    }
    return data_[0];
}

bool Tensor::all_finite() const noexcept {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) noexcept {
    if (a.shape() != b.shape()) return false;
    return a.size() == 0 || std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

} // namespace fairmeta
