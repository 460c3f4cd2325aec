#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace fairmeta {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major tensor of doubles. Rank 0 (scalar), 1 and 2 are used
/// throughout; a scalar has an empty shape and exactly one element.
class Tensor {
public:
    Tensor();
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double value);
    static Tensor vector(std::vector<double> values);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
    static Tensor filled(Shape shape, double value);
    static Tensor zeros(Shape shape) { return filled(std::move(shape), 0.0); }
    static Tensor ones(Shape shape) { return filled(std::move(shape), 1.0); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }

    /// Rows/cols of a rank-2 tensor. Rank 1 is treated as a single row.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

    /// Value of a single-element tensor.
    double item() const;

    bool all_finite() const noexcept;

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

/// Same shape and identical bit patterns in every element.
bool bitwise_equal(const Tensor& a, const Tensor& b) noexcept;

} // namespace fairmeta
