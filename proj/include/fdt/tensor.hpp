#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace fdt {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major float64 array. Invariant: product(shape) == data.size().
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double value);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    // Rows/cols view the tensor as [product(leading dims) x last dim].
    std::size_t rows() const noexcept;
    std::size_t cols() const noexcept;

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }
    double& at(std::size_t r, std::size_t c);
    double at(std::size_t r, std::size_t c) const;

    void fill(double value);
    Tensor reshaped(Shape shape) const;

private:
    Shape shape_;
    std::vector<double> data_;
};

// Exact bitwise equality, distinguishing -0.0 from 0.0 and comparing NaN payloads.
bool bit_equal(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace fdt
