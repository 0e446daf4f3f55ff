#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace spatseg {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised when operand shapes are inconsistent. The message names the
/// operation and the offending dimensions.
class ShapeError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

/// Raised for invalid configuration values (rates, sizes, class counts).
class ConfigError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

/// Dense row-major double tensor. Plain value type; differentiation state
/// lives on a Tape (see autodiff.hpp).
class Tensor {
   public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t numel() const { return values_.size(); }
    bool empty() const { return values_.empty() && shape_.empty(); }

    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }
    std::vector<double>& storage() { return values_; }
    const std::vector<double>& storage() const { return values_; }

    double* data() { return values_.data(); }
    const double* data() const { return values_.data(); }

    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }

    // Rank-3 accessor (channel, row, column).
    double& at(std::size_t c, std::size_t y, std::size_t x) {
        return values_[(c * shape_[1] + y) * shape_[2] + x];
    }
    double at(std::size_t c, std::size_t y, std::size_t x) const {
        return values_[(c * shape_[1] + y) * shape_[2] + x];
    }

    void fill(double v);
    bool all_finite() const;

    friend bool operator==(const Tensor&, const Tensor&) = default;

   private:
    Shape shape_;
    std::vector<double> values_;
};

}  // namespace spatseg
