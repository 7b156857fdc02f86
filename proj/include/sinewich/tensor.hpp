#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sinewich {

/// Raised when a caller violates an operation's precondition (shape, range, arity).
class ContractViolation : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

/// Dense row-major tensor of 64-bit floats.
///
/// The shape is fixed at construction; every extent is positive and the
/// element count always equals the product of the extents.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }
    static Tensor scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    double* raw() noexcept { return data_.data(); }
    const double* raw() const noexcept { return data_.data(); }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * shape_[1] + j]; }
    double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * shape_[1] + j]; }

    double& operator()(std::size_t i, std::size_t j, std::size_t k) noexcept {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k) const noexcept {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    double& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) noexcept {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const noexcept {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    /// Same data under a new shape with the same element count.
    Tensor reshaped(Shape shape) const;

    void fill(double value);
    Tensor& operator+=(const Tensor& other);
    Tensor& operator-=(const Tensor& other);
    Tensor& operator*=(double factor);
    /// this += alpha * other
    void axpy(double alpha, const Tensor& other);

    bool all_finite() const noexcept;
    double max_abs() const noexcept;
    double squared_norm() const noexcept;
    double sum() const noexcept;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

Tensor operator+(Tensor lhs, const Tensor& rhs);
Tensor operator-(Tensor lhs, const Tensor& rhs);
Tensor operator*(double factor, Tensor t);

double dot(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

/// Dense 2-D matrix product of [m,k] x [k,n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& m);

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

/// 4-D convolution weights laid out [outChannels, inChannels, kH, kW] with odd spatial extents.
class ConvKernel {
public:
    ConvKernel() = default;
    explicit ConvKernel(Tensor weights);
    ConvKernel(std::size_t out_channels, std::size_t in_channels, std::size_t kh, std::size_t kw);

    std::size_t out_channels() const { return weights_.dim(0); }
    std::size_t in_channels() const { return weights_.dim(1); }
    std::size_t kh() const { return weights_.dim(2); }
    std::size_t kw() const { return weights_.dim(3); }

    const Tensor& weights() const noexcept { return weights_; }
    Tensor& weights() noexcept { return weights_; }

    double& operator()(std::size_t o, std::size_t i, std::size_t u, std::size_t v) noexcept {
        return weights_(o, i, u, v);
    }
    double operator()(std::size_t o, std::size_t i, std::size_t u, std::size_t v) const noexcept {
        return weights_(o, i, u, v);
    }

    friend bool operator==(const ConvKernel&, const ConvKernel&) = default;

private:
    Tensor weights_;
};

}  // namespace sinewich
