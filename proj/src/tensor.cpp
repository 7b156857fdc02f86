#include "sinewich/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace sinewich {

namespace {

std::size_t element_count(const Shape& shape) {
    if (shape.empty()) throw ContractViolation("tensor shape must have at least one dimension");
    std::size_t n = 1;
    for (std::size_t d : shape) {
        if (d == 0) throw ContractViolation("tensor extents must be positive, got " + shape_to_string(shape));
        n *= d;
    }
    return n;
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (element_count(shape_) != data_.size()) {
        throw ContractViolation("shape " + shape_to_string(shape_) + " does not match " +
                                std::to_string(data_.size()) + " elements");
    }
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw ContractViolation("axis " + std::to_string(axis) + " out of range for shape " +
                                shape_to_string(shape_));
    }
    return shape_[axis];
}

Tensor Tensor::reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor& Tensor::operator+=(const Tensor& other) {
    require_same_shape(*this, other, "tensor +=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
    require_same_shape(*this, other, "tensor -=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Tensor& Tensor::operator*=(double factor) {
    for (double& v : data_) v *= factor;
    return *this;
}

void Tensor::axpy(double alpha, const Tensor& other) {
    require_same_shape(*this, other, "tensor axpy");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += alpha * other.data_[i];
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::max_abs() const noexcept {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
}

double Tensor::squared_norm() const noexcept {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return s;
}

double Tensor::sum() const noexcept { return std::accumulate(data_.begin(), data_.end(), 0.0); }

Tensor operator+(Tensor lhs, const Tensor& rhs) { return lhs += rhs; }
Tensor operator-(Tensor lhs, const Tensor& rhs) { return lhs -= rhs; }
Tensor operator*(double factor, Tensor t) { return t *= factor; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ContractViolation(std::string(what) + ": shape mismatch " + shape_to_string(a.shape()) +
                                " vs " + shape_to_string(b.shape()));
    }
}

double dot(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) {
        throw ContractViolation("dot: length mismatch " + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ContractViolation("matmul: incompatible shapes " + shape_to_string(a.shape()) + " x " +
                                shape_to_string(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a(i, p);
            if (aip == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out(i, j) += aip * b(p, j);
        }
    }
    return out;
}

Tensor transpose(const Tensor& m) {
    if (m.rank() != 2) throw ContractViolation("transpose: expected a matrix, got " + shape_to_string(m.shape()));
    Tensor out({m.dim(1), m.dim(0)});
    for (std::size_t i = 0; i < m.dim(0); ++i)
        for (std::size_t j = 0; j < m.dim(1); ++j) out(j, i) = m(i, j);
    return out;
}

ConvKernel::ConvKernel(Tensor weights) : weights_(std::move(weights)) {
    if (weights_.rank() != 4) {
        throw ContractViolation("conv kernel must be 4-D [out,in,kH,kW], got " + shape_to_string(weights_.shape()));
    }
    if (weights_.shape()[2] % 2 == 0 || weights_.shape()[3] % 2 == 0) {
        throw ContractViolation("conv kernel spatial extents must be odd, got " + shape_to_string(weights_.shape()));
    }
}

ConvKernel::ConvKernel(std::size_t out_channels, std::size_t in_channels, std::size_t kh, std::size_t kw)
    : ConvKernel(Tensor({out_channels, in_channels, kh, kw})) {}

}  // namespace sinewich
