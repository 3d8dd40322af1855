#ifndef MLCL_TENSOR_HPP
#define MLCL_TENSOR_HPP

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "mlcl/errors.hpp"

namespace mlcl {

/// Dense row-major tensor of doubles. Small, owning, no views; the heavy
/// lifting (GEMM) happens through Eigen maps over the raw buffer.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::initializer_list<std::size_t> shape);

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<std::size_t> shape, double value);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at2(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double at2(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    double& at3(std::size_t c, std::size_t y, std::size_t x) {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }
    double at3(std::size_t c, std::size_t y, std::size_t x) const {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }

    double& at4(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
        return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }
    double at4(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
        return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    /// Change the shape without touching the data; element count must match.
    void reshape(std::vector<std::size_t> shape);

    void fill(double value);
    void zero() { fill(0.0); }

    Tensor& add_(const Tensor& other);          // elementwise +=
    Tensor& scale_(double s);                   // elementwise *=
    Tensor& axpy_(double a, const Tensor& x);   // this += a * x

    double sum() const;
    double min() const;
    double max() const;

    /// Exact elementwise equality (used by bitwise determinism checks).
    bool bitwise_equal(const Tensor& other) const;

    std::string shape_str() const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

/// Slice one sample out of a batch tensor [N, ...] -> [...]. Copies.
Tensor batch_slice(const Tensor& batch, std::size_t index);

/// Write one sample into a batch tensor at the given index.
void batch_assign(Tensor& batch, std::size_t index, const Tensor& sample);

/// Stack equal-shaped tensors into a batch along a new leading axis.
Tensor batch_stack(const std::vector<Tensor>& samples);

} // namespace mlcl

#endif
