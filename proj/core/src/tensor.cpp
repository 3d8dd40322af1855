#include "mlcl/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace mlcl {

namespace {
std::size_t product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}
} // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(product(shape_), 0.0) {}

Tensor::Tensor(std::initializer_list<std::size_t> shape)
    : Tensor(std::vector<std::size_t>(shape)) {}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
}

void Tensor::reshape(std::vector<std::size_t> shape) {
    if (product(shape) != data_.size()) {
        throw ShapeError("reshape from " + shape_str() + " would change element count");
    }
    shape_ = std::move(shape);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor& Tensor::add_(const Tensor& other) {
    if (!same_shape(other)) {
        throw ShapeError("add_: " + shape_str() + " vs " + other.shape_str());
    }
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Tensor& Tensor::scale_(double s) {
    for (double& v : data_) v *= s;
    return *this;
}

Tensor& Tensor::axpy_(double a, const Tensor& x) {
    if (!same_shape(x)) {
        throw ShapeError("axpy_: " + shape_str() + " vs " + x.shape_str());
    }
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += a * x.data_[i];
    return *this;
}

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

double Tensor::min() const { return *std::min_element(data_.begin(), data_.end()); }

double Tensor::max() const { return *std::max_element(data_.begin(), data_.end()); }

bool Tensor::bitwise_equal(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << ", ";
        os << shape_[i];
    }
    os << "]";
    return os.str();
}

Tensor batch_slice(const Tensor& batch, std::size_t index) {
    if (batch.ndim() < 2) throw ShapeError("batch_slice needs at least 2 dims");
    if (index >= batch.dim(0)) throw ShapeError("batch_slice index out of range");
    std::vector<std::size_t> shape(batch.shape().begin() + 1, batch.shape().end());
    Tensor out(shape);
    const std::size_t stride = out.numel();
    std::copy(batch.data() + index * stride, batch.data() + (index + 1) * stride, out.data());
    return out;
}

void batch_assign(Tensor& batch, std::size_t index, const Tensor& sample) {
    const std::size_t stride = sample.numel();
    if (batch.numel() != batch.dim(0) * stride || index >= batch.dim(0)) {
        throw ShapeError("batch_assign: incompatible shapes");
    }
    std::copy(sample.data(), sample.data() + stride, batch.data() + index * stride);
}

Tensor batch_stack(const std::vector<Tensor>& samples) {
    if (samples.empty()) throw ShapeError("batch_stack: empty input");
    std::vector<std::size_t> shape;
    shape.push_back(samples.size());
    for (std::size_t d : samples[0].shape()) shape.push_back(d);
    Tensor out(shape);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (!samples[i].same_shape(samples[0])) {
            throw ShapeError("batch_stack: mismatched sample shapes");
        }
        batch_assign(out, i, samples[i]);
    }
    return out;
}

} // namespace mlcl
