// SPDX-License-Identifier: Apache-2.0
#include "gradlens/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

namespace gradlens {

std::string dtype_name(Dtype dt) { return dt == Dtype::F32 ? "f32" : "f64"; }

Dtype dtype_from_name(const std::string& name) {
    if (name == "f32") return Dtype::F32;
    if (name == "f64") return Dtype::F64;
    throw ConfigError("unknown dtype '" + name + "' (expected f32 or f64)");
}

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_to_string(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill, Dtype dt)
    : shape_(std::move(shape)),
      dtype_(dt),
      data_(std::make_shared<std::vector<double>>(shape_product(shape_), fill)) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values, Dtype dt)
    : shape_(std::move(shape)), dtype_(dt), data_(std::make_shared<std::vector<double>>(std::move(values))) {
    if (data_->size() != shape_product(shape_)) {
        throw ShapeError("tensor value count " + std::to_string(data_->size()) + " does not match shape " +
                         shape_to_string(shape_));
    }
}

Tensor Tensor::with_dtype(Dtype dt) const {
    Tensor t = *this;
    t.dtype_ = dt;
    return t;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

double* Tensor::mutable_data() {
    if (data_.use_count() > 1) data_ = std::make_shared<std::vector<double>>(*data_);
    return data_->data();
}

std::size_t Tensor::flat_index(const std::vector<std::size_t>& index) const {
    if (index.size() != shape_.size()) {
        throw ShapeError("index rank " + std::to_string(index.size()) + " vs tensor rank " +
                         std::to_string(shape_.size()));
    }
    std::size_t flat = 0;
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= shape_[i]) throw ShapeError("index out of bounds at axis " + std::to_string(i));
        flat = flat * shape_[i] + index[i];
    }
    return flat;
}

double Tensor::at(const std::vector<std::size_t>& index) const { return (*data_)[flat_index(index)]; }

void Tensor::set(const std::vector<std::size_t>& index, double v) {
    std::size_t flat = flat_index(index);
    mutable_data()[flat] = v;
}

Tensor Tensor::reshape(std::vector<std::size_t> new_shape) const {
    if (shape_product(new_shape) != size()) {
        throw ShapeError("reshape " + shape_to_string(shape_) + " -> " + shape_to_string(new_shape) +
                         " changes element count");
    }
    Tensor t = *this;
    t.shape_ = std::move(new_shape);
    return t;
}

Tensor Tensor::map(const std::function<double(double)>& fn) const {
    std::vector<double> out(size());
    const double* src = data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(src[i]);
    return Tensor(shape_, std::move(out), dtype_);
}

Tensor Tensor::zip(const Tensor& o, const char* op, const std::function<double(double, double)>& fn) const {
    if (shape_ != o.shape_) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(shape_) + " vs " +
                         shape_to_string(o.shape_));
    }
    std::vector<double> out(size());
    const double* a = data();
    const double* b = o.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(a[i], b[i]);
    return Tensor(shape_, std::move(out), dtype_);
}

double Tensor::sum() const {
    double s = 0.0;
    for (double v : *data_) s += v;
    return s;
}

double Tensor::abs_max() const {
    double m = 0.0;
    for (double v : *data_) m = std::max(m, std::fabs(v));
    return m;
}

double Tensor::min_value() const {
    double m = std::numeric_limits<double>::infinity();
    for (double v : *data_) m = std::min(m, v);
    return m;
}

double Tensor::max_value() const {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : *data_) m = std::max(m, v);
    return m;
}

double Tensor::dot(const Tensor& o) const {
    if (size() != o.size()) throw ShapeError("dot: size mismatch");
    double s = 0.0;
    const double* a = data();
    const double* b = o.data();
    for (std::size_t i = 0; i < size(); ++i) s += a[i] * b[i];
    return s;
}

double Tensor::norm2() const { return std::sqrt(dot(*this)); }

bool Tensor::all_finite() const {
    for (double v : *data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

bool Tensor::bitwise_equal(const Tensor& o) const {
    if (shape_ != o.shape_) return false;
    const double* a = data();
    const double* b = o.data();
    for (std::size_t i = 0; i < size(); ++i) {
        if (std::memcmp(&a[i], &b[i], sizeof(double)) != 0) return false;
    }
    return true;
}

bool Tensor::allclose(const Tensor& o, double atol, double rtol) const {
    if (shape_ != o.shape_) return false;
    const double* a = data();
    const double* b = o.data();
    for (std::size_t i = 0; i < size(); ++i) {
        double tol = atol + rtol * std::max(std::fabs(a[i]), std::fabs(b[i]));
        if (std::fabs(a[i] - b[i]) > tol) return false;
    }
    return true;
}

}  // namespace gradlens
