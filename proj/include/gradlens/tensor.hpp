// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "gradlens/errors.hpp"

namespace gradlens {

enum class Dtype { F32, F64 };

std::string dtype_name(Dtype dt);
Dtype dtype_from_name(const std::string& name);

// Dense row-major numeric array with value semantics. Storage is shared
// copy-on-write so tapes and caches can hold snapshots cheaply; arithmetic
// is always carried out in double, the dtype tag governs serialization.
class Tensor {
public:
    Tensor() : Tensor(std::vector<std::size_t>{}, 0.0, Dtype::F64) {}
    Tensor(std::vector<std::size_t> shape, double fill, Dtype dt = Dtype::F64);
    Tensor(std::vector<std::size_t> shape, std::vector<double> values, Dtype dt = Dtype::F64);

    static Tensor zeros(std::vector<std::size_t> shape, Dtype dt = Dtype::F64) {
        return Tensor(std::move(shape), 0.0, dt);
    }
    static Tensor full(std::vector<std::size_t> shape, double v, Dtype dt = Dtype::F64) {
        return Tensor(std::move(shape), v, dt);
    }
    static Tensor scalar(double v, Dtype dt = Dtype::F64) {
        return Tensor(std::vector<std::size_t>{}, std::vector<double>{v}, dt);
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_->size(); }
    Dtype dtype() const { return dtype_; }
    Tensor with_dtype(Dtype dt) const;

    bool shape_equals(const Tensor& other) const { return shape_ == other.shape_; }
    std::string shape_str() const;

    const double* data() const { return data_->data(); }
    double* mutable_data();  // detaches shared storage

    double operator[](std::size_t flat) const { return (*data_)[flat]; }
    double at(const std::vector<std::size_t>& index) const;
    void set(const std::vector<std::size_t>& index, double v);

    std::size_t flat_index(const std::vector<std::size_t>& index) const;

    Tensor reshape(std::vector<std::size_t> new_shape) const;

    // Elementwise; shapes must match exactly (only scalar-tensor broadcast
    // is allowed, via the double overloads).
    Tensor operator+(const Tensor& o) const { return zip(o, "add", [](double a, double b) { return a + b; }); }
    Tensor operator-(const Tensor& o) const { return zip(o, "sub", [](double a, double b) { return a - b; }); }
    Tensor operator*(const Tensor& o) const { return zip(o, "mul", [](double a, double b) { return a * b; }); }
    Tensor operator+(double s) const { return map([s](double a) { return a + s; }); }
    Tensor operator-(double s) const { return map([s](double a) { return a - s; }); }
    Tensor operator*(double s) const { return map([s](double a) { return a * s; }); }

    Tensor map(const std::function<double(double)>& fn) const;
    Tensor zip(const Tensor& o, const char* op, const std::function<double(double, double)>& fn) const;

    double sum() const;
    double abs_max() const;
    double min_value() const;
    double max_value() const;
    double mean() const { return size() == 0 ? 0.0 : sum() / static_cast<double>(size()); }
    double dot(const Tensor& o) const;
    double norm2() const;

    bool all_finite() const;

    bool bitwise_equal(const Tensor& o) const;
    bool allclose(const Tensor& o, double atol = 1e-12, double rtol = 1e-9) const;

private:
    std::vector<std::size_t> shape_;
    Dtype dtype_;
    std::shared_ptr<std::vector<double>> data_;
};

inline Tensor operator*(double s, const Tensor& t) { return t * s; }

std::size_t shape_product(const std::vector<std::size_t>& shape);
std::string shape_to_string(const std::vector<std::size_t>& shape);

}  // namespace gradlens
