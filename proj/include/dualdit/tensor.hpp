// Copyright (c) 2026 the dualdit authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "dualdit/common.hpp"

namespace dualdit {

// Dense row-major tensor of 64-bit reals. Treated as immutable once it has
// been handed to the tape or published to the feature buffer.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::int64_t> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<std::size_t>(checked_size(shape_)), 0.0);
    }

    Tensor(std::vector<std::int64_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_size(shape_) != static_cast<std::int64_t>(data_.size()))
            throw DimensionError("Tensor: shape/data size mismatch");
    }

    static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::int64_t> shape, double v) {
        Tensor t(std::move(shape));
        for (double& x : t.data_) x = v;
        return t;
    }

    static Tensor ones(std::vector<std::int64_t> shape) { return full(std::move(shape), 1.0); }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    // 2-D convenience constructor from nested lists (tests, small fixtures)
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows_init) {
        std::vector<double> d;
        std::int64_t r = 0, c = -1;
        for (const auto& row : rows_init) {
            if (c < 0)
                c = static_cast<std::int64_t>(row.size());
            else if (c != static_cast<std::int64_t>(row.size()))
                throw DimensionError("Tensor::matrix: ragged rows");
            for (double v : row) d.push_back(v);
            ++r;
        }
        return Tensor({r, c}, std::move(d));
    }

    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
    bool is_scalar() const { return size() == 1; }

    std::int64_t rows() const {
        require_2d("rows");
        return shape_[0];
    }
    std::int64_t cols() const {
        require_2d("cols");
        return shape_[1];
    }

    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    double& at(std::int64_t r, std::int64_t c) {
        require_2d("at");
        return data_[static_cast<std::size_t>(r * shape_[1] + c)];
    }
    double at(std::int64_t r, std::int64_t c) const {
        require_2d("at");
        return data_[static_cast<std::size_t>(r * shape_[1] + c)];
    }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double item() const {
        if (!is_scalar()) throw ContractError("Tensor::item: not a scalar");
        return data_[0];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape_[i]);
        }
        return s + "]";
    }

private:
    static std::int64_t checked_size(const std::vector<std::int64_t>& shape) {
        std::int64_t n = 1;
        for (std::int64_t e : shape) {
            if (e <= 0) throw DimensionError("Tensor: non-positive extent");
            if (n > (static_cast<std::int64_t>(1) << 40) / e)
                throw DimensionError("Tensor: size overflow");
            n *= e;
        }
        return n;
    }

    void require_2d(const char* what) const {
        if (shape_.size() != 2) throw DimensionError(std::string("Tensor::") + what + ": expected 2-D, got " + shape_str());
    }

    std::vector<std::int64_t> shape_;
    std::vector<double> data_;
};

inline void ensure_finite(const Tensor& t, const char* op) {
    if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite value produced");
}

inline void ensure_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace dualdit
