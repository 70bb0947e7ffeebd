#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "xvl/error.hpp"

namespace xvl {

/// Dense row-major array of doubles with rank 0, 1 or 2.
///
/// Every tensor is stored as a rows x cols matrix. Rank-1 tensors are row
/// vectors (1 x n) and rank-0 tensors are 1 x 1. The rank is kept so that
/// shapes survive serialization unchanged.
class Tensor {
public:
    Tensor() : rows_(0), cols_(0), rank_(2) {}

    Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), rank_(2), data_(rows * cols, fill) {}

    Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), rank_(2), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + std::to_string(rows_) + "x" +
                             std::to_string(cols_));
        }
    }

    static Tensor scalar(double v) {
        Tensor t(1, 1, v);
        t.rank_ = 0;
        return t;
    }

    static Tensor vector(std::vector<double> values) {
        const auto n = values.size();
        Tensor t(1, n, std::move(values));
        t.rank_ = 1;
        return t;
    }

    static Tensor matrix(std::size_t rows, std::size_t cols,
                         std::initializer_list<double> values) {
        return Tensor(rows, cols, std::vector<double>(values));
    }

    static Tensor identity(std::size_t n) {
        Tensor t(n, n);
        for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
        return t;
    }

    /// Builds a tensor from an explicit shape list (rank 0..2).
    static Tensor from_shape(const std::vector<std::size_t>& shape, std::vector<double> data) {
        switch (shape.size()) {
        case 0: {
            if (data.size() != 1) throw ShapeError("rank-0 tensor needs exactly one value");
            return scalar(data[0]);
        }
        case 1: {
            if (data.size() != shape[0]) throw ShapeError("rank-1 data length mismatch");
            return vector(std::move(data));
        }
        case 2:
            return Tensor(shape[0], shape[1], std::move(data));
        default:
            throw ShapeError("only ranks 0, 1 and 2 are supported, got rank " +
                             std::to_string(shape.size()));
        }
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    std::size_t rank() const { return rank_; }
    bool empty() const { return data_.empty(); }

    std::vector<std::size_t> shape() const {
        switch (rank_) {
        case 0: return {};
        case 1: return {cols_};
        default: return {rows_, cols_};
        }
    }

    std::string shape_string() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

    bool same_shape(const Tensor& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double item() const {
        if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string());
        return data_[0];
    }

    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }
    const std::vector<double>& storage() const { return data_; }

    std::span<const double> row(std::size_t r) const {
        return std::span<const double>(data_).subspan(r * cols_, cols_);
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    /// Bitwise equality of shape and contents (NaN payloads compare by value).
    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.rank_ == b.rank_ &&
               a.data_ == b.data_;
    }

private:
    std::size_t rows_;
    std::size_t cols_;
    std::size_t rank_;
    std::vector<double> data_;
};

} // namespace xvl
