#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "stkit/errors.hpp"

namespace stkit {

// Dense row-major matrix of doubles. Feature sequences are stored one frame
// per row; plain vectors are 1xN or Nx1 matrices.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix row(std::vector<double> values) {
        Matrix m;
        m.rows_ = 1;
        m.cols_ = values.size();
        m.data_ = std::move(values);
        return m;
    }

    static Matrix col(std::vector<double> values) {
        Matrix m;
        m.rows_ = values.size();
        m.cols_ = 1;
        m.data_ = std::move(values);
        return m;
    }

    static Matrix from(std::initializer_list<std::initializer_list<double>> init) {
        Matrix m(init.size(), init.size() ? init.begin()->size() : 0);
        std::size_t i = 0;
        for (const auto& r : init) {
            if (r.size() != m.cols_)
                throw ShapeError("Matrix::from: ragged initializer");
            std::size_t j = 0;
            for (double v : r) m(i, j++) = v;
            ++i;
        }
        return m;
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    std::string shape_str() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

    bool operator==(const Matrix& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b))
        throw ShapeError("max_abs_diff: " + a.shape_str() + " vs " + b.shape_str());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::fabs(a.raw()[i] - b.raw()[i]));
    return m;
}

} // namespace stkit
