// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major f64 matrices and the handful of kernels the rest of the
// library needs. Everything returns new values; nothing aliases.
#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "modlora/errors.hpp"

namespace modlora {

class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols) {
        if (rows == 0 || cols == 0) {
            throw ShapeError("matrix dimensions must be positive, got " + shape_string(rows, cols));
        }
        data_.assign(rows * cols, fill);
    }

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data) : Matrix(rows, cols) {
        if (data.size() != rows * cols) {
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match " +
                             shape_string(rows, cols));
        }
        data_ = std::move(data);
    }

    /// Row-list literal, e.g. `Matrix{{1, 2}, {3, 4}}`.
    Matrix(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows_ ? rows.begin()->size() : 0;
        if (rows_ == 0 || cols_ == 0) throw ShapeError("matrix literal must be non-empty");
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw ShapeError("ragged matrix literal");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }

    std::string shape() const { return shape_string(rows_, cols_); }
    bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool all_finite() const noexcept {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

    static std::string shape_string(std::size_t r, std::size_t c) {
        return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

namespace detail {
inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape() + " vs " + b.shape());
    }
}
}  // namespace detail

/// a × b.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions differ " + a.shape() + " x " + b.shape());
    }
    Matrix out(a.rows(), b.cols());
    const std::size_t n = a.cols(), m = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* o = out.row(i).data();
        const double* ar = a.row(i).data();
        for (std::size_t k = 0; k < n; ++k) {
            const double av = ar[k];
            const double* br = b.row(k).data();
            for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
        }
    }
    return out;
}

/// a × bᵀ. The layout used by every linear layer (weights are out×in).
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: inner dimensions differ " + a.shape() + " x " + b.shape() + "^T");
    }
    Matrix out(a.rows(), b.rows());
    const std::size_t n = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ar = a.row(i).data();
        double* o = out.row(i).data();
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const double* br = b.row(j).data();
            double acc = 0.0;
            for (std::size_t k = 0; k < n; ++k) acc += ar[k] * br[k];
            o[j] = acc;
        }
    }
    return out;
}

/// aᵀ × b.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: inner dimensions differ " + a.shape() + "^T x " + b.shape());
    }
    Matrix out(a.cols(), b.cols());
    const std::size_t m = b.cols();
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double* ar = a.row(k).data();
        const double* br = b.row(k).data();
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double av = ar[i];
            if (av == 0.0) continue;
            double* o = out.row(i).data();
            for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
        }
    }
    return out;
}

inline Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
    detail::require_same_shape(a, b, "add");
    Matrix out = a;
    auto o = out.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
    return out;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
    detail::require_same_shape(a, b, "sub");
    Matrix out = a;
    auto o = out.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
    return out;
}

inline Matrix scale(const Matrix& a, double c) {
    Matrix out = a;
    for (double& v : out.values()) v *= c;
    return out;
}

/// a += c·b in place.
inline void axpy(Matrix& a, double c, const Matrix& b) {
    detail::require_same_shape(a, b, "axpy");
    auto o = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += c * bv[i];
}

/// Adds a 1×n row vector to every row of a.
inline void add_row_broadcast(Matrix& a, const Matrix& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw ShapeError("row broadcast: " + row.shape() + " onto " + a.shape());
    }
    const double* r = row.row(0).data();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* o = a.row(i).data();
        for (std::size_t j = 0; j < a.cols(); ++j) o[j] += r[j];
    }
}

/// Column sums as a 1×cols row.
inline Matrix column_sums(const Matrix& a) {
    Matrix out(1, a.cols());
    double* o = out.row(0).data();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* r = a.row(i).data();
        for (std::size_t j = 0; j < a.cols(); ++j) o[j] += r[j];
    }
    return out;
}

/// [a | b] column-wise concatenation.
inline Matrix hconcat(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw ShapeError("hconcat: " + a.shape() + " | " + b.shape());
    Matrix out(a.rows(), a.cols() + b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j);
        for (std::size_t j = 0; j < b.cols(); ++j) out(i, a.cols() + j) = b(i, j);
    }
    return out;
}

/// [a ; b] row-wise stacking.
inline Matrix vconcat(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw ShapeError("vconcat: " + a.shape() + " ; " + b.shape());
    std::vector<double> data(a.values().begin(), a.values().end());
    data.insert(data.end(), b.values().begin(), b.values().end());
    return Matrix(a.rows() + b.rows(), a.cols(), std::move(data));
}

/// Rows [begin, end) as a new matrix.
inline Matrix slice_rows(const Matrix& a, std::size_t begin, std::size_t end) {
    if (begin >= end || end > a.rows()) {
        throw ShapeError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + a.shape());
    }
    auto first = a.values().begin() + static_cast<std::ptrdiff_t>(begin * a.cols());
    auto last = a.values().begin() + static_cast<std::ptrdiff_t>(end * a.cols());
    return Matrix(end - begin, a.cols(), std::vector<double>(first, last));
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    detail::require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(av[i] - bv[i]));
    return m;
}

inline double sum_squares(const Matrix& a) {
    double s = 0.0;
    for (double v : a.values()) s += v * v;
    return s;
}

}  // namespace modlora
