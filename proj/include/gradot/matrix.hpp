#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "gradot/rng.hpp"

namespace gradot {

// Dense row-major matrix of doubles. The universal carrier for weights,
// factors, gradients and curvature blocks. Column vectors are n x 1.
class Matrix {
public:
    Matrix() = default;
    Matrix(int rows, int cols);
    Matrix(int rows, int cols, std::vector<double> data);

    static Matrix identity(int n);
    static Matrix gaussian(int rows, int cols, Rng& rng, double stddev = 1.0);

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    bool empty() const { return data_.empty(); }
    std::size_t size() const { return data_.size(); }

    double& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    double operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }

    double* row_ptr(int r) { return data_.data() + static_cast<std::size_t>(r) * cols_; }
    const double* row_ptr(int r) const { return data_.data() + static_cast<std::size_t>(r) * cols_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    void fill(double v);
    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
    bool all_finite() const;

    bool operator==(const Matrix& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
    }

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

// Throws NumericalError if m holds a NaN/Inf; context names the operation.
void check_finite(const Matrix& m, const std::string& context);

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
Matrix transpose(const Matrix& a);

// Sum of absolute entries.
double l1(const Matrix& m);
// Elementwise inner product (Frobenius inner product).
double inner(const Matrix& a, const Matrix& b);
double frobenius_norm(const Matrix& m);

} // namespace gradot
