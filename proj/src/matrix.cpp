#include "gradot/matrix.hpp"

#include <cmath>

#include "gradot/errors.hpp"

namespace gradot {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) {
        throw ShapeError(msg);
    }
}

std::string shape_of(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

} // namespace

Matrix::Matrix(int rows, int cols) : rows_(rows), cols_(cols) {
    require(rows >= 0 && cols >= 0, "matrix dimensions must be non-negative");
    data_.assign(static_cast<std::size_t>(rows) * cols, 0.0);
}

Matrix::Matrix(int rows, int cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == static_cast<std::size_t>(rows) * cols,
            "matrix data length " + std::to_string(data_.size()) + " != " +
                std::to_string(rows) + "*" + std::to_string(cols));
}

Matrix Matrix::identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) {
        m(i, i) = 1.0;
    }
    return m;
}

Matrix Matrix::gaussian(int rows, int cols, Rng& rng, double stddev) {
    Matrix m(rows, cols);
    for (auto& v : m.data_) {
        v = rng.next_gaussian() * stddev;
    }
    return m;
}

void Matrix::fill(double v) {
    for (auto& x : data_) {
        x = v;
    }
}

bool Matrix::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

void check_finite(const Matrix& m, const std::string& context) {
    if (!m.all_finite()) {
        throw NumericalError("non-finite value in " + context);
    }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    require(a.cols() == b.rows(),
            "matmul shape mismatch: " + shape_of(a) + " * " + shape_of(b));
    Matrix out(a.rows(), b.cols());
    const int n = a.rows();
    const int k = a.cols();
    const int m = b.cols();
    for (int i = 0; i < n; ++i) {
        const double* arow = a.row_ptr(i);
        double* orow = out.row_ptr(i);
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) {
                continue;
            }
            const double* brow = b.row_ptr(p);
            for (int j = 0; j < m; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
    check_finite(out, "matmul result");
    return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
    require(a.same_shape(b), "add shape mismatch: " + shape_of(a) + " vs " + shape_of(b));
    Matrix out = a;
    const double* bp = b.data();
    double* op = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        op[i] += bp[i];
    }
    check_finite(out, "add result");
    return out;
}

Matrix sub(const Matrix& a, const Matrix& b) {
    require(a.same_shape(b), "sub shape mismatch: " + shape_of(a) + " vs " + shape_of(b));
    Matrix out = a;
    const double* bp = b.data();
    double* op = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        op[i] -= bp[i];
    }
    check_finite(out, "sub result");
    return out;
}

Matrix scale(const Matrix& a, double s) {
    Matrix out = a;
    double* op = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        op[i] *= s;
    }
    check_finite(out, "scale result");
    return out;
}

Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (int i = 0; i < a.rows(); ++i) {
        for (int j = 0; j < a.cols(); ++j) {
            out(j, i) = a(i, j);
        }
    }
    return out;
}

double l1(const Matrix& m) {
    double s = 0.0;
    const double* p = m.data();
    for (std::size_t i = 0; i < m.size(); ++i) {
        s += std::fabs(p[i]);
    }
    return s;
}

double inner(const Matrix& a, const Matrix& b) {
    require(a.same_shape(b), "inner shape mismatch: " + shape_of(a) + " vs " + shape_of(b));
    double s = 0.0;
    const double* ap = a.data();
    const double* bp = b.data();
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += ap[i] * bp[i];
    }
    return s;
}

double frobenius_norm(const Matrix& m) {
    return std::sqrt(inner(m, m));
}

} // namespace gradot
