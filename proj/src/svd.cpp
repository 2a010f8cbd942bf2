#include "gradot/svd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gradot/errors.hpp"

namespace gradot {

namespace {

constexpr int kMaxSweeps = 64;
constexpr double kOrthTol = 1e-15;
constexpr double kSignTol = 1e-12;

double col_dot(const Matrix& a, int p, int q) {
    double s = 0.0;
    for (int i = 0; i < a.rows(); ++i) {
        s += a(i, p) * a(i, q);
    }
    return s;
}

void rotate_cols(Matrix& a, int p, int q, double c, double s) {
    for (int i = 0; i < a.rows(); ++i) {
        const double ap = a(i, p);
        const double aq = a(i, q);
        a(i, p) = c * ap - s * aq;
        a(i, q) = s * ap + c * aq;
    }
}

// Core one-sided Jacobi on a tall matrix (rows >= cols). Returns
// (u: rows x cols, sigma: cols, v: cols x cols) with a = u diag(sigma) v^T.
void jacobi_tall(Matrix a, Matrix& u, std::vector<double>& sigma, Matrix& v) {
    const int n = a.cols();
    v = Matrix::identity(n);

    bool converged = false;
    for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
        converged = true;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double alpha = col_dot(a, p, p);
                const double beta = col_dot(a, q, q);
                const double gamma = col_dot(a, p, q);
                if (alpha == 0.0 || beta == 0.0) {
                    continue;
                }
                if (std::fabs(gamma) <= kOrthTol * std::sqrt(alpha * beta)) {
                    continue;
                }
                converged = false;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = ((zeta >= 0.0) ? 1.0 : -1.0) /
                                 (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                rotate_cols(a, p, q, c, s);
                rotate_cols(v, p, q, c, s);
            }
        }
    }
    if (!converged) {
        throw NumericalError("svd failed to converge after " +
                             std::to_string(kMaxSweeps) + " Jacobi sweeps on a " +
                             std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                             " matrix");
    }

    sigma.assign(n, 0.0);
    double sigma_max = 0.0;
    for (int j = 0; j < n; ++j) {
        sigma[j] = std::sqrt(col_dot(a, j, j));
        sigma_max = std::max(sigma_max, sigma[j]);
    }

    // Sort descending; ties keep the lower original index first.
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int x, int y) { return sigma[x] > sigma[y]; });

    Matrix u_sorted(a.rows(), n);
    Matrix v_sorted(n, n);
    std::vector<double> sigma_sorted(n, 0.0);
    const double tiny = sigma_max * 1e-13;

    std::vector<int> deficient;
    for (int jj = 0; jj < n; ++jj) {
        const int j = order[jj];
        sigma_sorted[jj] = sigma[j];
        for (int i = 0; i < n; ++i) {
            v_sorted(i, jj) = v(i, j);
        }
        if (sigma[j] > tiny && sigma[j] > 0.0) {
            for (int i = 0; i < a.rows(); ++i) {
                u_sorted(i, jj) = a(i, j) / sigma[j];
            }
        } else {
            deficient.push_back(jj);
        }
    }

    // Complete zero/near-zero columns of u to an orthonormal basis so the
    // factor invariants hold on rank-deficient inputs. Deterministic
    // Gram-Schmidt against standard basis candidates.
    if (!deficient.empty()) {
        int candidate = 0;
        for (int jj : deficient) {
            std::vector<double> col(static_cast<std::size_t>(a.rows()), 0.0);
            for (; candidate <= a.rows(); ++candidate) {
                if (candidate == a.rows()) {
                    throw NumericalError("svd basis completion exhausted candidates");
                }
                std::fill(col.begin(), col.end(), 0.0);
                col[static_cast<std::size_t>(candidate)] = 1.0;
                // Project out every built column; unbuilt ones are still zero.
                for (int k = 0; k < n; ++k) {
                    double d = 0.0;
                    for (int i = 0; i < a.rows(); ++i) {
                        d += col[static_cast<std::size_t>(i)] * u_sorted(i, k);
                    }
                    for (int i = 0; i < a.rows(); ++i) {
                        col[static_cast<std::size_t>(i)] -= d * u_sorted(i, k);
                    }
                }
                double nrm = 0.0;
                for (double x : col) {
                    nrm += x * x;
                }
                nrm = std::sqrt(nrm);
                if (nrm > 0.5) {
                    for (int i = 0; i < a.rows(); ++i) {
                        u_sorted(i, jj) = col[static_cast<std::size_t>(i)] / nrm;
                    }
                    ++candidate;
                    break;
                }
            }
        }
    }

    u = std::move(u_sorted);
    v = std::move(v_sorted);
    sigma = std::move(sigma_sorted);
}

void apply_sign_convention(Matrix& u, Matrix& vt) {
    for (int k = 0; k < u.cols(); ++k) {
        double lead = 0.0;
        for (int i = 0; i < u.rows(); ++i) {
            if (std::fabs(u(i, k)) > kSignTol) {
                lead = u(i, k);
                break;
            }
        }
        if (lead < 0.0) {
            for (int i = 0; i < u.rows(); ++i) {
                u(i, k) = -u(i, k);
            }
            for (int j = 0; j < vt.cols(); ++j) {
                vt(k, j) = -vt(k, j);
            }
        }
    }
}

} // namespace

SvdFactors svd(const Matrix& m) {
    if (m.rows() < 1 || m.cols() < 1) {
        throw ShapeError("svd requires at least a 1x1 matrix");
    }
    check_finite(m, "svd input");

    SvdFactors f;
    if (m.rows() >= m.cols()) {
        Matrix u;
        Matrix v;
        std::vector<double> sigma;
        jacobi_tall(m, u, sigma, v);
        f.u = std::move(u);
        f.sigma = std::move(sigma);
        f.vt = transpose(v);
    } else {
        // m = (v sigma u^T)^T of the transposed problem.
        Matrix u;
        Matrix v;
        std::vector<double> sigma;
        jacobi_tall(transpose(m), u, sigma, v);
        f.u = std::move(v);
        f.sigma = std::move(sigma);
        f.vt = transpose(u);
    }
    apply_sign_convention(f.u, f.vt);
    check_finite(f.u, "svd u factor");
    check_finite(f.vt, "svd vt factor");
    return f;
}

Matrix rank1_component(const SvdFactors& f, int k) {
    if (k < 0 || k >= f.rank_count()) {
        throw ShapeError("rank1_component index " + std::to_string(k) +
                         " out of range for " + std::to_string(f.rank_count()) + " ranks");
    }
    Matrix out(f.u.rows(), f.vt.cols());
    const double s = f.sigma[static_cast<std::size_t>(k)];
    if (s == 0.0) {
        return out;
    }
    for (int i = 0; i < out.rows(); ++i) {
        const double us = f.u(i, k) * s;
        for (int j = 0; j < out.cols(); ++j) {
            out(i, j) = us * f.vt(k, j);
        }
    }
    return out;
}

} // namespace gradot
