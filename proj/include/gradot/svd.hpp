#pragma once

#include <vector>

#include "gradot/matrix.hpp"

namespace gradot {

// Full SVD m = u * diag(sigma) * vt with r_full = min(rows, cols).
// sigma is non-increasing; u columns and vt rows are orthonormal.
// Sign convention: the first entry of each left singular vector whose
// magnitude exceeds 1e-12 is non-negative, so component identities are
// reproducible across runs.
struct SvdFactors {
    Matrix u;                  // d_o x r_full
    std::vector<double> sigma; // r_full, descending
    Matrix vt;                 // r_full x d_i

    int rank_count() const { return static_cast<int>(sigma.size()); }
};

// One-sided Jacobi. Throws NumericalError when the rotation sweep cap is
// exceeded; callers that know a layer name wrap the error with it.
SvdFactors svd(const Matrix& m);

// sigma_k * u_k * v_k^T, shaped like the original matrix.
Matrix rank1_component(const SvdFactors& f, int k);

} // namespace gradot
