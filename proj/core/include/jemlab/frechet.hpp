#pragma once

#include <cstddef>
#include <vector>

namespace jemlab {

// Row-major dense symmetric matrix helpers used by the feature-space
// Fréchet distance. Double precision throughout.

// Jacobi eigendecomposition of a symmetric matrix A (n x n). Returns
// eigenvalues ascending and the matching eigenvectors as columns of V.
void jacobi_eigh(const std::vector<double>& a, std::size_t n, std::vector<double>& eigenvalues,
                 std::vector<double>& eigenvectors);

// Symmetric PSD square root via eigendecomposition; negative eigenvalues are
// clipped at 0.
std::vector<double> sym_sqrt(const std::vector<double>& a, std::size_t n);

// ||mu1-mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)); the cross term is computed
// through the symmetric form sqrt(S1)^T S2 sqrt(S1). Covariances get a
// +1e-6 I ridge so degenerate inputs stay well-posed.
double frechet_gaussian(const std::vector<double>& mu1, const std::vector<double>& cov1,
                        const std::vector<double>& mu2, const std::vector<double>& cov2,
                        std::size_t dim);

// Unbiased mean/covariance of rows (count x dim, row-major).
void mean_and_covariance(const std::vector<double>& rows, std::size_t count, std::size_t dim,
                         std::vector<double>& mean, std::vector<double>& cov);

}  // namespace jemlab
