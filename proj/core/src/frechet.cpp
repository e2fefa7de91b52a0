#include "jemlab/frechet.hpp"

#include <algorithm>
#include <cmath>

#include "jemlab/errors.hpp"

namespace jemlab {

void jacobi_eigh(const std::vector<double>& a, std::size_t n, std::vector<double>& eigenvalues,
                 std::vector<double>& eigenvectors) {
    if (a.size() != n * n) throw ValueError("jacobi_eigh: matrix size mismatch");
    std::vector<double> m = a;
    std::vector<double>& v = eigenvectors;
    v.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;

    // Cyclic Jacobi sweeps; n stays small (feature dims), so O(n^3) per sweep
    // is fine.
    const int max_sweeps = 64;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += m[p * n + q] * m[p * n + q];
        if (off < 1e-26) break;
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = m[p * n + q];
                if (apq == 0.0) continue;
                const double app = m[p * n + p], aqq = m[q * n + q];
                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0 ? 1.0 : -1.0) /
                                 (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double mkp = m[k * n + p], mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double mpk = m[p * n + k], mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v[k * n + p], vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
    }
    eigenvalues.resize(n);
    for (std::size_t i = 0; i < n; ++i) eigenvalues[i] = m[i * n + i];

    // Sort ascending, permuting eigenvector columns along.
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t x, std::size_t y) { return eigenvalues[x] < eigenvalues[y]; });
    std::vector<double> ev(n), vv(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        ev[i] = eigenvalues[order[i]];
        for (std::size_t k = 0; k < n; ++k) vv[k * n + i] = v[k * n + order[i]];
    }
    eigenvalues = std::move(ev);
    eigenvectors = std::move(vv);
}

std::vector<double> sym_sqrt(const std::vector<double>& a, std::size_t n) {
    std::vector<double> evals, evecs;
    jacobi_eigh(a, n, evals, evecs);
    for (auto& e : evals) e = std::sqrt(std::max(e, 0.0));
    // V diag(sqrt(e)) V^T
    std::vector<double> out(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < n; ++k)
                s += evecs[i * n + k] * evals[k] * evecs[j * n + k];
            out[i * n + j] = s;
        }
    return out;
}

namespace {

std::vector<double> matmul_dense(const std::vector<double>& a, const std::vector<double>& b,
                                 std::size_t n) {
    std::vector<double> c(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < n; ++k) {
            const double av = a[i * n + k];
            for (std::size_t j = 0; j < n; ++j) c[i * n + j] += av * b[k * n + j];
        }
    return c;
}

}  // namespace

double frechet_gaussian(const std::vector<double>& mu1, const std::vector<double>& cov1,
                        const std::vector<double>& mu2, const std::vector<double>& cov2,
                        std::size_t dim) {
    if (mu1.size() != dim || mu2.size() != dim || cov1.size() != dim * dim ||
        cov2.size() != dim * dim)
        throw ValueError("frechet_gaussian: dimension mismatch");
    std::vector<double> s1 = cov1, s2 = cov2;
    for (std::size_t i = 0; i < dim; ++i) {
        s1[i * dim + i] += 1e-6;
        s2[i * dim + i] += 1e-6;
    }
    double mean_term = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
        const double d = mu1[i] - mu2[i];
        mean_term += d * d;
    }
    double tr1 = 0.0, tr2 = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
        tr1 += s1[i * dim + i];
        tr2 += s2[i * dim + i];
    }
    // tr sqrt(S1 S2) = sum sqrt(eig(R S2 R)) with R = sqrt(S1); the inner
    // matrix is symmetric PSD, so eigenvalue clipping at 0 applies cleanly.
    const std::vector<double> r = sym_sqrt(s1, dim);
    const std::vector<double> inner = matmul_dense(matmul_dense(r, s2, dim), r, dim);
    std::vector<double> evals, evecs;
    jacobi_eigh(inner, dim, evals, evecs);
    double tr_cross = 0.0;
    for (const double e : evals) tr_cross += std::sqrt(std::max(e, 0.0));
    return mean_term + tr1 + tr2 - 2.0 * tr_cross;
}

void mean_and_covariance(const std::vector<double>& rows, std::size_t count, std::size_t dim,
                         std::vector<double>& mean, std::vector<double>& cov) {
    if (rows.size() != count * dim) throw ValueError("mean_and_covariance: size mismatch");
    if (count < 2) throw ValueError("mean_and_covariance: need at least 2 rows");
    mean.assign(dim, 0.0);
    for (std::size_t i = 0; i < count; ++i)
        for (std::size_t j = 0; j < dim; ++j) mean[j] += rows[i * dim + j];
    for (auto& v : mean) v /= static_cast<double>(count);
    cov.assign(dim * dim, 0.0);
    for (std::size_t i = 0; i < count; ++i)
        for (std::size_t a = 0; a < dim; ++a) {
            const double da = rows[i * dim + a] - mean[a];
            for (std::size_t b = a; b < dim; ++b)
                cov[a * dim + b] += da * (rows[i * dim + b] - mean[b]);
        }
    for (std::size_t a = 0; a < dim; ++a)
        for (std::size_t b = a; b < dim; ++b) {
            cov[a * dim + b] /= static_cast<double>(count - 1);
            cov[b * dim + a] = cov[a * dim + b];
        }
}

}  // namespace jemlab
