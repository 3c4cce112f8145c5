#pragma once

#include "bm2/types.hpp"

namespace bm2::linalg {

/// Principal square root of a symmetric PSD matrix; eigenvalues clamped at 0.
Matrix sqrtm_psd(const Matrix& a);

/// Inverse square root of a symmetric positive-definite matrix.
/// Throws NumericalError when the smallest eigenvalue is not positive.
Matrix inv_sqrtm_pd(const Matrix& a);

/// Symmetrize (a + a^T) / 2.
inline Matrix symmetrize(const Matrix& a) { return 0.5 * (a + a.transpose()); }

/// Unbiased sample covariance of the rows of x; requires at least two rows.
Matrix sample_covariance(const Samples& x);

/// Unbiased sample cross-covariance between the rows of x and y (d_x x d_y).
Matrix sample_cross_covariance(const Samples& x, const Samples& y);

Vector column_mean(const Samples& x);

/// Gauss-Hermite nodes/weights for the weight function exp(-x^2/2) / sqrt(2 pi),
/// i.e. expectations under N(0, 1). Golub-Welsch.
void gauss_hermite_normal(int order, Vector& nodes, Vector& weights);

/// Gauss-Legendre nodes/weights on [a, b]. Golub-Welsch.
void gauss_legendre(int order, double a, double b, Vector& nodes, Vector& weights);

}  // namespace bm2::linalg
