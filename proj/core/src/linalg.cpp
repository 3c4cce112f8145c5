#include "bm2/linalg.hpp"

#include <cmath>

namespace bm2::linalg {

Matrix sqrtm_psd(const Matrix& a) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(a));
  const Vector root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

Matrix inv_sqrtm_pd(const Matrix& a) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(a));
  if (eig.eigenvalues().minCoeff() <= 0.0) throw NumericalError("inv_sqrtm_pd: matrix is not positive definite");
  const Vector inv_root = eig.eigenvalues().cwiseSqrt().cwiseInverse();
  return eig.eigenvectors() * inv_root.asDiagonal() * eig.eigenvectors().transpose();
}

Vector column_mean(const Samples& x) { return x.colwise().mean().transpose(); }

Matrix sample_cross_covariance(const Samples& x, const Samples& y) {
  if (x.rows() != y.rows()) throw InvalidArgument("sample_cross_covariance: row count mismatch");
  if (x.rows() < 2) throw InvalidArgument("sample_cross_covariance: need at least two samples");
  const Eigen::RowVectorXd mx = x.colwise().mean();
  const Eigen::RowVectorXd my = y.colwise().mean();
  const Matrix cx = x.rowwise() - mx;
  const Matrix cy = y.rowwise() - my;
  return cx.transpose() * cy / static_cast<double>(x.rows() - 1);
}

Matrix sample_covariance(const Samples& x) { return symmetrize(sample_cross_covariance(x, x)); }

void gauss_hermite_normal(int order, Vector& nodes, Vector& weights) {
  // Jacobi matrix of the probabilists' Hermite polynomials: off-diagonal sqrt(k).
  Matrix jacobi = Matrix::Zero(order, order);
  for (int k = 1; k < order; ++k) {
    jacobi(k, k - 1) = std::sqrt(static_cast<double>(k));
    jacobi(k - 1, k) = jacobi(k, k - 1);
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(jacobi);
  nodes = eig.eigenvalues();
  weights = eig.eigenvectors().row(0).transpose().array().square();
}

void gauss_legendre(int order, double a, double b, Vector& nodes, Vector& weights) {
  Matrix jacobi = Matrix::Zero(order, order);
  for (int k = 1; k < order; ++k) {
    const double kk = static_cast<double>(k);
    jacobi(k, k - 1) = kk / std::sqrt(4.0 * kk * kk - 1.0);
    jacobi(k - 1, k) = jacobi(k, k - 1);
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(jacobi);
  const double half = 0.5 * (b - a);
  nodes = (eig.eigenvalues().array() * half + 0.5 * (a + b)).matrix();
  weights = (2.0 * eig.eigenvectors().row(0).transpose().array().square() * half).matrix();
}

}  // namespace bm2::linalg
