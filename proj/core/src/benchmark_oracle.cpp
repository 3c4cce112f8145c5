#include "bm2/benchmark_oracle.hpp"

#include "bm2/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace bm2 {
namespace {

constexpr double kLog2Pi = 1.8378770664093453;

void require_pd(const GaussianSpec& g, const char* what) {
  g.validate();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(g.cov);
  if (!(eig.eigenvalues().minCoeff() > 0.0)) {
    std::ostringstream msg;
    msg << what << ": covariance is singular (smallest eigenvalue " << eig.eigenvalues().minCoeff() << ")";
    throw InvalidArgument(msg.str());
  }
}

bool is_diagonal(const Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (i != j && m(i, j) != 0.0) return false;
    }
  }
  return true;
}

double log_sum_exp(const std::vector<double>& v) {
  const double top = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(top)) return top;
  double s = 0.0;
  for (double x : v) s += std::exp(x - top);
  return top + std::log(s);
}

/// log N(x; m, diag(var)).
double log_normal_diag(const Vector& x, const Vector& m, const Vector& var) {
  double out = 0.0;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    const double r = x[j] - m[j];
    out -= 0.5 * (kLog2Pi + std::log(var[j]) + r * r / var[j]);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// Gaussian instance

GaussianSbInstance::GaussianSbInstance(GaussianSpec psi0, GaussianSpec psi1, RefDynamics dyn)
    : psi0_(std::move(psi0)), psi1_(std::move(psi1)), dyn_(std::move(dyn)) {
  require_pd(psi0_, "gaussian_sb_coupling (psi0)");
  require_pd(psi1_, "gaussian_sb_coupling (psi1)");
  if (psi0_.dim() != psi1_.dim()) throw InvalidArgument("gaussian_sb_coupling: marginal dimensions differ");
  const Eigen::Index d = psi0_.dim();
  const double s2 = dyn_.sigma * dyn_.sigma;
  const Matrix id = Matrix::Identity(d, d);

  const Matrix root0 = linalg::sqrtm_psd(psi0_.cov);
  const Matrix inv_root0 = linalg::inv_sqrtm_pd(psi0_.cov);
  const Matrix inner = linalg::symmetrize(4.0 * root0 * psi1_.cov * root0 + s2 * s2 * id);
  cross_ = 0.5 * root0 * linalg::sqrtm_psd(inner) * inv_root0 - 0.5 * s2 * id;

  joint_.mean.resize(2 * d);
  joint_.mean << psi0_.mean, psi1_.mean;
  joint_.cov.resize(2 * d, 2 * d);
  joint_.cov << psi0_.cov, cross_, cross_.transpose(), psi1_.cov;
  joint_.cov = linalg::symmetrize(joint_.cov);

  const Eigen::LDLT<Matrix> p0(psi0_.cov);
  const Eigen::LDLT<Matrix> p1(psi1_.cov);
  fwd_gain_ = p0.solve(cross_).transpose();
  fwd_offset_ = psi1_.mean - fwd_gain_ * psi0_.mean;
  fwd_cov_ = linalg::symmetrize(psi1_.cov - cross_.transpose() * p0.solve(cross_));
  bwd_gain_ = p1.solve(cross_.transpose()).transpose();
  bwd_offset_ = psi0_.mean - bwd_gain_ * psi1_.mean;
  bwd_cov_ = linalg::symmetrize(psi0_.cov - cross_ * p1.solve(cross_.transpose()));
  fwd_factor_ = psd_factor(fwd_cov_);

  Eigen::SelfAdjointEigenSolver<Matrix> eig(fwd_cov_);
  if (!(eig.eigenvalues().minCoeff() > 0.0)) {
    throw NumericalError("gaussian_sb_coupling: conditional covariance is not positive definite");
  }
  const Matrix v_inv = eig.eigenvectors() * eig.eigenvalues().cwiseInverse().asDiagonal() * eig.eigenvectors().transpose();
  lambda_ = linalg::symmetrize(v_inv - id / s2);
  eta_ = v_inv * fwd_offset_;
}

Samples GaussianSbInstance::sample_psi0(Eigen::Index n, RngStream& rng) const { return gaussian_sample(psi0_, n, rng); }

Samples GaussianSbInstance::sample_psi1(Eigen::Index n, RngStream& rng) const { return gaussian_sample(psi1_, n, rng); }

EndpointPairs GaussianSbInstance::sample_coupling(Eigen::Index n, RngStream& rng) const {
  EndpointPairs out;
  out.x0 = gaussian_sample(psi0_, n, rng);
  out.x1 = sample_conditional(out.x0, rng);
  return out;
}

Samples GaussianSbInstance::sample_conditional(const Samples& x0, RngStream& rng) const {
  const Eigen::Index d = psi0_.dim();
  if (x0.cols() != d) throw InvalidArgument("sample_conditional: dimension mismatch");
  Samples x1(x0.rows(), d);
  Vector xi(d);
  for (Eigen::Index i = 0; i < x0.rows(); ++i) {
    for (Eigen::Index j = 0; j < d; ++j) xi[j] = rng.normal();
    x1.row(i) = (fwd_gain_ * x0.row(i).transpose() + fwd_offset_ + fwd_factor_ * xi).transpose();
  }
  return x1;
}

Samples GaussianSbInstance::drift(const Samples& x, double t) const {
  if (!(t >= 0.0 && t < 1.0)) throw InvalidArgument("sb_optimal_drift: requires t in [0, 1)");
  if (x.cols() != dim()) throw InvalidArgument("sb_optimal_drift: dimension mismatch");
  const double tail = dyn_.schedule.integral(t, 1.0);
  const double tau = dyn_.sigma * dyn_.sigma * tail;
  const Eigen::Index d = x.cols();
  const Matrix precision = lambda_ + Matrix::Identity(d, d) / tau;
  const Eigen::LDLT<Matrix> solver(precision);
  const double rate = dyn_.schedule.beta(t) / tail;
  Samples out(x.rows(), d);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Vector xi = x.row(i).transpose();
    const Vector e1 = solver.solve(eta_ + xi / tau);
    out.row(i) = (rate * (e1 - xi)).transpose();
  }
  return out;
}

GaussianSpec GaussianSbInstance::conditional_moments(const Vector& x0) const {
  return GaussianSpec{fwd_gain_ * x0 + fwd_offset_, fwd_cov_};
}

GaussianSbInstance gaussian_sb_coupling(const GaussianSpec& psi0, const GaussianSpec& psi1, double epsilon) {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw InvalidArgument("gaussian_sb_coupling: epsilon must be positive");
  return GaussianSbInstance(psi0, psi1, RefDynamics(std::sqrt(epsilon)));
}

GaussianSbInstance trivial_sb_instance(int dim, double sigma) {
  if (dim < 1) throw InvalidArgument("trivial_sb_instance: dim must be >= 1");
  const Vector zero = Vector::Zero(dim);
  return GaussianSbInstance(GaussianSpec::isotropic(zero, 1.0), GaussianSpec::isotropic(zero, 1.0 + sigma * sigma),
                            RefDynamics(sigma));
}

// ---------------------------------------------------------------------------------------------
// Mixture-potential instance

MixtureSbInstance::MixtureSbInstance(GaussianSpec psi0, MixtureSpec potential, RefDynamics dyn)
    : psi0_(std::move(psi0)), potential_(std::move(potential)), dyn_(std::move(dyn)) {
  psi0_.validate();
  potential_.validate();
  if (psi0_.mean.cwiseAbs().maxCoeff() != 0.0) throw InvalidArgument("mixture_sb_build: psi0 must be centered");
  if (!is_diagonal(psi0_.cov)) throw InvalidArgument("mixture_sb_build: psi0 covariance must be diagonal");
  if (potential_.dim() != psi0_.dim()) throw InvalidArgument("mixture_sb_build: potential dimension mismatch");
  for (std::size_t k = 0; k < potential_.components.size(); ++k) {
    const auto& c = potential_.components[k];
    if (!is_diagonal(c.cov)) throw InvalidArgument("mixture_sb_build: potential covariances must be diagonal");
    if (!(c.cov.diagonal().minCoeff() > 0.0)) {
      throw InvalidArgument("mixture_sb_build: potential covariances must be positive definite");
    }
    const double w = potential_.weights[k];
    log_w_.push_back(w > 0.0 ? std::log(w) : -std::numeric_limits<double>::infinity());
    pot_var_.push_back(c.cov.diagonal());
  }
  total_variance_ = compute_total_variance();
}

MixtureSbInstance::Conditional MixtureSbInstance::conditional(const Vector& x0) const {
  const double s2 = dyn_.sigma * dyn_.sigma;
  const std::size_t k_count = log_w_.size();
  Conditional out;
  out.log_weights.resize(k_count);
  out.means.resize(k_count);
  out.variances.resize(k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    const Vector& m = potential_.components[k].mean;
    const Vector& s = pot_var_[k];
    out.log_weights[k] = log_w_[k] + log_normal_diag(x0, m, s.array() + s2);
    const Vector precision = s.cwiseInverse().array() + 1.0 / s2;
    out.variances[k] = precision.cwiseInverse();
    out.means[k] = (m.cwiseQuotient(s) + x0 / s2).cwiseQuotient(precision);
  }
  const double norm = log_sum_exp(out.log_weights);
  if (!std::isfinite(norm)) throw NumericalError("mixture conditional: weights not normalizable");
  for (double& lw : out.log_weights) lw -= norm;
  return out;
}

GaussianSpec MixtureSbInstance::conditional_moments(const Vector& x0) const {
  const Conditional c = conditional(x0);
  const Eigen::Index d = x0.size();
  Vector mean = Vector::Zero(d);
  Matrix second = Matrix::Zero(d, d);
  for (std::size_t k = 0; k < c.means.size(); ++k) {
    const double p = std::exp(c.log_weights[k]);
    mean += p * c.means[k];
    second += p * (Matrix(c.variances[k].asDiagonal()) + c.means[k] * c.means[k].transpose());
  }
  return GaussianSpec{mean, linalg::symmetrize(second - mean * mean.transpose())};
}

Samples MixtureSbInstance::sample_psi0(Eigen::Index n, RngStream& rng) const { return gaussian_sample(psi0_, n, rng); }

Samples MixtureSbInstance::sample_psi1(Eigen::Index n, RngStream& rng) const { return sample_coupling(n, rng).x1; }

EndpointPairs MixtureSbInstance::sample_coupling(Eigen::Index n, RngStream& rng) const {
  EndpointPairs out;
  out.x0 = gaussian_sample(psi0_, n, rng);
  out.x1 = sample_conditional(out.x0, rng);
  return out;
}

Samples MixtureSbInstance::sample_conditional(const Samples& x0, RngStream& rng) const {
  const Eigen::Index d = psi0_.dim();
  if (x0.cols() != d) throw InvalidArgument("sample_conditional: dimension mismatch");
  Samples x1(x0.rows(), d);
  for (Eigen::Index i = 0; i < x0.rows(); ++i) {
    const Conditional c = conditional(x0.row(i).transpose());
    const double u = rng.uniform();
    std::size_t pick = c.means.size() - 1;
    double acc = 0.0;
    for (std::size_t k = 0; k < c.means.size(); ++k) {
      acc += std::exp(c.log_weights[k]);
      if (u < acc) {
        pick = k;
        break;
      }
    }
    for (Eigen::Index j = 0; j < d; ++j) x1(i, j) = c.means[pick][j] + std::sqrt(c.variances[pick][j]) * rng.normal();
  }
  return x1;
}

double MixtureSbInstance::log_h(const Vector& x, double t) const {
  if (!(t >= 0.0 && t <= 1.0)) throw InvalidArgument("log_h: t outside [0, 1]");
  const double tau = dyn_.sigma * dyn_.sigma * dyn_.schedule.integral(t, 1.0);
  std::vector<double> terms(log_w_.size());
  for (std::size_t k = 0; k < log_w_.size(); ++k) {
    terms[k] = log_w_[k] + log_normal_diag(x, potential_.components[k].mean, pot_var_[k].array() + tau);
  }
  return log_sum_exp(terms);
}

Samples MixtureSbInstance::drift(const Samples& x, double t) const {
  if (!(t >= 0.0 && t < 1.0)) throw InvalidArgument("sb_optimal_drift: requires t in [0, 1)");
  if (x.cols() != dim()) throw InvalidArgument("sb_optimal_drift: dimension mismatch");
  const double tau = dyn_.sigma * dyn_.sigma * dyn_.schedule.integral(t, 1.0);
  const double scale = dyn_.sigma * dyn_.sigma * dyn_.schedule.beta(t);
  const std::size_t k_count = log_w_.size();
  std::vector<Vector> var(k_count);
  for (std::size_t k = 0; k < k_count; ++k) var[k] = pot_var_[k].array() + tau;
  std::vector<double> terms(k_count);
  Samples out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Vector xi = x.row(i).transpose();
    for (std::size_t k = 0; k < k_count; ++k) {
      terms[k] = log_w_[k] + log_normal_diag(xi, potential_.components[k].mean, var[k]);
    }
    const double norm = log_sum_exp(terms);
    Vector grad = Vector::Zero(xi.size());
    for (std::size_t k = 0; k < k_count; ++k) {
      const double r = std::exp(terms[k] - norm);
      grad += r * (potential_.components[k].mean - xi).cwiseQuotient(var[k]);
    }
    out.row(i) = (scale * grad).transpose();
  }
  return out;
}

double MixtureSbInstance::compute_total_variance() const {
  // Law of total variance over x0 ~ psi0.
  const Eigen::Index d = psi0_.dim();
  const Vector sd0 = psi0_.cov.diagonal().cwiseSqrt();
  Vector mean_sum = Vector::Zero(d);
  Matrix mean_outer = Matrix::Zero(d, d);
  double within = 0.0;
  double mass = 0.0;
  auto accumulate = [&](const Vector& x0, double w) {
    const GaussianSpec m = conditional_moments(x0);
    mean_sum += w * m.mean;
    mean_outer += w * m.mean * m.mean.transpose();
    within += w * m.cov.trace();
    mass += w;
  };
  if (d <= 2) {
    Vector nodes, weights;
    linalg::gauss_hermite_normal(64, nodes, weights);
    Vector x0(d);
    if (d == 1) {
      for (Eigen::Index a = 0; a < nodes.size(); ++a) {
        x0[0] = sd0[0] * nodes[a];
        accumulate(x0, weights[a]);
      }
    } else {
      for (Eigen::Index a = 0; a < nodes.size(); ++a) {
        for (Eigen::Index b = 0; b < nodes.size(); ++b) {
          x0[0] = sd0[0] * nodes[a];
          x0[1] = sd0[1] * nodes[b];
          accumulate(x0, weights[a] * weights[b]);
        }
      }
    }
  } else {
    RngStream rng(0x5eedULL, "total-variance");
    const Samples x0 = gaussian_sample(psi0_, 200000, rng);
    for (Eigen::Index i = 0; i < x0.rows(); ++i) accumulate(x0.row(i).transpose(), 1.0);
  }
  mean_sum /= mass;
  mean_outer /= mass;
  return within / mass + (mean_outer - mean_sum * mean_sum.transpose()).trace();
}

MixtureSbInstance mixture_sb_build(const GaussianSpec& psi0, const MixtureSpec& v, double sigma) {
  return MixtureSbInstance(psi0, v, RefDynamics(sigma));
}

MixtureSpec pentagon_potential(int dim, double radius, double variance, int modes) {
  if (dim < 2) throw InvalidArgument("pentagon_potential: needs dim >= 2");
  if (modes < 1 || !(variance > 0.0)) throw InvalidArgument("pentagon_potential: bad mode count or variance");
  MixtureSpec spec;
  for (int k = 0; k < modes; ++k) {
    const double angle = 2.0 * std::numbers::pi * k / modes;
    Vector m = Vector::Zero(dim);
    m[0] = radius * std::cos(angle);
    m[1] = radius * std::sin(angle);
    spec.weights.push_back(1.0 / modes);
    spec.components.push_back(GaussianSpec::isotropic(m, variance));
  }
  return spec;
}

PathPoints sample_sb_path_points(const SbInstance& inst, Eigen::Index n, double t, RngStream& rng) {
  if (!(t >= 0.0 && t <= 1.0)) throw InvalidArgument("sample_sb_path_points: t outside [0, 1]");
  EndpointPairs pairs = inst.sample_coupling(n, rng);
  const std::vector<double> times(static_cast<std::size_t>(n), t);
  PathPoints out;
  out.xt = bridge_sample_batch(inst.dynamics(), pairs.x0, pairs.x1, times, rng);
  out.x0 = std::move(pairs.x0);
  out.x1 = std::move(pairs.x1);
  return out;
}

// ---------------------------------------------------------------------------------------------
// Grid Sinkhorn

GridCoupling grid_sinkhorn(const Vector& mu, const Vector& nu, const Matrix& cost, double epsilon, int max_iters,
                           double tol) {
  if (cost.rows() != mu.size() || cost.cols() != nu.size()) throw InvalidArgument("grid_sinkhorn: shape mismatch");
  if (!(epsilon > 0.0)) throw InvalidArgument("grid_sinkhorn: epsilon must be positive");
  if (!cost.allFinite()) throw InvalidArgument("grid_sinkhorn: cost must be finite");
  if (mu.minCoeff() < 0.0 || nu.minCoeff() < 0.0 || std::abs(mu.sum() - 1.0) > 1e-9 || std::abs(nu.sum() - 1.0) > 1e-9) {
    throw InvalidArgument("grid_sinkhorn: histograms must be nonnegative and normalized");
  }
  const Eigen::Index n = mu.size();
  const Eigen::Index m = nu.size();
  Vector f = Vector::Zero(n);
  Vector g = Vector::Zero(m);
  Matrix kernel(n, m);
  auto rebuild = [&]() {
    for (Eigen::Index j = 0; j < m; ++j) {
      for (Eigen::Index i = 0; i < n; ++i) kernel(i, j) = std::exp((f[i] + g[j] - cost(i, j)) / epsilon);
    }
  };
  // Exact log-domain update, used when the scaled kernel under- or overflows.
  auto log_update = [&]() {
    std::vector<double> terms(static_cast<std::size_t>(m));
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < m; ++j) terms[static_cast<std::size_t>(j)] = (g[j] - cost(i, j)) / epsilon;
      f[i] = mu[i] > 0.0 ? epsilon * (std::log(mu[i]) - log_sum_exp(terms)) : -1e300;
    }
    terms.resize(static_cast<std::size_t>(n));
    for (Eigen::Index j = 0; j < m; ++j) {
      for (Eigen::Index i = 0; i < n; ++i) terms[static_cast<std::size_t>(i)] = (f[i] - cost(i, j)) / epsilon;
      g[j] = nu[j] > 0.0 ? epsilon * (std::log(nu[j]) - log_sum_exp(terms)) : -1e300;
    }
  };
  rebuild();
  Vector u = Vector::Ones(n);
  Vector v = Vector::Ones(m);
  GridCoupling out;
  constexpr double kAbsorb = 1e30;
  for (int it = 1; it <= max_iters; ++it) {
    u = mu.cwiseQuotient(kernel * v);
    v = nu.cwiseQuotient(kernel.transpose() * u);
    const bool finite = u.allFinite() && v.allFinite();
    if (!finite || u.maxCoeff() > kAbsorb || v.maxCoeff() > kAbsorb) {
      if (finite) {
        for (Eigen::Index i = 0; i < n; ++i) f[i] += mu[i] > 0.0 ? epsilon * std::log(u[i]) : 0.0;
        for (Eigen::Index j = 0; j < m; ++j) g[j] += nu[j] > 0.0 ? epsilon * std::log(v[j]) : 0.0;
      } else {
        log_update();
      }
      rebuild();
      u.setOnes();
      v.setOnes();
    }
    out.iterations = it;
    if (it % 10 == 0 || it == max_iters) {
      const Vector rows = u.cwiseProduct(kernel * v);
      const Vector cols = v.cwiseProduct(kernel.transpose() * u);
      out.marginal_error = (rows - mu).cwiseAbs().sum() + (cols - nu).cwiseAbs().sum();
      if (out.marginal_error < tol) {
        out.converged = true;
        break;
      }
    }
  }
  out.plan = u.asDiagonal() * kernel * v.asDiagonal();
  out.mu = mu;
  out.nu = nu;
  return out;
}

GridCoupling grid_sinkhorn_gaussian_1d(const GaussianSpec& psi0, const GaussianSpec& psi1, double epsilon, int points,
                                       double lo, double hi, int max_iters, double tol) {
  if (psi0.dim() != 1 || psi1.dim() != 1) throw InvalidArgument("grid_sinkhorn_gaussian_1d: marginals must be 1-D");
  if (points < 2 || !(hi > lo)) throw InvalidArgument("grid_sinkhorn_gaussian_1d: bad grid");
  const Vector grid = Vector::LinSpaced(points, lo, hi);
  auto histogram = [&](const GaussianSpec& g) {
    Vector h(points);
    for (int i = 0; i < points; ++i) {
      const double r = grid[i] - g.mean[0];
      h[i] = std::exp(-0.5 * r * r / g.cov(0, 0));
    }
    return Vector(h / h.sum());
  };
  Matrix cost(points, points);
  for (int i = 0; i < points; ++i) {
    for (int j = 0; j < points; ++j) cost(i, j) = 0.5 * (grid[i] - grid[j]) * (grid[i] - grid[j]);
  }
  GridCoupling out = grid_sinkhorn(histogram(psi0), histogram(psi1), cost, epsilon, max_iters, tol);
  out.x0_grid = grid;
  out.x1_grid = grid;
  return out;
}

GridMoments grid_moments(const GridCoupling& c) {
  if (c.x0_grid.size() != c.plan.rows() || c.x1_grid.size() != c.plan.cols()) {
    throw InvalidArgument("grid_moments: coupling has no support grids");
  }
  GridMoments m;
  const Vector p0 = c.plan.rowwise().sum();
  const Vector p1 = c.plan.colwise().sum().transpose();
  const double mass = p0.sum();
  m.mean0 = p0.dot(c.x0_grid) / mass;
  m.mean1 = p1.dot(c.x1_grid) / mass;
  m.var0 = p0.dot((c.x0_grid.array() - m.mean0).square().matrix()) / mass;
  m.var1 = p1.dot((c.x1_grid.array() - m.mean1).square().matrix()) / mass;
  const Vector d0 = c.x0_grid.array() - m.mean0;
  const Vector d1 = c.x1_grid.array() - m.mean1;
  m.cov = d0.dot(c.plan * d1) / mass;
  return m;
}

}  // namespace bm2
