#pragma once

#include "bm2/ref_process.hpp"
#include "bm2/rng.hpp"
#include "bm2/types.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace bm2 {

/// Draw n samples.
using Sampler = std::function<Samples(Eigen::Index n, RngStream& rng)>;

/// Exact (x0, x1) draws from a coupling.
struct EndpointPairs {
  Samples x0;
  Samples x1;
};

/// An analytic Schroedinger bridge: marginals, exact static coupling and exact forward drift.
class SbInstance {
 public:
  virtual ~SbInstance() = default;

  [[nodiscard]] virtual int dim() const = 0;
  [[nodiscard]] virtual const RefDynamics& dynamics() const = 0;

  virtual Samples sample_psi0(Eigen::Index n, RngStream& rng) const = 0;
  virtual Samples sample_psi1(Eigen::Index n, RngStream& rng) const = 0;
  virtual EndpointPairs sample_coupling(Eigen::Index n, RngStream& rng) const = 0;
  /// One draw from S_{1|0}(. | x0) per row.
  virtual Samples sample_conditional(const Samples& x0, RngStream& rng) const = 0;

  /// SB-optimal forward drift at a common time t < 1.
  [[nodiscard]] virtual Samples drift(const Samples& x, double t) const = 0;

  /// Mean and covariance of S_{1|0}(. | x0).
  [[nodiscard]] virtual GaussianSpec conditional_moments(const Vector& x0) const = 0;

  /// tr Cov_S(X1).
  [[nodiscard]] virtual double x1_total_variance() const = 0;
};

/// Gaussian marginals; coupling from the entropic-OT closed form with cost 1/2 |x0 - x1|^2
/// and regularization epsilon = sigma^2.
class GaussianSbInstance final : public SbInstance {
 public:
  GaussianSbInstance(GaussianSpec psi0, GaussianSpec psi1, RefDynamics dyn);

  [[nodiscard]] int dim() const override { return static_cast<int>(psi0_.dim()); }
  [[nodiscard]] const RefDynamics& dynamics() const override { return dyn_; }
  Samples sample_psi0(Eigen::Index n, RngStream& rng) const override;
  Samples sample_psi1(Eigen::Index n, RngStream& rng) const override;
  EndpointPairs sample_coupling(Eigen::Index n, RngStream& rng) const override;
  Samples sample_conditional(const Samples& x0, RngStream& rng) const override;
  [[nodiscard]] Samples drift(const Samples& x, double t) const override;
  [[nodiscard]] GaussianSpec conditional_moments(const Vector& x0) const override;
  [[nodiscard]] double x1_total_variance() const override { return psi1_.cov.trace(); }

  [[nodiscard]] const GaussianSpec& psi0() const { return psi0_; }
  [[nodiscard]] const GaussianSpec& psi1() const { return psi1_; }
  /// Joint law of (X0, X1) as a 2d-dimensional Gaussian.
  [[nodiscard]] const GaussianSpec& joint() const { return joint_; }
  /// Cov(X0, X1).
  [[nodiscard]] const Matrix& cross() const { return cross_; }

  /// X1 | X0 = x0 ~ N(fwd_gain x0 + fwd_offset, fwd_cov); the backward triple is the mirror.
  [[nodiscard]] const Matrix& fwd_gain() const { return fwd_gain_; }
  [[nodiscard]] const Vector& fwd_offset() const { return fwd_offset_; }
  [[nodiscard]] const Matrix& fwd_cov() const { return fwd_cov_; }
  [[nodiscard]] const Matrix& bwd_gain() const { return bwd_gain_; }
  [[nodiscard]] const Vector& bwd_offset() const { return bwd_offset_; }
  [[nodiscard]] const Matrix& bwd_cov() const { return bwd_cov_; }

 private:
  GaussianSpec psi0_;
  GaussianSpec psi1_;
  RefDynamics dyn_;
  GaussianSpec joint_;
  Matrix cross_;
  Matrix fwd_gain_, fwd_cov_, bwd_gain_, bwd_cov_;
  Vector fwd_offset_, bwd_offset_;
  Matrix fwd_factor_;
  // Terminal potential exp(-x' lambda x / 2 + eta' x).
  Matrix lambda_;
  Vector eta_;
};

/// Builds the Gaussian SB for the entropic-OT problem with regularization epsilon (sigma^2 = epsilon)
/// under the constant schedule.
GaussianSbInstance gaussian_sb_coupling(const GaussianSpec& psi0, const GaussianSpec& psi1, double epsilon);

/// S_{0,1}(x0, x1) = psi0(x0) S_{1|0}(x1 | x0) with S_{1|0} proportional to v(x1) r_{1|0}(x1 | x0),
/// v a Gaussian mixture with diagonal covariances. Psi1 is the x1-marginal.
class MixtureSbInstance final : public SbInstance {
 public:
  /// S_{1|0}(. | x0) as normalized log-weights with per-component mean and diagonal variance.
  struct Conditional {
    std::vector<double> log_weights;
    std::vector<Vector> means;
    std::vector<Vector> variances;
  };

  MixtureSbInstance(GaussianSpec psi0, MixtureSpec potential, RefDynamics dyn);

  [[nodiscard]] int dim() const override { return static_cast<int>(psi0_.dim()); }
  [[nodiscard]] const RefDynamics& dynamics() const override { return dyn_; }
  Samples sample_psi0(Eigen::Index n, RngStream& rng) const override;
  Samples sample_psi1(Eigen::Index n, RngStream& rng) const override;
  EndpointPairs sample_coupling(Eigen::Index n, RngStream& rng) const override;
  Samples sample_conditional(const Samples& x0, RngStream& rng) const override;
  [[nodiscard]] Samples drift(const Samples& x, double t) const override;
  [[nodiscard]] GaussianSpec conditional_moments(const Vector& x0) const override;
  [[nodiscard]] double x1_total_variance() const override { return total_variance_; }

  [[nodiscard]] Conditional conditional(const Vector& x0) const;
  /// log h(x, t) = log sum_k w_k N(x; m_k, S_k + sigma^2 b_{t:1} I).
  [[nodiscard]] double log_h(const Vector& x, double t) const;

  [[nodiscard]] const GaussianSpec& psi0() const { return psi0_; }
  [[nodiscard]] const MixtureSpec& potential() const { return potential_; }

 private:
  double compute_total_variance() const;

  GaussianSpec psi0_;
  MixtureSpec potential_;
  RefDynamics dyn_;
  std::vector<double> log_w_;
  std::vector<Vector> pot_var_;
  double total_variance_ = 0.0;
};

MixtureSbInstance mixture_sb_build(const GaussianSpec& psi0, const MixtureSpec& v, double sigma);

/// Psi0 = N(0, I), five equal-weight components with covariance 0.5 I at the vertices of a
/// regular pentagon of radius 4 (first two coordinates; zero elsewhere).
MixtureSpec pentagon_potential(int dim, double radius = 4.0, double variance = 0.5, int modes = 5);

/// Psi0 = N(0, I_d), Psi1 = N(0, (1 + sigma^2) I_d); the SB is the reference process itself.
GaussianSbInstance trivial_sb_instance(int dim, double sigma);

struct PathPoints {
  Samples x0;
  Samples xt;
  Samples x1;
};

/// Exact S-distributed (x0, x_t, x1): endpoints from the coupling, interior via the reference bridge.
PathPoints sample_sb_path_points(const SbInstance& inst, Eigen::Index n, double t, RngStream& rng);

struct GridCoupling {
  Vector x0_grid;
  Vector x1_grid;
  Matrix plan;
  Vector mu;
  Vector nu;
  double marginal_error = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Entropic OT by Sinkhorn scaling against exp(-cost / epsilon), stabilized by absorbing large
/// scalings into log-domain potentials. Stops once the L1 marginal error falls below tol; on
/// reaching max_iters the result is returned with converged = false.
GridCoupling grid_sinkhorn(const Vector& mu, const Vector& nu, const Matrix& cost, double epsilon, int max_iters,
                           double tol);

/// 1-D Gaussians discretized on a uniform grid of `points` nodes over [lo, hi], cost 1/2 (x0 - x1)^2.
GridCoupling grid_sinkhorn_gaussian_1d(const GaussianSpec& psi0, const GaussianSpec& psi1, double epsilon,
                                       int points = 400, double lo = -8.0, double hi = 8.0, int max_iters = 200000,
                                       double tol = 1e-10);

/// Mean vectors and covariance of a discrete 1-D coupling: (E X0, E X1, Var X0, Var X1, Cov).
struct GridMoments {
  double mean0 = 0.0, mean1 = 0.0, var0 = 0.0, var1 = 0.0, cov = 0.0;
};
GridMoments grid_moments(const GridCoupling& coupling);

}  // namespace bm2
