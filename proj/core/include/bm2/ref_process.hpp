#pragma once

#include "bm2/rng.hpp"
#include "bm2/types.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace bm2 {

/// Time-change schedule beta_t of the reference SDE dX = sigma sqrt(beta_t) dW,
/// given as a (rate, closed-form cumulative) pair. The cumulative b_{s:t} is
/// checked against Gauss-Legendre quadrature of the rate at construction and
/// b_{0:1} must equal 1.
class Schedule {
 public:
  using Rate = std::function<double(double)>;
  using Cumulative = std::function<double(double, double)>;

  Schedule(std::string name, Rate rate, Cumulative cumulative);

  static Schedule constant();
  /// beta_t = a + 2 (1 - a) t for a in (0, 1].
  static Schedule linear_ramp(double start);

  [[nodiscard]] double beta(double t) const { return rate_(t); }
  /// b_{s:t}, the integral of beta over [s, t].
  [[nodiscard]] double integral(double s, double t) const { return cumulative_(s, t); }
  [[nodiscard]] const std::string& name() const { return name_; }
  [[nodiscard]] bool is_constant() const { return constant_; }

 private:
  std::string name_;
  Rate rate_;
  Cumulative cumulative_;
  bool constant_ = false;
};

struct RefDynamics {
  double sigma = 1.0;
  Schedule schedule = Schedule::constant();

  RefDynamics() = default;
  explicit RefDynamics(double sigma_, Schedule schedule_ = Schedule::constant());
};

/// Strictly monotone grid from 0 to 1 (forward) or 1 to 0 (backward).
struct TimeGrid {
  std::vector<double> times;

  static TimeGrid forward(int steps = 200);
  static TimeGrid backward(int steps = 200);

  [[nodiscard]] int steps() const { return static_cast<int>(times.size()) - 1; }
  [[nodiscard]] bool is_forward() const { return times.front() < times.back(); }
  void validate() const;
};

/// R_{t|0}(. | x0) = N(x0, sigma^2 b_{0:t} I).
GaussianSpec transition_params(const RefDynamics& dyn, const Vector& x0, double t);

/// One draw from the reference bridge R_{t|0,1}(. | x0, x1). Exact endpoints at t = 0 and t = 1.
Vector bridge_sample(const RefDynamics& dyn, const Vector& x0, const Vector& x1, double t, RngStream& rng);

/// Row-wise bridge draws. sigma_rows, when non-empty, overrides dyn.sigma per row.
Samples bridge_sample_batch(const RefDynamics& dyn, const Samples& x0, const Samples& x1, std::span<const double> t,
                            RngStream& rng, std::span<const double> sigma_rows = {});

/// Mean and per-coordinate variance of R_{t|0,1}.
void bridge_moments(const RefDynamics& dyn, const Vector& x0, const Vector& x1, double t, Vector& mean,
                    double& variance, double sigma);

/// (beta_t / b_{t:1}) (x1 - xt); rejects t >= 1.
Vector fwd_drift_target(const RefDynamics& dyn, const Vector& xt, double t, const Vector& x1);
/// (beta_t / b_{0:t}) (x0 - xt); rejects t <= 0.
Vector bwd_drift_target(const RefDynamics& dyn, const Vector& xt, double t, const Vector& x0);

Samples fwd_drift_target_batch(const RefDynamics& dyn, const Samples& xt, std::span<const double> t,
                               const Samples& x1);
Samples bwd_drift_target_batch(const RefDynamics& dyn, const Samples& xt, std::span<const double> t,
                               const Samples& x0);

/// Drift evaluated on a whole batch at a common time.
using BatchDrift = std::function<Samples(const Samples& x, double t)>;

/// Euler-Maruyama: x <- x + drift(x, t_k) dt + sigma sqrt(|b_{t_k:t_k+1}|) xi. For a backward
/// grid dt is negative in the drift part; pass -v as the drift. sigma_rows overrides dyn.sigma
/// per row when non-empty. Throws NumericalError naming the step on a non-finite state.
Samples euler_maruyama(const BatchDrift& drift, const Samples& x_init, const TimeGrid& grid, const RefDynamics& dyn,
                       RngStream& rng, std::span<const double> sigma_rows = {});

}  // namespace bm2
