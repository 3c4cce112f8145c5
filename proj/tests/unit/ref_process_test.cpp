#include "bm2/linalg.hpp"
#include "bm2/ref_process.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace bm2;

namespace {

/// beta_t = 2t, b_{s:t} = t^2 - s^2.
Schedule quadratic_schedule() {
  return Schedule("quadratic", [](double t) { return 2.0 * t; }, [](double s, double t) { return t * t - s * s; });
}

Vector v1(double a) { return Vector::Constant(1, a); }

double log_normal(double x, double m, double v) { return -0.5 * std::log(2.0 * M_PI * v) - 0.5 * (x - m) * (x - m) / v; }

}  // namespace

TEST(Schedule, RejectsBadCumulative) {
  EXPECT_THROW(Schedule("bad", [](double) { return 1.0; }, [](double s, double t) { return 2.0 * (t - s); }),
               InvalidArgument);
  EXPECT_THROW(Schedule("mismatch", [](double) { return 1.0; },
                        [](double s, double t) { return t * t - s * s; }),
               InvalidArgument);
  EXPECT_THROW(Schedule::linear_ramp(0.0), InvalidArgument);
  const Schedule ramp = Schedule::linear_ramp(0.5);
  EXPECT_NEAR(ramp.integral(0.0, 1.0), 1.0, 1e-12);
}

TEST(TransitionParams, ConstantScheduleAtOne) {
  const RefDynamics dyn(1.7);
  Vector x0(2);
  x0 << 0.3, -2.0;
  const GaussianSpec g = transition_params(dyn, x0, 1.0);
  EXPECT_EQ(g.mean, x0);
  EXPECT_NEAR(g.cov(0, 0), 1.7 * 1.7, 1e-14);
  EXPECT_NEAR(g.cov(1, 1), 1.7 * 1.7, 1e-14);
  EXPECT_EQ(g.cov(0, 1), 0.0);
}

TEST(TransitionParams, DegenerateAtZero) {
  const GaussianSpec g = transition_params(RefDynamics(2.0), v1(4.0), 0.0);
  EXPECT_EQ(g.mean[0], 4.0);
  EXPECT_EQ(g.cov(0, 0), 0.0);
}

TEST(TransitionParams, QuadraticSchedule) {
  const RefDynamics dyn(1.5, quadratic_schedule());
  const GaussianSpec g = transition_params(dyn, v1(0.0), 0.5);
  EXPECT_NEAR(g.cov(0, 0), 1.5 * 1.5 * 0.25, 1e-14);
}

TEST(TransitionParams, RejectsOutsideUnitInterval) {
  EXPECT_THROW(transition_params(RefDynamics(1.0), v1(0.0), 1.5), InvalidArgument);
  EXPECT_THROW(transition_params(RefDynamics(1.0), v1(0.0), -0.1), InvalidArgument);
}

TEST(BridgeSample, PinnedAtEndpoints) {
  const RefDynamics dyn(1.0);
  RngStream rng(3);
  Vector a(2), b(2);
  a << 1.0, 2.0;
  b << -4.0, 0.5;
  EXPECT_EQ(bridge_sample(dyn, a, b, 0.0, rng), a);
  EXPECT_EQ(bridge_sample(dyn, a, b, 1.0, rng), b);
}

TEST(BridgeSample, MidpointVariance) {
  const RefDynamics dyn(1.0);
  constexpr Eigen::Index n = 100000;
  RngStream rng(5);
  const Samples zero = Samples::Zero(n, 2);
  const Samples xt = bridge_sample_batch(dyn, zero, zero, std::vector<double>(n, 0.5), rng);
  const Matrix c = linalg::sample_covariance(xt);
  const double se = 0.25 * std::sqrt(2.0 / (n - 1));
  EXPECT_LT(std::abs(c(0, 0) - 0.25), 4.0 * se);
  EXPECT_LT(std::abs(c(1, 1) - 0.25), 4.0 * se);
}

TEST(BridgeSample, ScheduledMoments) {
  const RefDynamics dyn(0.9, quadratic_schedule());
  Vector mean;
  double var = 0.0;
  bridge_moments(dyn, v1(-1.0), v1(3.0), 0.5, mean, var, dyn.sigma);
  // b_{0:t} = 0.25, b_{t:1} = 0.75.
  EXPECT_NEAR(mean[0], -1.0 * 0.75 + 3.0 * 0.25, 1e-14);
  EXPECT_NEAR(var, 0.81 * 0.25 * 0.75, 1e-14);
}

TEST(FwdDriftTarget, Examples) {
  const RefDynamics dyn(1.0);
  EXPECT_NEAR(fwd_drift_target(dyn, v1(0.0), 0.5, v1(1.0))[0], 2.0, 1e-15);
  Vector x(3);
  x << 1.0, -2.0, 0.5;
  for (double t : {0.0, 0.3, 0.99}) EXPECT_EQ(fwd_drift_target(dyn, x, t, x).norm(), 0.0);
  EXPECT_THROW(fwd_drift_target(dyn, x, 1.0, x), InvalidArgument);
}

// sigma^2 beta_t d/dx_t log r_{1|t}(x1 | x_t) by central differences.
TEST(FwdDriftTarget, ScheduledMatchesGradientOfLogTransition) {
  const double sigma = 1.3;
  const RefDynamics dyn(sigma, quadratic_schedule());
  const double t = 0.5;
  const double xt = 0.0, x1 = 1.0;
  const double var = sigma * sigma * 0.75;
  const double h = 1e-5;
  const double grad = (log_normal(x1, xt + h, var) - log_normal(x1, xt - h, var)) / (2.0 * h);
  const double fd = sigma * sigma * dyn.schedule.beta(t) * grad;
  const double got = fwd_drift_target(dyn, v1(xt), t, v1(x1))[0];
  EXPECT_NEAR(got, 1.0 / 0.75, 1e-14);
  EXPECT_NEAR(got, fd, 1e-8);
}

TEST(BwdDriftTarget, Examples) {
  const RefDynamics dyn(1.0);
  EXPECT_NEAR(bwd_drift_target(dyn, v1(1.0), 0.5, v1(0.0))[0], -2.0, 1e-15);
  EXPECT_EQ(bwd_drift_target(dyn, v1(0.7), 0.4, v1(0.7)).norm(), 0.0);
  EXPECT_THROW(bwd_drift_target(dyn, v1(0.0), 0.0, v1(1.0)), InvalidArgument);
}

TEST(BwdDriftTarget, MirrorOfForward) {
  const RefDynamics dyn(0.8);
  for (double t : {0.1, 0.35, 0.6, 0.9}) {
    const Vector xt = v1(0.4), x0 = v1(-1.3);
    EXPECT_NEAR(bwd_drift_target(dyn, xt, t, x0)[0], fwd_drift_target(dyn, xt, 1.0 - t, x0)[0], 1e-14);
  }
}

// Average of the forward target over bridge draws equals the target at the bridge mean, x1 - x0.
TEST(FwdDriftTarget, AverageOverBridgeMatchesConditionalDrift) {
  const RefDynamics dyn(1.0);
  constexpr Eigen::Index n = 100000;
  const double t = 0.3;
  RngStream rng(12);
  const Samples x0 = Samples::Constant(n, 1, -1.0);
  const Samples x1 = Samples::Constant(n, 1, 2.0);
  const std::vector<double> ts(n, t);
  const Samples xt = bridge_sample_batch(dyn, x0, x1, ts, rng);
  const Samples target = fwd_drift_target_batch(dyn, xt, ts, x1);
  const double se = std::sqrt(t * (1.0 - t) / n) / (1.0 - t);
  EXPECT_LT(std::abs(target.col(0).mean() - 3.0), 4.0 * se);
}

TEST(EulerMaruyama, ZeroDriftTerminalVariance) {
  const RefDynamics dyn(1.0);
  const BatchDrift zero = [](const Samples& x, double) { return Samples(Samples::Zero(x.rows(), x.cols())); };
  constexpr Eigen::Index n = 100000;
  RngStream rng(21);
  const Samples x = euler_maruyama(zero, Samples::Zero(n, 1), TimeGrid::forward(200), dyn, rng);
  const double v = linalg::sample_covariance(x)(0, 0);
  EXPECT_LT(std::abs(v - 1.0), 4.0 * std::sqrt(2.0 / (n - 1)));
}

TEST(EulerMaruyama, BackwardStepNoiseUsesAbsoluteDt) {
  const RefDynamics dyn(2.0);
  const BatchDrift zero = [](const Samples& x, double) { return Samples(Samples::Zero(x.rows(), x.cols())); };
  constexpr Eigen::Index n = 100000;
  RngStream rng(2);
  // Grids must span [0, 1], so the single step is the whole interval: N(0, sigma^2).
  const Samples x = euler_maruyama(zero, Samples::Zero(n, 1), TimeGrid::backward(1), dyn, rng);
  const double expected = 4.0;
  EXPECT_LT(std::abs(linalg::sample_covariance(x)(0, 0) - expected), 4.0 * expected * std::sqrt(2.0 / (n - 1)));
}

TEST(EulerMaruyama, ConstantDriftWithoutNoise) {
  const RefDynamics dyn(1.0);
  const BatchDrift c = [](const Samples& x, double) { return Samples(Samples::Constant(x.rows(), x.cols(), 0.7)); };
  Samples init(3, 2);
  init << 1, 2, 3, 4, 5, 6;
  RngStream rng(1);
  const std::vector<double> sigma(3, 0.0);
  const Samples x = euler_maruyama(c, init, TimeGrid::forward(200), dyn, rng, sigma);
  EXPECT_LT((x - (init.array() + 0.7).matrix()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(EulerMaruyama, AbortsOnNonFiniteState) {
  const RefDynamics dyn(1.0);
  const BatchDrift bad = [](const Samples& x, double t) {
    return Samples(Samples::Constant(x.rows(), x.cols(), t > 0.5 ? std::nan("") : 0.0));
  };
  RngStream rng(1);
  try {
    euler_maruyama(bad, Samples::Zero(4, 1), TimeGrid::forward(10), dyn, rng);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(TimeGrid, EndpointsExact) {
  const TimeGrid f = TimeGrid::forward();
  EXPECT_EQ(f.steps(), 200);
  EXPECT_EQ(f.times.front(), 0.0);
  EXPECT_EQ(f.times.back(), 1.0);
  const TimeGrid b = TimeGrid::backward(50);
  EXPECT_EQ(b.times.front(), 1.0);
  EXPECT_EQ(b.times.back(), 0.0);
  EXPECT_FALSE(b.is_forward());
}

// Mixing bridges over x1 ~ R_{1|0} reproduces R_{t|0}, linear-ramp schedule.
TEST(ReciprocalConsistency, BridgeMixtureMatchesTransition) {
  const RefDynamics dyn(0.8, Schedule::linear_ramp(0.5));
  constexpr Eigen::Index n = 100000;
  for (int k = 1; k <= 9; ++k) {
    const double t = 0.1 * k;
    RngStream rng = RngStream(31).split("t", static_cast<std::uint64_t>(k));
    const Samples x0 = Samples::Constant(n, 1, 0.7);
    Samples x1(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) x1(i, 0) = 0.7 + dyn.sigma * rng.normal();
    const Samples xt = bridge_sample_batch(dyn, x0, x1, std::vector<double>(n, t), rng);
    const double var = transition_params(dyn, v1(0.7), t).cov(0, 0);
    EXPECT_LT(std::abs(xt.col(0).mean() - 0.7), 5.0 * std::sqrt(var / n)) << t;
    EXPECT_LT(std::abs(linalg::sample_covariance(xt)(0, 0) - var), 5.0 * var * std::sqrt(2.0 / (n - 1))) << t;
  }
}

// Weak order 1 on dX = -X dt + dW: the Euler mean is (1 - dt)^T whatever the noise, so the
// noise is switched off to read the bias without Monte Carlo error. Zero drift is exact in law.
TEST(EulerMaruyama, WeakOrderOne) {
  const RefDynamics dyn(1.0);
  const BatchDrift ou = [](const Samples& x, double) { return Samples(-x); };
  std::vector<double> errors;
  for (int steps : {10, 20, 40, 80}) {
    RngStream rng(77);
    const Samples x = euler_maruyama(ou, Samples::Ones(1, 1), TimeGrid::forward(steps), dyn, rng, std::vector<double>{0.0});
    errors.push_back(std::abs(x(0, 0) - std::exp(-1.0)));
  }
  for (std::size_t i = 0; i + 1 < errors.size(); ++i) EXPECT_NEAR(errors[i] / errors[i + 1], 2.0, 0.1);
}
