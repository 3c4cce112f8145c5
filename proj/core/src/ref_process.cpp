#include "bm2/ref_process.hpp"

#include "bm2/linalg.hpp"

#include <cmath>
#include <sstream>

namespace bm2 {
namespace {

void check_time(double t, const char* where) {
  if (!(t >= 0.0 && t <= 1.0)) {
    std::ostringstream msg;
    msg << where << ": time " << t << " outside [0, 1]";
    throw InvalidArgument(msg.str());
  }
}

}  // namespace

Schedule::Schedule(std::string name, Rate rate, Cumulative cumulative)
    : name_(std::move(name)), rate_(std::move(rate)), cumulative_(std::move(cumulative)) {
  const double total = cumulative_(0.0, 1.0);
  if (std::abs(total - 1.0) > 1e-10) {
    std::ostringstream msg;
    msg << "Schedule '" << name_ << "': b_{0:1} = " << total << ", must equal 1";
    throw InvalidArgument(msg.str());
  }
  Vector nodes, weights;
  linalg::gauss_legendre(32, 0.0, 1.0, nodes, weights);
  for (Eigen::Index i = 0; i < nodes.size(); ++i) {
    if (!(rate_(nodes[i]) > 0.0)) throw InvalidArgument("Schedule '" + name_ + "': beta_t must be positive");
  }
  for (double upper : {0.25, 0.5, 0.8, 1.0}) {
    linalg::gauss_legendre(32, 0.0, upper, nodes, weights);
    double quad = 0.0;
    for (Eigen::Index i = 0; i < nodes.size(); ++i) quad += weights[i] * rate_(nodes[i]);
    if (std::abs(quad - cumulative_(0.0, upper)) > 1e-9) {
      std::ostringstream msg;
      msg << "Schedule '" << name_ << "': closed-form b_{0:" << upper << "} = " << cumulative_(0.0, upper)
          << " disagrees with quadrature " << quad;
      throw InvalidArgument(msg.str());
    }
  }
}

Schedule Schedule::constant() {
  Schedule s("constant", [](double) { return 1.0; }, [](double a, double b) { return b - a; });
  s.constant_ = true;
  return s;
}

Schedule Schedule::linear_ramp(double start) {
  if (!(start > 0.0 && start <= 1.0)) throw InvalidArgument("linear-ramp: start value must lie in (0, 1]");
  const double slope = 2.0 * (1.0 - start);
  return Schedule(
      "linear-ramp", [start, slope](double t) { return start + slope * t; },
      [start, slope](double s, double t) { return start * (t - s) + 0.5 * slope * (t * t - s * s); });
}

RefDynamics::RefDynamics(double sigma_, Schedule schedule_) : sigma(sigma_), schedule(std::move(schedule_)) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw InvalidArgument("RefDynamics: sigma must be positive");
}

TimeGrid TimeGrid::forward(int steps) {
  if (steps < 1) throw InvalidArgument("TimeGrid: need at least one step");
  TimeGrid g;
  g.times.resize(static_cast<std::size_t>(steps) + 1);
  for (int k = 0; k <= steps; ++k) g.times[static_cast<std::size_t>(k)] = static_cast<double>(k) / steps;
  return g;
}

TimeGrid TimeGrid::backward(int steps) {
  TimeGrid g = forward(steps);
  for (double& t : g.times) t = 1.0 - t;
  g.times.front() = 1.0;
  g.times.back() = 0.0;
  return g;
}

void TimeGrid::validate() const {
  if (times.size() < 2) throw InvalidArgument("TimeGrid: need at least two points");
  const bool fwd = is_forward();
  if (fwd ? (times.front() != 0.0 || times.back() != 1.0) : (times.front() != 1.0 || times.back() != 0.0)) {
    throw InvalidArgument("TimeGrid: endpoints must be exactly 0 and 1");
  }
  for (std::size_t k = 1; k < times.size(); ++k) {
    const double dt = times[k] - times[k - 1];
    if (fwd ? !(dt > 0.0) : !(dt < 0.0)) throw InvalidArgument("TimeGrid: times not strictly monotone");
  }
}

GaussianSpec transition_params(const RefDynamics& dyn, const Vector& x0, double t) {
  check_time(t, "transition_params");
  return GaussianSpec::isotropic(x0, dyn.sigma * dyn.sigma * dyn.schedule.integral(0.0, t));
}

void bridge_moments(const RefDynamics& dyn, const Vector& x0, const Vector& x1, double t, Vector& mean,
                    double& variance, double sigma) {
  check_time(t, "bridge");
  if (t == 0.0) {
    mean = x0;
    variance = 0.0;
    return;
  }
  if (t == 1.0) {
    mean = x1;
    variance = 0.0;
    return;
  }
  const double head = dyn.schedule.integral(0.0, t);
  const double tail = dyn.schedule.integral(t, 1.0);
  mean = x0 * tail + x1 * head;
  variance = sigma * sigma * head * tail;
}

Vector bridge_sample(const RefDynamics& dyn, const Vector& x0, const Vector& x1, double t, RngStream& rng) {
  if (x0.size() != x1.size()) throw InvalidArgument("bridge_sample: endpoint size mismatch");
  Vector mean;
  double variance = 0.0;
  bridge_moments(dyn, x0, x1, t, mean, variance, dyn.sigma);
  if (variance == 0.0) return mean;
  const double sd = std::sqrt(variance);
  Vector out(mean.size());
  for (Eigen::Index j = 0; j < mean.size(); ++j) out[j] = mean[j] + sd * rng.normal();
  return out;
}

Samples bridge_sample_batch(const RefDynamics& dyn, const Samples& x0, const Samples& x1, std::span<const double> t,
                            RngStream& rng, std::span<const double> sigma_rows) {
  const Eigen::Index n = x0.rows();
  const Eigen::Index d = x0.cols();
  if (x1.rows() != n || x1.cols() != d || static_cast<Eigen::Index>(t.size()) != n) {
    throw InvalidArgument("bridge_sample_batch: shape mismatch");
  }
  if (!sigma_rows.empty() && static_cast<Eigen::Index>(sigma_rows.size()) != n) {
    throw InvalidArgument("bridge_sample_batch: sigma_rows size mismatch");
  }
  Samples out(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double ti = t[static_cast<std::size_t>(i)];
    check_time(ti, "bridge_sample_batch");
    const double sigma = sigma_rows.empty() ? dyn.sigma : sigma_rows[static_cast<std::size_t>(i)];
    if (ti == 0.0) {
      out.row(i) = x0.row(i);
      continue;
    }
    if (ti == 1.0) {
      out.row(i) = x1.row(i);
      continue;
    }
    const double head = dyn.schedule.integral(0.0, ti);
    const double tail = dyn.schedule.integral(ti, 1.0);
    const double sd = sigma * std::sqrt(head * tail);
    for (Eigen::Index j = 0; j < d; ++j) out(i, j) = x0(i, j) * tail + x1(i, j) * head + sd * rng.normal();
  }
  return out;
}

Vector fwd_drift_target(const RefDynamics& dyn, const Vector& xt, double t, const Vector& x1) {
  check_time(t, "fwd_drift_target");
  if (t >= 1.0) throw InvalidArgument("fwd_drift_target: singular at t = 1");
  return (dyn.schedule.beta(t) / dyn.schedule.integral(t, 1.0)) * (x1 - xt);
}

Vector bwd_drift_target(const RefDynamics& dyn, const Vector& xt, double t, const Vector& x0) {
  check_time(t, "bwd_drift_target");
  if (t <= 0.0) throw InvalidArgument("bwd_drift_target: singular at t = 0");
  return (dyn.schedule.beta(t) / dyn.schedule.integral(0.0, t)) * (x0 - xt);
}

Samples fwd_drift_target_batch(const RefDynamics& dyn, const Samples& xt, std::span<const double> t,
                               const Samples& x1) {
  if (xt.rows() != x1.rows() || static_cast<Eigen::Index>(t.size()) != xt.rows()) {
    throw InvalidArgument("fwd_drift_target_batch: shape mismatch");
  }
  Samples out(xt.rows(), xt.cols());
  for (Eigen::Index i = 0; i < xt.rows(); ++i) {
    const double ti = t[static_cast<std::size_t>(i)];
    if (!(ti >= 0.0 && ti < 1.0)) throw InvalidArgument("fwd_drift_target_batch: time outside [0, 1)");
    out.row(i) = (dyn.schedule.beta(ti) / dyn.schedule.integral(ti, 1.0)) * (x1.row(i) - xt.row(i));
  }
  return out;
}

Samples bwd_drift_target_batch(const RefDynamics& dyn, const Samples& xt, std::span<const double> t,
                               const Samples& x0) {
  if (xt.rows() != x0.rows() || static_cast<Eigen::Index>(t.size()) != xt.rows()) {
    throw InvalidArgument("bwd_drift_target_batch: shape mismatch");
  }
  Samples out(xt.rows(), xt.cols());
  for (Eigen::Index i = 0; i < xt.rows(); ++i) {
    const double ti = t[static_cast<std::size_t>(i)];
    if (!(ti > 0.0 && ti <= 1.0)) throw InvalidArgument("bwd_drift_target_batch: time outside (0, 1]");
    out.row(i) = (dyn.schedule.beta(ti) / dyn.schedule.integral(0.0, ti)) * (x0.row(i) - xt.row(i));
  }
  return out;
}

Samples euler_maruyama(const BatchDrift& drift, const Samples& x_init, const TimeGrid& grid, const RefDynamics& dyn,
                       RngStream& rng, std::span<const double> sigma_rows) {
  grid.validate();
  const Eigen::Index n = x_init.rows();
  const Eigen::Index d = x_init.cols();
  if (!sigma_rows.empty() && static_cast<Eigen::Index>(sigma_rows.size()) != n) {
    throw InvalidArgument("euler_maruyama: sigma_rows size mismatch");
  }
  Samples x = x_init;
  if (n == 0) return x;
  std::vector<double> noise(static_cast<std::size_t>(n * d));
  for (int k = 0; k < grid.steps(); ++k) {
    const double t_prev = grid.times[static_cast<std::size_t>(k)];
    const double t_next = grid.times[static_cast<std::size_t>(k) + 1];
    const double dt = t_next - t_prev;
    const double scale = std::sqrt(std::abs(dyn.schedule.integral(std::min(t_prev, t_next), std::max(t_prev, t_next))));
    const Samples drift_value = drift(x, t_prev);
    if (drift_value.rows() != n || drift_value.cols() != d) {
      throw InvalidArgument("euler_maruyama: drift returned wrong shape");
    }
    rng.fill_normal(noise);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double sigma = sigma_rows.empty() ? dyn.sigma : sigma_rows[static_cast<std::size_t>(i)];
      for (Eigen::Index j = 0; j < d; ++j) {
        x(i, j) += drift_value(i, j) * dt + sigma * scale * noise[static_cast<std::size_t>(i * d + j)];
      }
    }
    if (!x.allFinite()) {
      std::ostringstream msg;
      msg << "euler_maruyama: non-finite state at step " << k << " (t = " << t_prev << ")";
      throw NumericalError(msg.str());
    }
  }
  return x;
}

}  // namespace bm2
