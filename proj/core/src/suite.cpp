#include "bm2/suite.hpp"

#include "bm2/approximator.hpp"
#include "bm2/benchmark_oracle.hpp"
#include "bm2/bm2_trainer.hpp"
#include "bm2/ibm_trainer.hpp"
#include "bm2/linalg.hpp"
#include "bm2/metrics.hpp"
#include "bm2/ref_process.hpp"
#include "bm2/sinkhorn_flow.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>

namespace bm2::suite {
namespace {

using Clock = std::chrono::steady_clock;

/// Measurement plus a free-form note.
struct Measure {
  double value = 0.0;
  std::string detail;
};

CheckResult run_check(const std::string& name, int criterion, double threshold, Compare compare,
                      const std::function<Measure()>& fn) {
  CheckResult r;
  r.name = name;
  r.criterion = criterion;
  r.threshold = threshold;
  r.compare = compare;
  const auto start = Clock::now();
  try {
    const Measure m = fn();
    r.measured = m.value;
    r.detail = m.detail;
    bool ok = false;
    switch (compare) {
      case Compare::less: ok = m.value < threshold; break;
      case Compare::less_equal: ok = m.value <= threshold; break;
      case Compare::greater_equal: ok = m.value >= threshold; break;
    }
    r.status = ok ? Status::pass : Status::fail;
  } catch (const std::exception& e) {
    r.status = Status::fail;
    r.measured = std::numeric_limits<double>::quiet_NaN();
    r.detail = std::string("exception: ") + e.what();
  }
  r.runtime_s = std::chrono::duration<double>(Clock::now() - start).count();
  return r;
}

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

struct CouplingMoments {
  double m0 = 0.0, m1 = 0.0, v0 = 0.0, v1 = 0.0, c = 0.0;
};

CouplingMoments moments_1d(const EndpointPairs& p) {
  CouplingMoments m;
  m.m0 = p.x0.col(0).mean();
  m.m1 = p.x1.col(0).mean();
  m.v0 = linalg::sample_covariance(p.x0)(0, 0);
  m.v1 = linalg::sample_covariance(p.x1)(0, 0);
  m.c = linalg::sample_cross_covariance(p.x0, p.x1)(0, 0);
  return m;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

GaussianSpec spec_1d(double mean, double var) { return GaussianSpec{Vector::Constant(1, mean), Matrix::Constant(1, 1, var)}; }

/// log int v(x1) N(x1; x, tau I) dx1 by tensor Gauss-Hermite quadrature over x1 = x + sqrt(tau) z.
double quadrature_log_h(const MixtureSpec& v, const Vector& x, double tau, const Vector& nodes, const Vector& weights) {
  const Eigen::Index d = x.size();
  const Eigen::Index q = nodes.size();
  auto density = [&](const Vector& y) {
    double s = 0.0;
    for (std::size_t k = 0; k < v.components.size(); ++k) {
      const auto& c = v.components[k];
      double logp = 0.0;
      for (Eigen::Index j = 0; j < d; ++j) {
        const double var = c.cov(j, j);
        const double r = y[j] - c.mean[j];
        logp += -0.5 * std::log(2.0 * M_PI * var) - 0.5 * r * r / var;
      }
      s += v.weights[k] * std::exp(logp);
    }
    return s;
  };
  const double root = std::sqrt(tau);
  double total = 0.0;
  Vector y(d);
  if (d == 1) {
    for (Eigen::Index a = 0; a < q; ++a) {
      y[0] = x[0] + root * nodes[a];
      total += weights[a] * density(y);
    }
  } else if (d == 2) {
    for (Eigen::Index a = 0; a < q; ++a) {
      for (Eigen::Index b = 0; b < q; ++b) {
        y[0] = x[0] + root * nodes[a];
        y[1] = x[1] + root * nodes[b];
        total += weights[a] * weights[b] * density(y);
      }
    }
  } else {
    throw InvalidArgument("quadrature_log_h: d <= 2 only");
  }
  return std::log(total);
}

Measure drift_fd_error(const MixtureSbInstance& inst, RngStream& rng) {
  Vector nodes, weights;
  linalg::gauss_hermite_normal(120, nodes, weights);
  const RefDynamics& dyn = inst.dynamics();
  const int d = inst.dim();
  constexpr double kStep = 1e-3;
  double worst = 0.0;
  for (int p = 0; p < 20; ++p) {
    Samples x(1, d);
    for (int j = 0; j < d; ++j) x(0, j) = rng.uniform(-3.0, 3.0);
    const double t = rng.uniform(0.0, 0.9);
    const double tau = dyn.sigma * dyn.sigma * dyn.schedule.integral(t, 1.0);
    const Samples analytic = inst.drift(x, t);
    for (int j = 0; j < d; ++j) {
      Vector up = x.row(0).transpose();
      Vector down = up;
      up[j] += kStep;
      down[j] -= kStep;
      const double grad = (quadrature_log_h(inst.potential(), up, tau, nodes, weights) -
                           quadrature_log_h(inst.potential(), down, tau, nodes, weights)) /
                          (2.0 * kStep);
      const double fd = dyn.sigma * dyn.sigma * dyn.schedule.beta(t) * grad;
      worst = std::max(worst, std::abs(fd - analytic(0, j)));
    }
  }
  return {worst, "max |analytic - FD of quadrature| over 20 points"};
}

}  // namespace

struct Context::Impl {
  Options opt;
  std::map<int, std::vector<CheckResult>> recorded;

  // Trained models shared between criteria.
  std::optional<GaussianSbInstance> pair_inst;
  std::optional<TrainResult<float>> pair_bm2;
  std::optional<CouplingMoments> pair_bm2_fwd;
  std::optional<TrainResult<float>> mixture_bm2;
  std::optional<MixtureSbInstance> mixture_inst;

  explicit Impl(Options o) : opt(std::move(o)) {}

  RngStream stream(const std::string& label) const { return RngStream(opt.seed, "suite/" + label); }

  Bm2Config base_config(double lr, int width) const {
    const Budget& b = opt.budget;
    Bm2Config cfg;
    cfg.steps = b.steps;
    cfg.batch = b.batch;
    cfg.width = width;
    cfg.hidden_layers = b.hidden_layers;
    cfg.cache_capacity = b.cache_capacity;
    cfg.adam.lr = lr;
    cfg.seed = opt.seed;
    return cfg;
  }

  const GaussianSbInstance& gaussian_pair() {
    if (!pair_inst) pair_inst.emplace(gaussian_sb_coupling(spec_1d(-2.0, 1.0), spec_1d(2.0, 1.0), 1.0));
    return *pair_inst;
  }

  const TrainResult<float>& pair_run() {
    if (!pair_bm2) {
      const Problem prob = problem_from(gaussian_pair());
      pair_bm2.emplace(train<float>(base_config(opt.budget.pair_lr, opt.budget.width), prob));
      RngStream rng = stream("pair/simulate-forward");
      pair_bm2_fwd = moments_1d(simulate(pair_bm2->ema_net, Direction::forward, opt.budget.coupling_samples, 200,
                                         prob, rng));
    }
    return *pair_bm2;
  }

  const MixtureSbInstance& mixture() {
    if (!mixture_inst) {
      mixture_inst.emplace(mixture_sb_build(GaussianSpec::isotropic(Vector::Zero(2), 1.0), pentagon_potential(2), 1.0));
    }
    return *mixture_inst;
  }

  const TrainResult<float>& mixture_run() {
    if (!mixture_bm2) {
      mixture_bm2.emplace(
          train<float>(base_config(opt.budget.lr, opt.budget.mixture_width), problem_from(mixture())));
    }
    return *mixture_bm2;
  }

  std::vector<CheckResult> run(int k);
  std::vector<CheckResult> c1();
  std::vector<CheckResult> c2();
  std::vector<CheckResult> c3();
  std::vector<CheckResult> c4();
  std::vector<CheckResult> c5();
  std::vector<CheckResult> c6();
  std::vector<CheckResult> c7();
  std::vector<CheckResult> c8();
  std::vector<CheckResult> c9();
  std::vector<CheckResult> c10();
};

std::vector<CheckResult> Context::Impl::c1() {
  return {run_check("gradient.finite_difference", 1, 1e-5, Compare::less, [&] {
    RngStream rng = stream("c1");
    const NetShape shape{2, 4, 3, false};
    DriftNet<double> net(shape, rng);
    for (double& p : net.params()) p = 0.5 * rng.normal();
    RegressionBatch batch;
    auto fill = [&](Eigen::Index n, Samples& x, std::vector<double>& t, Samples& y) {
      x.resize(n, 2);
      y.resize(n, 2);
      for (Eigen::Index i = 0; i < n; ++i) {
        for (int j = 0; j < 2; ++j) {
          x(i, j) = rng.normal();
          y(i, j) = rng.normal();
        }
        t.push_back(rng.uniform(0.05, 0.95));
      }
    };
    fill(6, batch.fwd_x, batch.fwd_t, batch.fwd_target);
    fill(5, batch.bwd_x, batch.bwd_t, batch.bwd_target);
    const LossGrad<double> lg = loss_and_grad(net, batch);
    constexpr double kStep = 1e-4;
    // Relative error with a floor so parameters with vanishing gradient do not divide by ~0.
    constexpr double kFloor = 1e-6;
    double worst = 0.0;
    std::size_t worst_at = 0;
    for (std::size_t i = 0; i < lg.grad.size(); ++i) {
      const double saved = net.params()[i];
      net.params()[i] = saved + kStep;
      const double up = loss_and_grad(net, batch).loss;
      net.params()[i] = saved - kStep;
      const double down = loss_and_grad(net, batch).loss;
      net.params()[i] = saved;
      const double fd = (up - down) / (2.0 * kStep);
      const double err = std::abs(fd - lg.grad[i]) / std::max({std::abs(fd), std::abs(lg.grad[i]), kFloor});
      if (err > worst) {
        worst = err;
        worst_at = i;
      }
    }
    return Measure{worst, std::to_string(lg.grad.size()) + " parameters, worst at " + std::to_string(worst_at)};
  })};
}

std::vector<CheckResult> Context::Impl::c2() {
  std::vector<CheckResult> out;
  out.push_back(run_check("bridge.moments", 2, 4.0, Compare::less, [&] {
    const RefDynamics dyn(1.0);
    constexpr Eigen::Index kDraws = 100000;
    Samples x0 = Samples::Constant(kDraws, 1, -1.0);
    Samples x1 = Samples::Constant(kDraws, 1, 2.0);
    double worst = 0.0;
    for (int k = 1; k <= 9; ++k) {
      const double t = 0.1 * k;
      RngStream rng = stream("c2").split("t", static_cast<std::uint64_t>(k));
      const std::vector<double> ts(kDraws, t);
      const Samples xt = bridge_sample_batch(dyn, x0, x1, ts, rng);
      const double mean = -1.0 * (1.0 - t) + 2.0 * t;
      const double var = t * (1.0 - t);
      const double m_hat = xt.col(0).mean();
      const double v_hat = linalg::sample_covariance(xt)(0, 0);
      const double z_mean = std::abs(m_hat - mean) / std::sqrt(var / kDraws);
      const double z_var = std::abs(v_hat - var) / (var * std::sqrt(2.0 / (kDraws - 1)));
      worst = std::max({worst, z_mean, z_var});
    }
    return Measure{worst, "max standard-error multiple over 9 times, mean and variance"};
  }));
  out.push_back(run_check("bridge.pinning", 2, 0.0, Compare::less_equal, [&] {
    const RefDynamics dyn(1.3);
    RngStream rng = stream("c2/pin");
    Vector a(3), b(3);
    a << 0.3, -1.2, 5.0;
    b << -2.0, 0.7, 1.1;
    const double dev0 = (bridge_sample(dyn, a, b, 0.0, rng) - a).cwiseAbs().maxCoeff();
    const double dev1 = (bridge_sample(dyn, a, b, 1.0, rng) - b).cwiseAbs().maxCoeff();
    return Measure{std::max(dev0, dev1), "max |bridge(t=0) - x0|, |bridge(t=1) - x1|"};
  }));
  return out;
}

std::vector<CheckResult> Context::Impl::c3() {
  std::vector<CheckResult> out;
  for (double eps : {0.1, 1.0, 10.0}) {
    out.push_back(run_check("oracle.sinkhorn_crosscov_eps" + fmt(eps), 3, 1e-2, Compare::less, [&] {
      const GaussianSpec g0 = spec_1d(-2.0, 1.0);
      const GaussianSpec g1 = spec_1d(2.0, 1.0);
      const GaussianSbInstance inst = gaussian_sb_coupling(g0, g1, eps);
      const GridCoupling grid = grid_sinkhorn_gaussian_1d(g0, g1, eps);
      const GridMoments m = grid_moments(grid);
      return Measure{std::abs(m.cov - inst.cross()(0, 0)),
                     "analytic " + fmt(inst.cross()(0, 0)) + ", grid " + fmt(m.cov) + ", sinkhorn error " +
                         fmt(grid.marginal_error)};
    }));
  }
  return out;
}

std::vector<CheckResult> Context::Impl::c4() {
  std::vector<CheckResult> out;
  out.push_back(run_check("oracle.drift_fd_single_gaussian", 4, 1e-4, Compare::less, [&] {
    MixtureSpec v{{1.0}, {spec_1d(1.5, 0.7)}};
    const MixtureSbInstance inst = mixture_sb_build(spec_1d(0.0, 1.0), v, 1.0);
    RngStream rng = stream("c4/single");
    return drift_fd_error(inst, rng);
  }));
  out.push_back(run_check("oracle.drift_fd_mixture5", 4, 1e-4, Compare::less, [&] {
    RngStream rng = stream("c4/mixture");
    return drift_fd_error(mixture(), rng);
  }));
  return out;
}

std::vector<CheckResult> Context::Impl::c5() {
  std::vector<CheckResult> out;
  const Budget& b = opt.budget;
  for (int d : {1, 2}) {
    out.push_back(run_check("bm2.trivial_kl_d" + std::to_string(d), 5, 0.01 * d, Compare::less, [&, d] {
      const GaussianSbInstance inst = trivial_sb_instance(d, 1.0);
      const TrainResult<float> res = train<float>(base_config(b.lr, b.width), problem_from(inst));
      RngStream rng = stream("c5/kl" + std::to_string(d));
      const Estimate kl = kl_drift_gap(inst, head_drift(res.ema_net, true), b.kl_paths, b.kl_times, rng);
      return Measure{kl.value, "KL " + fmt(kl.value) + " +- " + fmt(kl.se)};
    }));
  }
  out.push_back(run_check("bm2.fixed_point_hold", 5, 0.02 * 2, Compare::less, [&] {
    // Start at S: the forward head is exactly zero and the backward head is fitted to S's
    // backward drift by bridge matching on exact S pairs (the forward rows get no gradient).
    const GaussianSbInstance inst = trivial_sb_instance(2, 1.0);
    Bm2Config cfg = base_config(b.lr, b.width);
    cfg.steps = b.fixed_point_steps;
    RngStream init = stream("c5/fixed-point-init");
    DriftNet<float> net(cfg.shape(2), init);
    net.zero_output_layer();
    Bm2Config pre = cfg;
    pre.adam.lr = b.pair_lr;
    IbmNet<float> state(std::move(net), pre);
    const CouplingSampler exact = [&inst](Eigen::Index n, RngStream& r) { return inst.sample_coupling(n, r); };
    RngStream pre_rng = stream("c5/fixed-point-prefit");
    fit_projection(exact, Direction::backward, state, inst.dynamics(), pre, b.fixed_point_prefit_steps, pre_rng);
    const TrainResult<float> res = train<float>(cfg, problem_from(inst), {}, state.sampling_net());
    RngStream rng = stream("c5/fixed-point");
    // With mu_s = 0, the drift gap is E|mu_f|^2 / (2 sigma^2).
    const Estimate kl = kl_drift_gap(inst, head_drift(res.ema_net, true), b.kl_paths, b.kl_times, rng);
    return Measure{2.0 * kl.value, "E|mu_f|^2 after " + std::to_string(cfg.steps) + " steps from S"};
  }));
  return out;
}

std::vector<CheckResult> Context::Impl::c6() {
  std::vector<CheckResult> out;
  const Budget& b = opt.budget;
  out.push_back(run_check("bm2.gauss_pair_coupling_cov", 6, 0.05, Compare::less, [&] {
    pair_run();
    const double exact = gaussian_pair().cross()(0, 0);
    return Measure{rel(pair_bm2_fwd->c, exact), "learned " + fmt(pair_bm2_fwd->c) + ", analytic " + fmt(exact)};
  }));
  out.push_back(run_check("bm2.forward_backward_agreement", 6, 0.10, Compare::less, [&] {
    const TrainResult<float>& res = pair_run();
    RngStream rng = stream("pair/simulate-backward");
    const CouplingMoments bwd =
        moments_1d(simulate(res.ema_net, Direction::backward, b.coupling_samples, 200, problem_from(gaussian_pair()), rng));
    const CouplingMoments& fwd = *pair_bm2_fwd;
    struct Diff {
      const char* name;
      double f, b;
    };
    const Diff diffs[] = {{"E[X0]", fwd.m0, bwd.m0}, {"E[X1]", fwd.m1, bwd.m1}, {"V[X0]", fwd.v0, bwd.v0},
                          {"V[X1]", fwd.v1, bwd.v1}, {"C[X0,X1]", fwd.c, bwd.c}};
    const Diff worst = *std::max_element(std::begin(diffs), std::end(diffs),
                                         [&](const Diff& x, const Diff& y) { return rel(x.f, x.b) < rel(y.f, y.b); });
    return Measure{rel(worst.f, worst.b), "worst " + std::string(worst.name) + " forward " + fmt(worst.f) +
                                              ", backward " + fmt(worst.b) + "; cov forward " + fmt(fwd.c) +
                                              ", backward " + fmt(bwd.c)};
  }));
  out.push_back(run_check("ibm.agrees_with_bm2", 6, 0.10, Compare::less, [&] {
    pair_run();
    const Problem prob = problem_from(gaussian_pair());
    IbmConfig cfg;
    cfg.base = base_config(b.pair_lr, b.width);
    cfg.outer = b.ibm_outer;
    cfg.inner = b.ibm_inner;
    const IbmResult<float> res = ibm_loop<float>(cfg, prob);
    RngStream rng = stream("c6/ibm-simulate");
    const DriftNet<float>& net = res.last_direction == Direction::forward ? res.forward : res.backward;
    const CouplingMoments m = moments_1d(simulate(net, res.last_direction, b.coupling_samples, 200, prob, rng));
    return Measure{rel(m.c, pair_bm2_fwd->c), "I-BM cov " + fmt(m.c) + ", BM2 cov " + fmt(pair_bm2_fwd->c) +
                                                  ", analytic " + fmt(gaussian_pair().cross()(0, 0))};
  }));
  return out;
}

std::vector<CheckResult> Context::Impl::c7() {
  std::vector<CheckResult> out;
  const Budget& b = opt.budget;
  out.push_back(run_check("bm2.mixture_kl", 7, 0.05, Compare::less, [&] {
    const TrainResult<float>& res = mixture_run();
    RngStream rng = stream("c7/kl");
    const Estimate kl = kl_drift_gap(mixture(), head_drift(res.ema_net, true), b.kl_paths, b.kl_times, rng);
    return Measure{kl.value, "KL " + fmt(kl.value) + " +- " + fmt(kl.se)};
  }));
  out.push_back(run_check("bm2.mixture_cbw2uvp_ratio", 7, 50.0, Compare::greater_equal, [&] {
    const TrainResult<float>& res = mixture_run();
    const MixtureSbInstance& inst = mixture();
    RngStream rng = stream("c7/cbw");
    RngStream rng0 = stream("c7/cbw-independent");
    const Estimate learned = cbw2_uvp(
        inst,
        [&](const Samples& x0, RngStream& r) { return simulate_from(res.ema_net, x0, 200, inst.dynamics(), r); },
        b.cbw_conditions, b.cbw_inner, rng);
    const Estimate baseline = cbw2_uvp(inst, independent_simulator(inst), b.cbw_conditions, b.cbw_inner, rng0);
    return Measure{baseline.value / learned.value,
                   "BM2 " + fmt(learned.value) + " +- " + fmt(learned.se) + ", independent " + fmt(baseline.value)};
  }));
  return out;
}

std::vector<CheckResult> Context::Impl::c8() {
  std::vector<CheckResult> out;
  const FlowProblem prob;
  const GaussFlowState exact = flow_analytic_state(prob);
  const FlowRow target = flow_moments(0.0, exact, prob);
  std::vector<FlowRow> rows;
  auto terminal = [&]() -> const FlowRow& {
    if (rows.empty()) rows = flow_integrate(prob, 30.0, 1e-3);
    return rows.back();
  };
  out.push_back(run_check("flow.terminal_mean", 8, 1e-3, Compare::less, [&] {
    return Measure{std::abs(terminal().mean_x1 - target.mean_x1), "E_F[X1] = " + fmt(terminal().mean_x1)};
  }));
  out.push_back(run_check("flow.terminal_variance", 8, 1e-3, Compare::less, [&] {
    return Measure{std::abs(terminal().var_x1 - target.var_x1), "V_F[X1] = " + fmt(terminal().var_x1)};
  }));
  out.push_back(run_check("flow.terminal_covariance", 8, 1e-3, Compare::less, [&] {
    return Measure{std::abs(terminal().cov_x0x1 - target.cov_x0x1), "C_F[X0,X1] = " + fmt(terminal().cov_x0x1)};
  }));
  out.push_back(run_check("flow.fixed_point_residual", 8, 1e-8, Compare::less, [&] {
    return Measure{flow_rhs(exact, prob).max_abs(), "max |d/dl| at the analytic state"};
  }));
  out.push_back(run_check("flow.heldout_residual", 8, 1e-8, Compare::less, [&] {
    // Along the trajectory, not only at the fixed point.
    double worst = flow_heldout_residual(exact, prob);
    const auto& traj = rows.empty() ? (terminal(), rows) : rows;
    for (std::size_t i = 0; i < traj.size(); i += 1000) worst = std::max(worst, flow_heldout_residual(traj[i].state, prob));
    return Measure{worst, "max |lhs - rhs| at held-out pairs along the trajectory"};
  }));
  return out;
}

std::vector<CheckResult> Context::Impl::c9() {
  const Budget& b = opt.budget;
  return {run_check("bm2sigma.coupling_vs_dedicated", 9, 0.15, Compare::less, [&] {
    pair_run();
    Bm2Config cfg = base_config(b.pair_lr, b.width);
    cfg.amortized = true;
    const Problem prob = problem_from(gaussian_pair());
    const TrainResult<float> res = train<float>(cfg, prob);
    RngStream rng = stream("c9/simulate");
    const CouplingMoments m = moments_1d(simulate(res.ema_net, Direction::forward, b.coupling_samples, 200, prob, rng, 1.0));
    return Measure{rel(m.c, pair_bm2_fwd->c),
                   "amortized cov at sigma=1 " + fmt(m.c) + ", dedicated " + fmt(pair_bm2_fwd->c)};
  })};
}

std::vector<CheckResult> Context::Impl::c10() {
  Options fresh_opt = opt;
  fresh_opt.on_result = {};
  Context fresh(fresh_opt);
  std::vector<CheckResult> out;
  for (int k : determinism_criteria()) {
    if (!recorded.count(k)) recorded[k] = run(k);
    const std::vector<CheckResult>& first = recorded[k];
    out.push_back(run_check("determinism.criterion" + std::to_string(k), 10, 0.0, Compare::less_equal, [&] {
      const std::vector<CheckResult> second = fresh.criterion(k);
      double mismatches = 0.0;
      std::string where;
      if (second.size() != first.size()) return Measure{1.0, "different number of checks"};
      for (std::size_t i = 0; i < first.size(); ++i) {
        const double a = first[i].measured;
        const double b = second[i].measured;
        if (std::memcmp(&a, &b, sizeof(double)) != 0) {
          mismatches += 1.0;
          where += first[i].name + " ";
        }
      }
      return Measure{mismatches, mismatches == 0.0 ? "all measured values bitwise equal" : "differs: " + where};
    }));
  }
  return out;
}

std::vector<CheckResult> Context::Impl::run(int k) {
  std::vector<CheckResult> res;
  switch (k) {
    case 1: res = c1(); break;
    case 2: res = c2(); break;
    case 3: res = c3(); break;
    case 4: res = c4(); break;
    case 5: res = c5(); break;
    case 6: res = c6(); break;
    case 7: res = c7(); break;
    case 8: res = c8(); break;
    case 9: res = c9(); break;
    case 10: return c10();
    default: throw InvalidArgument("unknown acceptance criterion " + std::to_string(k));
  }
  recorded[k] = res;
  return res;
}

Context::Context(Options options) : impl_(std::make_unique<Impl>(std::move(options))) {}
Context::~Context() = default;

const Options& Context::options() const { return impl_->opt; }

std::vector<CheckResult> Context::criterion(int k) {
  std::vector<CheckResult> res = impl_->run(k);
  if (impl_->opt.on_result) {
    for (const auto& r : res) impl_->opt.on_result(r);
  }
  return res;
}

std::vector<CheckResult> Context::extras(Tier tier) {
  Impl& s = *impl_;
  std::vector<CheckResult> out;
  auto emit = [&](CheckResult r) {
    if (s.opt.on_result) s.opt.on_result(r);
    out.push_back(std::move(r));
  };

  emit(run_check("rng.gaussian_moments", 0, 5.0, Compare::less, [&] {
    Vector mean(2);
    mean << 1.0, -2.0;
    Matrix cov(2, 2);
    cov << 2.0, 0.6, 0.6, 0.5;
    const GaussianSpec spec{mean, cov};
    RngStream rng = s.stream("extra/rng");
    constexpr Eigen::Index n = 100000;
    const Samples x = gaussian_sample(spec, n, rng);
    const Vector m = linalg::column_mean(x);
    const Matrix c = linalg::sample_covariance(x);
    double worst = 0.0;
    for (int i = 0; i < 2; ++i) {
      worst = std::max(worst, std::abs(m[i] - mean[i]) / std::sqrt(cov(i, i) / n));
      for (int j = 0; j < 2; ++j) {
        const double se = std::sqrt((cov(i, i) * cov(j, j) + cov(i, j) * cov(i, j)) / (n - 1));
        worst = std::max(worst, std::abs(c(i, j) - cov(i, j)) / se);
      }
    }
    return Measure{worst, "max standard-error multiple of mean and covariance entries"};
  }));

  emit(run_check("ref.reciprocal_consistency", 0, 5.0, Compare::less, [&] {
    const RefDynamics dyn(0.8, Schedule::linear_ramp(0.5));
    constexpr Eigen::Index n = 100000;
    double worst = 0.0;
    for (int k = 1; k <= 9; ++k) {
      const double t = 0.1 * k;
      RngStream rng = s.stream("extra/reciprocal").split("t", static_cast<std::uint64_t>(k));
      const Samples x0 = Samples::Constant(n, 1, 0.7);
      Samples x1(n, 1);
      for (Eigen::Index i = 0; i < n; ++i) x1(i, 0) = 0.7 + dyn.sigma * rng.normal();
      const Samples xt = bridge_sample_batch(dyn, x0, x1, std::vector<double>(n, t), rng);
      const GaussianSpec law = transition_params(dyn, Vector::Constant(1, 0.7), t);
      const double var = law.cov(0, 0);
      const double zm = std::abs(xt.col(0).mean() - 0.7) / std::sqrt(var / n);
      const double zv = std::abs(linalg::sample_covariance(xt)(0, 0) - var) / (var * std::sqrt(2.0 / (n - 1)));
      worst = std::max({worst, zm, zv});
    }
    return Measure{worst, "bridge mixture vs transition law, linear-ramp schedule"};
  }));

  emit(run_check("ref.em_weak_order", 0, 0.1, Compare::less, [&] {
    // dX = -X dt + dW from x = 1: the Euler mean is (1 - dt)^T, bias O(dt). Noise off so the bias
    // is read without Monte Carlo error.
    const RefDynamics dyn(1.0);
    const BatchDrift ou = [](const Samples& x, double) { return Samples(-x); };
    std::vector<double> errors;
    for (int steps : {10, 20, 40, 80}) {
      RngStream rng = s.stream("extra/em");
      const Samples x =
          euler_maruyama(ou, Samples::Ones(1, 1), TimeGrid::forward(steps), dyn, rng, std::vector<double>{0.0});
      errors.push_back(std::abs(x(0, 0) - std::exp(-1.0)));
    }
    double worst = 0.0;
    for (std::size_t i = 0; i + 1 < errors.size(); ++i) worst = std::max(worst, std::abs(errors[i] / errors[i + 1] - 2.0));
    return Measure{worst, "max |error ratio - 2| under step halving"};
  }));

  emit(run_check("oracle.joint_precision_offdiag", 0, 1e-8, Compare::less, [&] {
    Matrix c0(2, 2), c1(2, 2);
    c0 << 1.5, 0.4, 0.4, 0.8;
    c1 << 0.6, -0.3, -0.3, 2.2;
    Vector m0(2), m1(2);
    m0 << 0.5, -1.0;
    m1 << -2.0, 3.0;
    const double eps = 0.7;
    const GaussianSbInstance inst = gaussian_sb_coupling(GaussianSpec{m0, c0}, GaussianSpec{m1, c1}, eps);
    const Matrix precision = inst.joint().cov.inverse();
    const double err = (precision.topRightCorner(2, 2) + Matrix::Identity(2, 2) / eps).cwiseAbs().maxCoeff();
    return Measure{err, "off-diagonal block of the joint precision vs -I / epsilon"};
  }));

  emit(run_check("oracle.mixture_weight_normalization", 0, 1e-12, Compare::less, [&] {
    const MixtureSbInstance& inst = s.mixture();
    RngStream rng = s.stream("extra/normalization");
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
      Vector x0(2);
      x0 << 6.0 * rng.normal(), 6.0 * rng.normal();
      const auto c = inst.conditional(x0);
      double total = 0.0;
      for (double lw : c.log_weights) {
        if (!(std::exp(lw) >= 0.0)) throw NumericalError("negative weight");
        total += std::exp(lw);
      }
      worst = std::max(worst, std::abs(total - 1.0));
    }
    return Measure{worst, "max |sum of S_{1|0} weights - 1| over 100 x0"};
  }));

  emit(run_check("oracle.conditional_moments_mc", 0, 5.0, Compare::less, [&] {
    const MixtureSbInstance& inst = s.mixture();
    RngStream rng = s.stream("extra/conditional");
    constexpr Eigen::Index n = 100000;
    double worst = 0.0;
    for (const Vector& x0 : {Vector(Vector::Zero(2)), Vector(Vector::Constant(2, 1.5))}) {
      const Samples x1 = inst.sample_conditional(Samples(x0.transpose().replicate(n, 1)), rng);
      const GaussianSpec exact = inst.conditional_moments(x0);
      const Vector m = linalg::column_mean(x1);
      for (int j = 0; j < 2; ++j) {
        worst = std::max(worst, std::abs(m[j] - exact.mean[j]) / std::sqrt(exact.cov(j, j) / n));
      }
    }
    return Measure{worst, "conditional mean, MC vs exact mixture moments"};
  }));

  emit(run_check("metrics.bw2_symmetry", 0, 1e-10, Compare::less, [&] {
    RngStream rng = s.stream("extra/bw2");
    double worst = 0.0;
    for (int k = 0; k < 20; ++k) {
      auto random_spec = [&] {
        Matrix a(3, 3);
        Vector m(3);
        for (int i = 0; i < 3; ++i) {
          m[i] = rng.normal();
          for (int j = 0; j < 3; ++j) a(i, j) = rng.normal();
        }
        return GaussianSpec{m, a * a.transpose()};
      };
      const GaussianSpec g1 = random_spec();
      const GaussianSpec g2 = random_spec();
      worst = std::max({worst, std::abs(bw2(g1, g2) - bw2(g2, g1)), bw2(g1, g1)});
    }
    return Measure{worst, "max |bw2(a,b) - bw2(b,a)| and bw2(a,a) over 20 random pairs"};
  }));

  emit(run_check("approx.batch_invariance", 0, 0.0, Compare::less_equal, [&] {
    RngStream rng = s.stream("extra/batch");
    DriftNet<float> net(NetShape{3, 37, 3, false}, rng);
    for (float& p : net.params()) p = static_cast<float>(0.3 * rng.normal());
    constexpr Eigen::Index n = 29;
    Samples x(n, 3);
    std::vector<double> t(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int j = 0; j < 3; ++j) x(i, j) = rng.normal();
      t[static_cast<std::size_t>(i)] = rng.uniform();
    }
    const DriftHeads all = net.forward(x, t);
    double mismatches = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const DriftHeads one = net.forward(Samples(x.row(i)), std::vector<double>{t[static_cast<std::size_t>(i)]});
      for (int j = 0; j < 3; ++j) {
        if (one.mu_f(0, j) != all.mu_f(i, j) || one.v_b(0, j) != all.v_b(i, j)) mismatches += 1.0;
      }
    }
    return Measure{mismatches, "entries where a batch row differs from its single-row evaluation"};
  }));

  emit(run_check("approx.zero_output_heads", 0, 0.0, Compare::less_equal, [&] {
    RngStream rng = s.stream("extra/zero");
    DriftNet<float> net(NetShape{2, 16, 3, true}, rng);
    net.zero_output_layer();
    Samples x(50, 2);
    std::vector<double> t(50), sig(50);
    for (int i = 0; i < 50; ++i) {
      x(i, 0) = 10.0 * rng.normal();
      x(i, 1) = rng.normal();
      t[static_cast<std::size_t>(i)] = rng.uniform();
      sig[static_cast<std::size_t>(i)] = rng.uniform(0.1, 4.0);
    }
    const DriftHeads h = net.forward(x, t, sig);
    return Measure{std::max(h.mu_f.cwiseAbs().maxCoeff(), h.v_b.cwiseAbs().maxCoeff()), "max |head| at zero output layer"};
  }));

  emit(run_check("flow.symmetry", 0, 1e-9, Compare::less, [&] {
    const FlowProblem prob{-1.5, 0.8, 1.5, 0.8, 1.2};
    const std::vector<FlowRow> rows = flow_integrate(prob, 10.0, 1e-2);
    double worst = 0.0;
    for (const FlowRow& r : rows) {
      worst = std::max({worst, std::abs(r.state.a_f + r.state.a_b), std::abs(r.state.A_f - r.state.A_b),
                        std::abs(r.state.v_f - r.state.v_b)});
    }
    return Measure{worst, "max |a_f + a_b|, |A_f - A_b|, |v_f - v_b| along the flow"};
  }));

  emit(run_check("flow.step_halving", 0, 1e-6, Compare::less, [&] {
    const FlowProblem prob;
    const FlowRow a = flow_integrate(prob, 20.0, 1e-3).back();
    const FlowRow b = flow_integrate(prob, 20.0, 5e-4).back();
    return Measure{std::max({std::abs(a.mean_x1 - b.mean_x1), std::abs(a.var_x1 - b.var_x1),
                             std::abs(a.cov_x0x1 - b.cov_x0x1)}),
                   "terminal moments, dl = 1e-3 vs 5e-4"};
  }));

  if (tier == Tier::full) {
    auto loss_decrease = [&](const TrainResult<float>& res) {
      auto median = [](std::vector<double> v) {
        std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2), v.end());
        return v[v.size() / 2];
      };
      std::vector<double> head, tail;
      for (std::size_t i = 0; i < res.log.size(); ++i) {
        if (i < 500) head.push_back(res.log[i].loss);
        if (i + 500 >= res.log.size()) tail.push_back(res.log[i].loss);
      }
      const double h = median(head);
      const double t = median(tail);
      return Measure{h - t, "median loss first 500 " + fmt(h) + ", last 500 " + fmt(t)};
    };
    emit(run_check("bm2.loss_decrease_gauss_pair", 0, 1e-12, Compare::greater_equal,
                   [&] { return loss_decrease(s.pair_run()); }));
    emit(run_check("bm2.loss_decrease_mixture", 0, 1e-12, Compare::greater_equal,
                   [&] { return loss_decrease(s.mixture_run()); }));
  }
  return out;
}

std::vector<int> determinism_criteria() { return {1, 2, 3, 4, 5, 6, 8}; }

std::vector<CheckResult> run_suite(Tier tier, const Options& options) {
  Context ctx(options);
  std::vector<CheckResult> out;
  const std::vector<int> criteria =
      tier == Tier::fast ? std::vector<int>{1, 2, 3, 4, 8} : std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  for (int k : criteria) {
    for (auto& r : ctx.criterion(k)) out.push_back(std::move(r));
  }
  for (auto& r : ctx.extras(tier)) out.push_back(std::move(r));
  return out;
}

bool passed(const CheckResult& r) { return r.status == Status::pass; }

std::string status_name(Status s) {
  switch (s) {
    case Status::pass: return "pass";
    case Status::fail: return "fail";
    case Status::skip: return "skip";
  }
  return "unknown";
}

namespace {
const char* compare_symbol(Compare c) {
  switch (c) {
    case Compare::less: return "<";
    case Compare::less_equal: return "<=";
    case Compare::greater_equal: return ">=";
  }
  return "?";
}
}  // namespace

std::string to_json_line(const CheckResult& r) {
  nlohmann::json j;
  j["name"] = r.name;
  j["criterion"] = r.criterion;
  j["status"] = status_name(r.status);
  j["measured"] = std::isfinite(r.measured) ? nlohmann::json(r.measured) : nlohmann::json(nullptr);
  j["threshold"] = r.threshold;
  j["compare"] = compare_symbol(r.compare);
  j["runtime_s"] = r.runtime_s;
  j["detail"] = r.detail;
  return j.dump();
}

std::string summary_line(const CheckResult& r) {
  std::ostringstream os;
  os << (r.status == Status::pass ? "PASS" : r.status == Status::fail ? "FAIL" : "SKIP") << "  " << std::left
     << std::setw(40) << r.name << " measured " << std::setprecision(6) << r.measured << ' '
     << compare_symbol(r.compare) << ' ' << r.threshold << "  (" << std::fixed << std::setprecision(2) << r.runtime_s
     << " s)";
  if (!r.detail.empty()) os << "  " << r.detail;
  return os.str();
}

}  // namespace bm2::suite

namespace bm2::suite {

std::vector<CheckResult> oracle_checks(const SbInstance& inst, std::uint64_t seed) {
  std::vector<CheckResult> out;
  const RngStream root(seed, "oracle-check");
  const double sigma = inst.dynamics().sigma;
  const int d = inst.dim();
  if (const auto* g = dynamic_cast<const GaussianSbInstance*>(&inst)) {
    if (d == 1) {
      out.push_back(run_check("oracle.sinkhorn_crosscov", 0, 1e-2, Compare::less, [&] {
        const GridCoupling grid = grid_sinkhorn_gaussian_1d(g->psi0(), g->psi1(), sigma * sigma);
        const double got = grid_moments(grid).cov;
        return Measure{std::abs(got - g->cross()(0, 0)),
                       "analytic " + fmt(g->cross()(0, 0)) + ", grid " + fmt(got)};
      }));
    }
    out.push_back(run_check("oracle.joint_precision_offdiag", 0, 1e-8, Compare::less, [&] {
      const Matrix precision = g->joint().cov.inverse();
      const double err =
          (precision.topRightCorner(d, d) + Matrix::Identity(d, d) / (sigma * sigma)).cwiseAbs().maxCoeff();
      return Measure{err, "off-diagonal block of the joint precision vs -I / sigma^2"};
    }));
  }
  if (const auto* m = dynamic_cast<const MixtureSbInstance*>(&inst)) {
    if (d <= 2) {
      out.push_back(run_check("oracle.drift_fd", 0, 1e-4, Compare::less, [&] {
        RngStream rng = root.split("drift-fd");
        return drift_fd_error(*m, rng);
      }));
    }
    out.push_back(run_check("oracle.mixture_weight_normalization", 0, 1e-12, Compare::less, [&] {
      RngStream rng = root.split("normalization");
      const Samples x0 = m->sample_psi0(100, rng);
      double worst = 0.0;
      for (Eigen::Index i = 0; i < x0.rows(); ++i) {
        double total = 0.0;
        for (double lw : m->conditional(x0.row(i).transpose()).log_weights) total += std::exp(lw);
        worst = std::max(worst, std::abs(total - 1.0));
      }
      return Measure{worst, "max |sum of conditional weights - 1| over 100 x0 ~ Psi0"};
    }));
  }
  out.push_back(run_check("oracle.conditional_mean_mc", 0, 5.0, Compare::less, [&] {
    RngStream rng = root.split("conditional");
    const Samples conds = inst.sample_psi0(3, rng);
    constexpr Eigen::Index n = 100000;
    double worst = 0.0;
    for (Eigen::Index c = 0; c < conds.rows(); ++c) {
      const Vector x0 = conds.row(c).transpose();
      const Samples x1 = inst.sample_conditional(Samples(x0.transpose().replicate(n, 1)), rng);
      const GaussianSpec exact = inst.conditional_moments(x0);
      const Vector mean = linalg::column_mean(x1);
      for (int j = 0; j < d; ++j) {
        worst = std::max(worst, std::abs(mean[j] - exact.mean[j]) / std::sqrt(exact.cov(j, j) / n));
      }
    }
    return Measure{worst, "standard-error multiple, 3 conditions x 1e5 draws"};
  }));
  return out;
}

}  // namespace bm2::suite
