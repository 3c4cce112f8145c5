#include "bm2/bm2_trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace bm2 {

Problem problem_from(const SbInstance& inst) {
  Problem p;
  p.dim = inst.dim();
  p.dyn = inst.dynamics();
  p.psi0 = [&inst](Eigen::Index n, RngStream& rng) { return inst.sample_psi0(n, rng); };
  p.psi1 = [&inst](Eigen::Index n, RngStream& rng) { return inst.sample_psi1(n, rng); };
  return p;
}

void Bm2Config::validate() const {
  auto fail = [](const std::string& field, const std::string& why) { throw InvalidArgument(field + ": " + why); };
  if (batch < 1) fail("batch", "must be >= 1");
  if (steps < 0) fail("steps", "must be >= 0");
  if (!(time_eps > 0.0 && time_eps < 0.5)) fail("time_eps", "must lie in (0, 0.5)");
  if (grid_steps < 1) fail("grid_steps", "must be >= 1");
  if (cache_capacity < 1) fail("cache_capacity", "must be >= 1");
  if (batch > cache_capacity) fail("batch", "must not exceed cache_capacity");
  if (cache_refresh < 1) fail("cache_refresh", "must be >= 1");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) fail("ema_decay", "must lie in [0, 1)");
  if (width < 1 || hidden_layers < 1) fail("width", "network width and depth must be >= 1");
  if (amortized && !(sigma_lo > 0.0 && sigma_hi > sigma_lo)) fail("sigma_range", "need 0 < sigma_lo < sigma_hi");
  if (snapshot_every < 1) fail("snapshot_every", "must be >= 1");
  if (!(divergence_threshold > 0.0)) fail("divergence_threshold", "must be positive");
}

template <typename Scalar>
BatchDrift head_drift(const DriftNet<Scalar>& net, bool forward_head, std::vector<double> sigma_rows) {
  return [&net, forward_head, sigma = std::move(sigma_rows)](const Samples& x, double t) -> Samples {
    const std::vector<double> times(static_cast<std::size_t>(x.rows()), t);
    DriftHeads heads = net.forward(x, times, sigma);
    if (forward_head) return std::move(heads.mu_f);
    return -heads.v_b;
  };
}

namespace {

std::vector<double> draw_sigmas(const Bm2Config& cfg, Eigen::Index n, RngStream& rng) {
  std::vector<double> out(static_cast<std::size_t>(n));
  for (double& s : out) s = rng.uniform(cfg.sigma_lo, cfg.sigma_hi);
  return out;
}

}  // namespace

template <typename Scalar>
void refresh_cache(EndpointCache& cache, const DriftNet<Scalar>& net_ema, const Problem& problem,
                   const Bm2Config& cfg, RngStream& rng) {
  const Eigen::Index n = cfg.cache_capacity;
  RngStream f_rng = rng.split("forward");
  RngStream b_rng = rng.split("backward");

  cache.capacity = cfg.cache_capacity;
  cache.f_sigma = cfg.amortized ? draw_sigmas(cfg, n, f_rng) : std::vector<double>{};
  cache.f_x0 = problem.psi0(n, f_rng);
  cache.f_x1 = euler_maruyama(head_drift(net_ema, true, cache.f_sigma), cache.f_x0, TimeGrid::forward(cfg.grid_steps),
                              problem.dyn, f_rng, cache.f_sigma);

  cache.b_sigma = cfg.amortized ? draw_sigmas(cfg, n, b_rng) : std::vector<double>{};
  cache.b_x1 = problem.psi1(n, b_rng);
  cache.b_x0 = euler_maruyama(head_drift(net_ema, false, cache.b_sigma), cache.b_x1,
                              TimeGrid::backward(cfg.grid_steps), problem.dyn, b_rng, cache.b_sigma);
  cache.age = 0;
}

RegressionBatch make_bm2_batch(const EndpointCache& cache, const RefDynamics& dyn, const Bm2Config& cfg,
                               RngStream& rng) {
  if (cache.empty()) throw InvalidArgument("sample_loss: cache is empty");
  const Eigen::Index n = cfg.batch;
  const Eigen::Index d = cache.f_x0.cols();
  const auto n_f = static_cast<std::uint64_t>(cache.f_x0.rows());
  const auto n_b = static_cast<std::uint64_t>(cache.b_x0.rows());

  RegressionBatch batch;
  Samples bx0(n, d), bx1(n, d), fx0(n, d), fx1(n, d);
  std::vector<double> t(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto ib = static_cast<Eigen::Index>(rng.next_u64() % n_b);
    const auto jf = static_cast<Eigen::Index>(rng.next_u64() % n_f);
    bx0.row(i) = cache.b_x0.row(ib);
    bx1.row(i) = cache.b_x1.row(ib);
    fx0.row(i) = cache.f_x0.row(jf);
    fx1.row(i) = cache.f_x1.row(jf);
    if (cfg.amortized) {
      batch.fwd_sigma.push_back(cache.b_sigma[static_cast<std::size_t>(ib)]);
      batch.bwd_sigma.push_back(cache.f_sigma[static_cast<std::size_t>(jf)]);
    }
    const double ti = rng.uniform(cfg.time_eps, 1.0 - cfg.time_eps);
    if (!(ti > 0.0 && ti < 1.0)) throw NumericalError("sample_loss: clipped time left (0, 1)");
    t[static_cast<std::size_t>(i)] = ti;
  }
  RngStream fwd_noise = rng.split("bridge-b");
  RngStream bwd_noise = rng.split("bridge-f");
  // Forward head regresses on bridges of backward-simulated pairs and vice versa.
  batch.fwd_x = bridge_sample_batch(dyn, bx0, bx1, t, fwd_noise, batch.fwd_sigma);
  batch.fwd_target = fwd_drift_target_batch(dyn, batch.fwd_x, t, bx1);
  batch.fwd_t = t;
  batch.bwd_x = bridge_sample_batch(dyn, fx0, fx1, t, bwd_noise, batch.bwd_sigma);
  batch.bwd_target = bwd_drift_target_batch(dyn, batch.bwd_x, t, fx0);
  batch.bwd_t = std::move(t);
  return batch;
}

template <typename Scalar>
LossGrad<Scalar> sample_loss(const EndpointCache& cache, const DriftNet<Scalar>& net, const RefDynamics& dyn,
                             const Bm2Config& cfg, RngStream& rng) {
  return loss_and_grad(net, make_bm2_batch(cache, dyn, cfg, rng));
}

void write_train_log(const std::string& path, const std::vector<TrainLogRow>& rows) {
  std::ofstream os(path);
  if (!os) throw InvalidArgument("cannot write training log " + path);
  os << "step,loss_f,loss_b,loss,wall_ms\n" << std::setprecision(10);
  for (const auto& r : rows) {
    os << r.step << ',' << r.loss_f << ',' << r.loss_b << ',' << r.loss << ',' << std::fixed << std::setprecision(3)
       << r.wall_ms << std::defaultfloat << std::setprecision(10) << '\n';
  }
}

template <typename Scalar>
TrainResult<Scalar> train(const Bm2Config& cfg, const Problem& problem, const SnapshotHook<Scalar>& hook,
                          const std::optional<DriftNet<Scalar>>& init) {
  cfg.validate();
  const NetShape shape = cfg.shape(problem.dim);
  const RngStream root(cfg.seed, "bm2");
  RngStream init_rng = root.split("init");

  DriftNet<Scalar> net = init ? *init : DriftNet<Scalar>(shape, init_rng);
  const NetShape& got = net.shape();
  if (got.dim != shape.dim || got.sigma_conditioned != shape.sigma_conditioned) {
    throw InvalidArgument("train: initial net does not match the problem");
  }

  AdamW<Scalar> opt(cfg.adam, net.params().size());
  Ema<Scalar> ema(cfg.ema_decay, net.params());
  EndpointCache cache;
  std::vector<TrainLogRow> log;
  log.reserve(static_cast<std::size_t>(cfg.steps));
  const auto start = std::chrono::steady_clock::now();

  for (int step = 0; step < cfg.steps; ++step) {
    if (step % cfg.cache_refresh == 0) {
      RngStream refresh_rng = root.split("refresh", static_cast<std::uint64_t>(step / cfg.cache_refresh));
      refresh_cache(cache, with_ema(net, ema), problem, cfg, refresh_rng);
    }
    RngStream step_rng = root.split("step", static_cast<std::uint64_t>(step));
    const LossGrad<Scalar> lg = sample_loss(cache, net, problem.dyn, cfg, step_rng);
    if (!(lg.loss <= cfg.divergence_threshold)) {
      std::ostringstream msg;
      msg << "train: loss " << lg.loss << " exceeds divergence threshold at step " << step;
      throw NumericalError(msg.str());
    }
    opt.step(net.params(), lg.grad);
    ema.update(net.params());
    ++cache.age;
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    log.push_back(TrainLogRow{step, lg.loss_f, lg.loss_b, lg.loss, ms});
    if (hook && ((step + 1) % cfg.snapshot_every == 0 || step + 1 == cfg.steps)) hook(step + 1, with_ema(net, ema));
  }
  return TrainResult<Scalar>{with_ema(net, ema), net, std::move(log)};
}

template <typename Scalar>
EndpointPairs simulate(const DriftNet<Scalar>& net, Direction direction, Eigen::Index n, int grid_steps,
                       const Problem& problem, RngStream& rng, std::optional<double> sigma) {
  EndpointPairs out;
  if (n == 0) {
    out.x0.resize(0, problem.dim);
    out.x1.resize(0, problem.dim);
    return out;
  }
  RefDynamics dyn = problem.dyn;
  if (sigma) dyn.sigma = *sigma;
  std::vector<double> sigma_rows;
  if (net.shape().sigma_conditioned) sigma_rows.assign(static_cast<std::size_t>(n), dyn.sigma);
  if (direction == Direction::forward) {
    out.x0 = problem.psi0(n, rng);
    out.x1 = euler_maruyama(head_drift(net, true, sigma_rows), out.x0, TimeGrid::forward(grid_steps), dyn, rng);
  } else {
    out.x1 = problem.psi1(n, rng);
    out.x0 = euler_maruyama(head_drift(net, false, sigma_rows), out.x1, TimeGrid::backward(grid_steps), dyn, rng);
  }
  return out;
}

template <typename Scalar>
Samples simulate_from(const DriftNet<Scalar>& net, const Samples& x0, int grid_steps, const RefDynamics& dyn,
                      RngStream& rng, std::optional<double> sigma) {
  RefDynamics local = dyn;
  if (sigma) local.sigma = *sigma;
  std::vector<double> sigma_rows;
  if (net.shape().sigma_conditioned) sigma_rows.assign(static_cast<std::size_t>(x0.rows()), local.sigma);
  return euler_maruyama(head_drift(net, true, sigma_rows), x0, TimeGrid::forward(grid_steps), local, rng);
}

#define BM2_INSTANTIATE(S)                                                                                        \
  template BatchDrift head_drift(const DriftNet<S>&, bool, std::vector<double>);                                 \
  template void refresh_cache(EndpointCache&, const DriftNet<S>&, const Problem&, const Bm2Config&, RngStream&); \
  template LossGrad<S> sample_loss(const EndpointCache&, const DriftNet<S>&, const RefDynamics&, const Bm2Config&, \
                                   RngStream&);                                                                  \
  template TrainResult<S> train(const Bm2Config&, const Problem&, const SnapshotHook<S>&,                         \
                                const std::optional<DriftNet<S>>&);                                              \
  template EndpointPairs simulate(const DriftNet<S>&, Direction, Eigen::Index, int, const Problem&, RngStream&,   \
                                  std::optional<double>);                                                        \
  template Samples simulate_from(const DriftNet<S>&, const Samples&, int, const RefDynamics&, RngStream&,        \
                                 std::optional<double>);

BM2_INSTANTIATE(float)
BM2_INSTANTIATE(double)
#undef BM2_INSTANTIATE

}  // namespace bm2
