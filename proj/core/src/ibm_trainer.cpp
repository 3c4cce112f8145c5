#include "bm2/ibm_trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <memory>
#include <sstream>

namespace bm2 {

void IbmConfig::validate() const {
  base.validate();
  if (outer < 1) throw InvalidArgument("outer: must be >= 1");
  if (inner < 1) throw InvalidArgument("inner: must be >= 1");
  if (base.amortized) throw InvalidArgument("ibm: amortized sigma mode is not supported");
  if (base.width < 2) throw InvalidArgument("width: must be >= 2 so each direction gets half");
}

NetShape IbmConfig::shape(int dim) const { return NetShape{dim, base.width / 2, base.hidden_layers, false}; }

template <typename Scalar>
IbmNet<Scalar>::IbmNet(DriftNet<Scalar> n, const Bm2Config& cfg)
    : net(std::move(n)), opt(cfg.adam, net.params().size()), ema(cfg.ema_decay, net.params()) {}

template <typename Scalar>
double fit_projection(const CouplingSampler& coupling, Direction direction, IbmNet<Scalar>& state,
                      const RefDynamics& dyn, const Bm2Config& cfg, int steps, RngStream& rng) {
  if (steps < 1) throw InvalidArgument("fit_projection: steps must be >= 1");
  const bool fwd = direction == Direction::forward;
  EndpointPairs cache;
  double last = std::numeric_limits<double>::quiet_NaN();
  for (int step = 0; step < steps; ++step) {
    if (step % cfg.cache_refresh == 0) {
      RngStream refresh_rng = rng.split("refresh", static_cast<std::uint64_t>(step / cfg.cache_refresh));
      cache = coupling(cfg.cache_capacity, refresh_rng);
      if (cache.x0.rows() < 1 || cache.x0.rows() != cache.x1.rows()) {
        throw InvalidArgument("fit_projection: coupling sampler returned no pairs");
      }
    }
    RngStream step_rng = rng.split("step", static_cast<std::uint64_t>(step));
    const Eigen::Index n = cfg.batch;
    const Eigen::Index d = cache.x0.cols();
    const auto size = static_cast<std::uint64_t>(cache.x0.rows());
    Samples x0(n, d), x1(n, d);
    std::vector<double> t(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto k = static_cast<Eigen::Index>(step_rng.next_u64() % size);
      x0.row(i) = cache.x0.row(k);
      x1.row(i) = cache.x1.row(k);
      t[static_cast<std::size_t>(i)] = step_rng.uniform(cfg.time_eps, 1.0 - cfg.time_eps);
    }
    RngStream noise = step_rng.split("bridge");
    RegressionBatch batch;
    Samples xt = bridge_sample_batch(dyn, x0, x1, t, noise);
    if (fwd) {
      batch.fwd_target = fwd_drift_target_batch(dyn, xt, t, x1);
      batch.fwd_x = std::move(xt);
      batch.fwd_t = std::move(t);
      batch.bwd_x.resize(0, d);
      batch.bwd_target.resize(0, d);
    } else {
      batch.bwd_target = bwd_drift_target_batch(dyn, xt, t, x0);
      batch.bwd_x = std::move(xt);
      batch.bwd_t = std::move(t);
      batch.fwd_x.resize(0, d);
      batch.fwd_target.resize(0, d);
    }
    const LossGrad<Scalar> lg = loss_and_grad(state.net, batch);
    if (!(lg.loss <= cfg.divergence_threshold)) {
      std::ostringstream msg;
      msg << "fit_projection: loss " << lg.loss << " exceeds divergence threshold at step " << step;
      throw NumericalError(msg.str());
    }
    state.opt.step(state.net.params(), lg.grad);
    state.ema.update(state.net.params());
    last = lg.loss;
  }
  return last;
}

void write_ibm_log(const std::string& path, const std::vector<IbmLogRow>& rows) {
  std::ofstream os(path);
  if (!os) throw InvalidArgument("cannot write I-BM log " + path);
  os << "iteration,direction,final_inner_loss,kl\n" << std::setprecision(10);
  for (const auto& r : rows) {
    os << r.iteration << ',' << (r.direction == Direction::forward ? "forward" : "backward") << ','
       << r.final_inner_loss << ',' << r.kl << '\n';
  }
}

template <typename Scalar>
IbmResult<Scalar> ibm_loop(const IbmConfig& cfg, const Problem& problem, const IbmMetricHook<Scalar>& hook) {
  cfg.validate();
  const Bm2Config& base = cfg.base;
  const RngStream root(base.seed, "ibm");
  const NetShape shape = cfg.shape(problem.dim);
  RngStream init_f = root.split("init-forward");
  RngStream init_b = root.split("init-backward");
  IbmNet<Scalar> fwd(DriftNet<Scalar>(shape, init_f), base);
  IbmNet<Scalar> bwd(DriftNet<Scalar>(shape, init_b), base);
  fwd.net.zero_output_layer();
  bwd.net.zero_output_layer();
  fwd.ema = Ema<Scalar>(base.ema_decay, fwd.net.params());
  bwd.ema = Ema<Scalar>(base.ema_decay, bwd.net.params());

  IbmResult<Scalar> result{fwd.sampling_net(), bwd.sampling_net(), Direction::forward, {}};
  for (int it = 0; it < cfg.outer; ++it) {
    const Direction dir = it % 2 == 0 ? Direction::forward : Direction::backward;
    CouplingSampler coupling;
    if (it == 0) {
      coupling = [&problem](Eigen::Index n, RngStream& rng) {
        RngStream a = rng.split("psi0");
        RngStream b = rng.split("psi1");
        return EndpointPairs{problem.psi0(n, a), problem.psi1(n, b)};
      };
    } else {
      // Previous iteration's transport, frozen at its EMA parameters.
      const Direction prev = dir == Direction::forward ? Direction::backward : Direction::forward;
      auto frozen = std::make_shared<DriftNet<Scalar>>(prev == Direction::forward ? fwd.sampling_net()
                                                                                 : bwd.sampling_net());
      coupling = [frozen, prev, &problem, steps = base.grid_steps](Eigen::Index n, RngStream& rng) {
        return simulate(*frozen, prev, n, steps, problem, rng);
      };
    }
    RngStream iter_rng = root.split("iteration", static_cast<std::uint64_t>(it));
    IbmNet<Scalar>& target = dir == Direction::forward ? fwd : bwd;
    IbmLogRow row;
    row.iteration = it;
    row.direction = dir;
    row.final_inner_loss = fit_projection(coupling, dir, target, problem.dyn, base, cfg.inner, iter_rng);
    row.kl = hook ? hook(it, fwd.sampling_net()) : std::numeric_limits<double>::quiet_NaN();
    result.log.push_back(row);
    result.last_direction = dir;
  }
  result.forward = fwd.sampling_net();
  result.backward = bwd.sampling_net();
  return result;
}

template struct IbmNet<float>;
template struct IbmNet<double>;
template double fit_projection(const CouplingSampler&, Direction, IbmNet<float>&, const RefDynamics&, const Bm2Config&,
                               int, RngStream&);
template double fit_projection(const CouplingSampler&, Direction, IbmNet<double>&, const RefDynamics&,
                               const Bm2Config&, int, RngStream&);
template IbmResult<float> ibm_loop(const IbmConfig&, const Problem&, const IbmMetricHook<float>&);
template IbmResult<double> ibm_loop(const IbmConfig&, const Problem&, const IbmMetricHook<double>&);

}  // namespace bm2
