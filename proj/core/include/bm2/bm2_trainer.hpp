#pragma once

#include "bm2/approximator.hpp"
#include "bm2/benchmark_oracle.hpp"
#include "bm2/ref_process.hpp"
#include "bm2/rng.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace bm2 {

/// Marginal samplers plus the reference dynamics.
struct Problem {
  int dim = 1;
  RefDynamics dyn;
  Sampler psi0;
  Sampler psi1;
};

/// Problem whose marginals are the instance's Psi0 and Psi1.
Problem problem_from(const SbInstance& inst);

struct Bm2Config {
  int batch = 1000;
  int steps = 50000;
  double time_eps = 0.0025;
  int grid_steps = 200;
  int cache_capacity = 5000;
  int cache_refresh = 200;
  double ema_decay = 0.999;
  AdamWConfig adam;
  int width = 768;
  int hidden_layers = 3;
  /// BM2_sigma: sigma drawn per cache entry from U(sigma_lo, sigma_hi) and fed to the net.
  bool amortized = false;
  double sigma_lo = 0.1;
  double sigma_hi = 4.0;
  int snapshot_every = 1000;
  double divergence_threshold = 1e8;
  std::uint64_t seed = 0;

  void validate() const;
  [[nodiscard]] NetShape shape(int dim) const { return NetShape{dim, width, hidden_layers, amortized}; }
};

/// Endpoints of the current forward and backward SDEs. Entry i of f_sigma / b_sigma is the
/// diffusion scale row i was simulated with (amortized mode only).
struct EndpointCache {
  Samples f_x0, f_x1;
  std::vector<double> f_sigma;
  Samples b_x0, b_x1;
  std::vector<double> b_sigma;
  int capacity = 0;
  /// Training steps since the last refresh.
  int age = 0;

  [[nodiscard]] bool empty() const { return f_x0.rows() == 0 || b_x0.rows() == 0; }
};

/// One head as a batch drift: mu_f, or -v_b ready for a backward grid. sigma_rows feeds
/// sigma-conditioned nets.
template <typename Scalar>
BatchDrift head_drift(const DriftNet<Scalar>& net, bool forward_head, std::vector<double> sigma_rows = {});

/// Replaces the whole cache: f pairs are (Psi0 draw, forward EM with mu_f), b pairs are
/// (backward EM with -v_b, Psi1 draw). No gradient state is touched.
template <typename Scalar>
void refresh_cache(EndpointCache& cache, const DriftNet<Scalar>& net_ema, const Problem& problem,
                   const Bm2Config& cfg, RngStream& rng);

/// Assemble one BM2 regression batch from the cache: indices uniform with replacement, one
/// t ~ U(eps, 1 - eps) per element shared by both terms, independent bridge noise per term.
RegressionBatch make_bm2_batch(const EndpointCache& cache, const RefDynamics& dyn, const Bm2Config& cfg,
                               RngStream& rng);

template <typename Scalar>
LossGrad<Scalar> sample_loss(const EndpointCache& cache, const DriftNet<Scalar>& net, const RefDynamics& dyn,
                             const Bm2Config& cfg, RngStream& rng);

struct TrainLogRow {
  int step = 0;
  double loss_f = 0.0;
  double loss_b = 0.0;
  double loss = 0.0;
  double wall_ms = 0.0;
};

void write_train_log(const std::string& path, const std::vector<TrainLogRow>& rows);

template <typename Scalar>
struct TrainResult {
  DriftNet<Scalar> ema_net;
  DriftNet<Scalar> live_net;
  std::vector<TrainLogRow> log;
};

/// Called every snapshot_every steps and after the last step with the EMA net.
template <typename Scalar>
using SnapshotHook = std::function<void(int step, const DriftNet<Scalar>& ema_net)>;

/// Algorithm 2. When `init` is given, training starts from it instead of a fresh net.
/// Throws NumericalError if the loss exceeds cfg.divergence_threshold.
template <typename Scalar>
TrainResult<Scalar> train(const Bm2Config& cfg, const Problem& problem, const SnapshotHook<Scalar>& hook = {},
                          const std::optional<DriftNet<Scalar>>& init = std::nullopt);

enum class Direction { forward, backward };

/// Forward: x0 ~ Psi0, x1 from the mu_f SDE. Backward: x1 ~ Psi1, x0 from the -v_b SDE on the
/// reversed grid. Uniform grids of grid_steps steps. sigma (amortized nets only) sets the diffusion scale used for both the SDE and
/// the net's conditioning input.
template <typename Scalar>
EndpointPairs simulate(const DriftNet<Scalar>& net, Direction direction, Eigen::Index n, int grid_steps,
                       const Problem& problem, RngStream& rng, std::optional<double> sigma = std::nullopt);

/// Terminal states of the forward SDE started from the given x0 rows.
template <typename Scalar>
Samples simulate_from(const DriftNet<Scalar>& net, const Samples& x0, int grid_steps, const RefDynamics& dyn,
                      RngStream& rng, std::optional<double> sigma = std::nullopt);

}  // namespace bm2
