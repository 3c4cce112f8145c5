#pragma once

#include "bm2/bm2_trainer.hpp"

#include <functional>
#include <string>
#include <vector>

namespace bm2 {

struct IbmConfig {
  /// Shared settings; base.width is the combined budget, each direction's net gets half of it.
  Bm2Config base;
  int outer = 10;
  int inner = 5000;

  void validate() const;
  [[nodiscard]] NetShape shape(int dim) const;
};

/// Draws n (x0, x1) pairs of the coupling being projected.
using CouplingSampler = std::function<EndpointPairs(Eigen::Index n, RngStream& rng)>;

/// Optimizer and EMA state of one direction's net, carried across outer iterations.
template <typename Scalar>
struct IbmNet {
  DriftNet<Scalar> net;
  AdamW<Scalar> opt;
  Ema<Scalar> ema;

  IbmNet(DriftNet<Scalar> n, const Bm2Config& cfg);
  [[nodiscard]] DriftNet<Scalar> sampling_net() const { return with_ema(net, ema); }
};

/// Bridge Matching onto one coupling for `steps` SGD steps: pairs come from the sampler through
/// an endpoint cache refreshed every cfg.cache_refresh steps, t ~ U(eps, 1 - eps), x_t from the
/// reference bridge. Forward regresses mu_f onto mu_01, backward regresses v_b onto v_01.
/// Returns the final inner loss.
template <typename Scalar>
double fit_projection(const CouplingSampler& coupling, Direction direction, IbmNet<Scalar>& state,
                      const RefDynamics& dyn, const Bm2Config& cfg, int steps, RngStream& rng);

struct IbmLogRow {
  int iteration = 0;
  Direction direction = Direction::forward;
  double final_inner_loss = 0.0;
  /// Filled by the optional metric hook; NaN otherwise.
  double kl = 0.0;
};

void write_ibm_log(const std::string& path, const std::vector<IbmLogRow>& rows);

template <typename Scalar>
struct IbmResult {
  /// Sampling (EMA) nets; only the mu_f head of `forward` and the v_b head of `backward` are trained.
  DriftNet<Scalar> forward;
  DriftNet<Scalar> backward;
  Direction last_direction = Direction::forward;
  std::vector<IbmLogRow> log;
};

/// Returns the KL metric for the forward net after a forward iteration.
template <typename Scalar>
using IbmMetricHook = std::function<double(int iteration, const DriftNet<Scalar>& forward_net)>;

/// Iteration 0 fits the forward drift on the independent coupling Psi0 x Psi1; later iterations
/// alternate direction, each projecting the coupling simulated by the previous iteration's net
/// (start side drawn fresh from its marginal). Nets are warm-started across iterations.
template <typename Scalar>
IbmResult<Scalar> ibm_loop(const IbmConfig& cfg, const Problem& problem, const IbmMetricHook<Scalar>& hook = {});

}  // namespace bm2
