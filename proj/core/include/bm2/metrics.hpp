#pragma once

#include "bm2/benchmark_oracle.hpp"
#include "bm2/ref_process.hpp"
#include "bm2/rng.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace bm2 {

/// Monte Carlo estimate with its standard error.
struct Estimate {
  double value = 0.0;
  double se = 0.0;
  Eigen::Index samples = 0;
};

/// Girsanov drift gap KL(S || P) = E_S int_0^1 |mu_s - mu_p|^2 / (2 sigma^2 beta_t) dt.
/// The time integral is the average over n_times equally spaced times in [eps, 1 - eps];
/// each path index gets a fresh exact S-point per time and the SE is taken across path indices.
Estimate kl_drift_gap(const SbInstance& inst, const BatchDrift& drift_p, Eigen::Index n_paths, int n_times,
                      RngStream& rng, double eps = 0.0025);

/// Squared Bures-Wasserstein distance between Gaussians.
double bw2(const GaussianSpec& g1, const GaussianSpec& g2);

/// Terminal samples for the given x0 rows.
using ConditionalSimulator = std::function<Samples(const Samples& x0, RngStream& rng)>;

/// cBW2-UVP: 100 / (V_S[X1] / 2) times the mean over n_cond conditions x0 ~ Psi0 of
/// BW2(Gaussian fit of n_inner simulated x1, exact moments of S_{1|0}(. | x0)), with
/// V_S[X1] = tr Cov_S(X1). Fits use the unbiased covariance plus 1e-6 I.
Estimate cbw2_uvp(const SbInstance& inst, const ConditionalSimulator& sim, Eigen::Index n_cond, Eigen::Index n_inner,
                  RngStream& rng);

/// Independent-coupling baseline: x1 ~ Psi1 regardless of x0.
ConditionalSimulator independent_simulator(const SbInstance& inst);
/// Exact S_{1|0} sampler through the instance coupling's conditional moments (Gaussian instances)
/// or its conditional mixture (mixture instances).
ConditionalSimulator exact_simulator(const SbInstance& inst);

struct MetricReport {
  std::string method;
  int d = 0;
  double sigma = 0.0;
  double eps_reg = 0.0;
  Estimate kl;
  Estimate cbw2uvp;
  std::uint64_t seed = 0;
  int steps = 0;
};

inline constexpr const char* kResultsHeader = "method,d,sigma,eps_reg,kl,kl_se,cbw2uvp,cbw2uvp_se,seed,steps";

/// Appends reports to a results CSV, writing the header when the file is new or empty.
void append_results_csv(const std::string& path, const std::vector<MetricReport>& reports);

}  // namespace bm2
