#include "bm2/metrics.hpp"

#include "bm2/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace bm2 {
namespace {

Estimate mean_and_se(const std::vector<double>& values) {
  Estimate e;
  e.samples = static_cast<Eigen::Index>(values.size());
  if (values.empty()) return e;
  double sum = 0.0;
  for (double v : values) sum += v;
  e.value = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - e.value) * (v - e.value);
    e.se = std::sqrt(ss / static_cast<double>(values.size() - 1) / static_cast<double>(values.size()));
  }
  return e;
}

}  // namespace

Estimate kl_drift_gap(const SbInstance& inst, const BatchDrift& drift_p, Eigen::Index n_paths, int n_times,
                      RngStream& rng, double eps) {
  if (n_paths < 2 || n_times < 1) throw InvalidArgument("kl_drift_gap: need n_paths >= 2 and n_times >= 1");
  if (!(eps > 0.0 && eps < 0.5)) throw InvalidArgument("kl_drift_gap: eps must lie in (0, 0.5)");
  const RefDynamics& dyn = inst.dynamics();
  const double s2 = dyn.sigma * dyn.sigma;
  std::vector<double> per_path(static_cast<std::size_t>(n_paths), 0.0);
  for (int j = 0; j < n_times; ++j) {
    const double t = n_times == 1 ? 0.5 : eps + (1.0 - 2.0 * eps) * j / (n_times - 1);
    RngStream time_rng = rng.split("time", static_cast<std::uint64_t>(j));
    const PathPoints pts = sample_sb_path_points(inst, n_paths, t, time_rng);
    const Samples exact = inst.drift(pts.xt, t);
    const Samples model = drift_p(pts.xt, t);
    if (model.rows() != exact.rows() || model.cols() != exact.cols()) {
      throw InvalidArgument("kl_drift_gap: drift returned wrong shape");
    }
    const double weight = 1.0 / (2.0 * s2 * dyn.schedule.beta(t) * n_times);
    for (Eigen::Index i = 0; i < n_paths; ++i) {
      const double gap = (exact.row(i) - model.row(i)).squaredNorm();
      if (!std::isfinite(gap)) {
        std::ostringstream msg;
        msg << "kl_drift_gap: non-finite drift at path " << i << ", t = " << t;
        throw NumericalError(msg.str());
      }
      per_path[static_cast<std::size_t>(i)] += weight * gap;
    }
  }
  return mean_and_se(per_path);
}

double bw2(const GaussianSpec& g1, const GaussianSpec& g2) {
  if (g1.dim() != g2.dim()) throw InvalidArgument("bw2: dimension mismatch");
  g1.validate();
  g2.validate();
  const Matrix root1 = linalg::sqrtm_psd(g1.cov);
  const Matrix cross = linalg::sqrtm_psd(linalg::symmetrize(root1 * g2.cov * root1));
  const double value = (g1.mean - g2.mean).squaredNorm() + g1.cov.trace() + g2.cov.trace() - 2.0 * cross.trace();
  return std::max(value, 0.0);
}

Estimate cbw2_uvp(const SbInstance& inst, const ConditionalSimulator& sim, Eigen::Index n_cond, Eigen::Index n_inner,
                  RngStream& rng) {
  const Eigen::Index d = inst.dim();
  if (n_inner < d + 1) throw InvalidArgument("cbw2_uvp: n_inner must be at least d + 1 for a covariance fit");
  if (n_cond < 2) throw InvalidArgument("cbw2_uvp: need n_cond >= 2");
  RngStream cond_rng = rng.split("conditions");
  const Samples conds = inst.sample_psi0(n_cond, cond_rng);
  const double norm = 100.0 / (0.5 * inst.x1_total_variance());

  // Conditions are simulated in fixed-size chunks so memory stays bounded.
  constexpr Eigen::Index kRowsPerChunk = 1 << 16;
  const Eigen::Index per_chunk = std::max<Eigen::Index>(1, kRowsPerChunk / n_inner);
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(n_cond));
  for (Eigen::Index start = 0, chunk = 0; start < n_cond; start += per_chunk, ++chunk) {
    const Eigen::Index count = std::min(per_chunk, n_cond - start);
    Samples x0(count * n_inner, d);
    for (Eigen::Index c = 0; c < count; ++c) {
      for (Eigen::Index k = 0; k < n_inner; ++k) x0.row(c * n_inner + k) = conds.row(start + c);
    }
    RngStream sim_rng = rng.split("simulate", static_cast<std::uint64_t>(chunk));
    const Samples x1 = sim(x0, sim_rng);
    if (x1.rows() != x0.rows() || x1.cols() != d) throw InvalidArgument("cbw2_uvp: simulator returned wrong shape");
    if (!x1.allFinite()) throw NumericalError("cbw2_uvp: simulator returned non-finite samples");
    for (Eigen::Index c = 0; c < count; ++c) {
      const Samples block = x1.middleRows(c * n_inner, n_inner);
      GaussianSpec fit{linalg::column_mean(block), linalg::sample_covariance(block)};
      fit.cov += 1e-6 * Matrix::Identity(d, d);
      const GaussianSpec exact = inst.conditional_moments(conds.row(start + c).transpose());
      values.push_back(norm * bw2(fit, exact));
    }
  }
  return mean_and_se(values);
}

ConditionalSimulator independent_simulator(const SbInstance& inst) {
  return [&inst](const Samples& x0, RngStream& rng) { return inst.sample_psi1(x0.rows(), rng); };
}

ConditionalSimulator exact_simulator(const SbInstance& inst) {
  return [&inst](const Samples& x0, RngStream& rng) { return inst.sample_conditional(x0, rng); };
}

void append_results_csv(const std::string& path, const std::vector<MetricReport>& reports) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream os(path, std::ios::app);
  if (!os) throw InvalidArgument("cannot write results CSV " + path);
  if (fresh) os << kResultsHeader << '\n';
  os << std::setprecision(10);
  for (const auto& r : reports) {
    os << r.method << ',' << r.d << ',' << r.sigma << ',' << r.eps_reg << ',' << r.kl.value << ',' << r.kl.se << ','
       << r.cbw2uvp.value << ',' << r.cbw2uvp.se << ',' << r.seed << ',' << r.steps << '\n';
  }
}

}  // namespace bm2
