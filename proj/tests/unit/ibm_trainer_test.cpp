#include "bm2/ibm_trainer.hpp"
#include "bm2/linalg.hpp"
#include "bm2/metrics.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

using namespace bm2;

namespace {

Bm2Config base_config() {
  Bm2Config c;
  c.batch = 128;
  c.cache_capacity = 1024;
  c.cache_refresh = 100;
  c.grid_steps = 50;
  c.width = 64;
  c.hidden_layers = 2;
  c.adam.lr = 1e-3;
  c.ema_decay = 0.99;
  c.seed = 5;
  return c;
}

IbmNet<float> fresh(const Bm2Config& cfg, int dim) {
  RngStream init(1);
  DriftNet<float> net(NetShape{dim, cfg.width / 2, cfg.hidden_layers, false}, init);
  net.zero_output_layer();
  return IbmNet<float>(std::move(net), cfg);
}

Samples standard_normal(Eigen::Index n, int dim, RngStream& rng) {
  return gaussian_sample(GaussianSpec::isotropic(Vector::Zero(dim), 1.0), n, rng);
}

/// x0 ~ N(0, 1), x1 = x0: E[(x0 - x_t) / (1 - t) | x_t] = -sigma^2 t x_t / (1 + sigma^2 t (1 - t)).
double identity_coupling_drift(double x, double t, double sigma) {
  return -sigma * sigma * t * x / (1.0 + sigma * sigma * t * (1.0 - t));
}

}  // namespace

TEST(FitProjection, ReferenceCouplingGivesNullDrift) {
  const Bm2Config cfg = base_config();
  const double sigma = 1.0;
  const CouplingSampler r01 = [sigma](Eigen::Index n, RngStream& rng) {
    Samples x0 = standard_normal(n, 1, rng);
    Samples x1 = x0 + sigma * standard_normal(n, 1, rng);
    return EndpointPairs{x0, x1};
  };
  IbmNet<float> state = fresh(cfg, 1);
  RngStream rng(2);
  fit_projection(r01, Direction::forward, state, RefDynamics(sigma), cfg, 1500, rng);
  const DriftNet<float> net = state.sampling_net();
  RngStream eval(3);
  double acc = 0.0;
  Eigen::Index count = 0;
  for (double t : {0.05, 0.3, 0.6, 0.95}) {
    const Samples x = std::sqrt(1.0 + sigma * sigma * t) * standard_normal(2000, 1, eval);
    const Samples mu = head_drift(net, true)(x, t);
    acc += mu.squaredNorm();
    count += mu.rows();
  }
  EXPECT_LT(acc / static_cast<double>(count), 0.01);
}

TEST(FitProjection, IdentityCouplingMatchesClosedForm) {
  Bm2Config cfg = base_config();
  cfg.batch = 256;
  cfg.adam.lr = 3e-4;
  cfg.ema_decay = 0.999;
  const double sigma = 1.0;
  const CouplingSampler ident = [](Eigen::Index n, RngStream& rng) {
    Samples x0 = standard_normal(n, 1, rng);
    return EndpointPairs{x0, x0};
  };
  IbmNet<float> state = fresh(cfg, 1);
  RngStream rng(4);
  fit_projection(ident, Direction::forward, state, RefDynamics(sigma), cfg, 8000, rng);
  const DriftNet<float> net = state.sampling_net();
  RngStream eval(5);
  double mse = 0.0;
  Eigen::Index count = 0;
  for (double t : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    const double s2 = 1.0 + sigma * sigma * t * (1.0 - t);
    const Samples x = std::sqrt(s2) * standard_normal(2000, 1, eval);
    const Samples mu = head_drift(net, true)(x, t);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double e = mu(i, 0) - identity_coupling_drift(x(i, 0), t, sigma);
      mse += e * e;
    }
    count += x.rows();
  }
  EXPECT_LT(mse / static_cast<double>(count), 1e-3);
}

// The conditional expectation minimizes the regression loss: shifting it by any constant
// raises the empirical loss on bridge samples.
TEST(FitProjection, ConditionalExpectationMinimizesLoss) {
  const double sigma = 1.0;
  const RefDynamics dyn(sigma);
  RngStream rng(6);
  constexpr Eigen::Index n = 200000;
  const Samples x0 = standard_normal(n, 1, rng);
  std::vector<double> xt(n), target(n), t(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    t[static_cast<std::size_t>(i)] = 0.05 + 0.9 * rng.uniform();
    const Vector a = x0.row(i).transpose();
    const double ti = t[static_cast<std::size_t>(i)];
    xt[static_cast<std::size_t>(i)] = bridge_sample(dyn, a, a, ti, rng)[0];
    target[static_cast<std::size_t>(i)] = (x0(i, 0) - xt[static_cast<std::size_t>(i)]) / (1.0 - ti);
  }
  auto loss_at = [&](double c) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      const double r = target[k] - (identity_coupling_drift(xt[k], t[k], sigma) + c);
      acc += 0.5 * r * r;
    }
    return acc / n;
  };
  const double best = loss_at(0.0);
  for (double c : {-0.5, -0.2, -0.05, 0.05, 0.2, 0.5}) EXPECT_GT(loss_at(c), best) << c;
}

TEST(IbmLoop, LogStructureAndAlternation) {
  IbmConfig cfg;
  cfg.base = base_config();
  cfg.base.width = 16;
  cfg.outer = 5;
  cfg.inner = 20;
  Problem p;
  p.dim = 1;
  p.dyn = RefDynamics(1.0);
  p.psi0 = [](Eigen::Index n, RngStream& rng) { return standard_normal(n, 1, rng); };
  p.psi1 = [](Eigen::Index n, RngStream& rng) { return Samples(2.0 + standard_normal(n, 1, rng).array()); };
  std::vector<int> hooked;
  const IbmResult<float> res =
      ibm_loop<float>(cfg, p, [&](int it, const DriftNet<float>&) { hooked.push_back(it); return 0.5 * it; });
  ASSERT_EQ(res.log.size(), 5U);
  for (int i = 0; i < 5; ++i) {
    EXPECT_EQ(res.log[static_cast<std::size_t>(i)].iteration, i);
    EXPECT_EQ(res.log[static_cast<std::size_t>(i)].direction, i % 2 == 0 ? Direction::forward : Direction::backward);
    EXPECT_EQ(res.log[static_cast<std::size_t>(i)].kl, 0.5 * i);
  }
  EXPECT_EQ(hooked.size(), 5U);
  EXPECT_EQ(res.last_direction, Direction::forward);
  EXPECT_EQ(res.forward.shape().width, 8);

  const auto path = std::filesystem::temp_directory_path() / "bm2_ibm_log_test.csv";
  write_ibm_log(path.string(), res.log);
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "iteration,direction,final_inner_loss,kl");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 5);
  std::filesystem::remove(path);
}

TEST(IbmLoop, Deterministic) {
  IbmConfig cfg;
  cfg.base = base_config();
  cfg.base.width = 16;
  cfg.outer = 3;
  cfg.inner = 15;
  const GaussianSbInstance inst = trivial_sb_instance(2, 1.0);
  const Problem p = problem_from(inst);
  const auto a = ibm_loop<float>(cfg, p);
  const auto b = ibm_loop<float>(cfg, p);
  ASSERT_EQ(a.forward.params().size(), b.forward.params().size());
  EXPECT_EQ(0, std::memcmp(a.forward.params().data(), b.forward.params().data(), a.forward.params().size() * sizeof(float)));
  EXPECT_EQ(0, std::memcmp(a.backward.params().data(), b.backward.params().data(), a.backward.params().size() * sizeof(float)));
}

TEST(IbmLoop, TrivialProblemMetricStaysSmall) {
  IbmConfig cfg;
  cfg.base = base_config();
  cfg.outer = 6;
  cfg.inner = 800;
  const GaussianSbInstance inst = trivial_sb_instance(1, 1.0);
  const Problem p = problem_from(inst);
  const auto res = ibm_loop<float>(cfg, p, [&](int it, const DriftNet<float>& net) {
    RngStream rng = RngStream(7).split("kl", static_cast<std::uint64_t>(it));
    return kl_drift_gap(inst, head_drift(net, true), 1000, 20, rng).value;
  });
  // Iteration 0 projects the independent coupling, whose drift is not null; the alternating
  // projections then settle at the null drift and stay there.
  ASSERT_EQ(res.log.size(), 6U);
  EXPECT_GT(res.log[0].kl, 10.0 * res.log[2].kl);
  for (std::size_t i = 2; i < res.log.size(); ++i) {
    EXPECT_LT(res.log[i].kl, 0.01) << i;
    EXPECT_LT(res.log[i].kl, res.log[i - 1].kl + 2e-3) << i;
  }
}

TEST(IbmLoop, RejectsAmortizedAndNarrow) {
  IbmConfig cfg;
  cfg.base = base_config();
  cfg.base.amortized = true;
  EXPECT_THROW(cfg.validate(), InvalidArgument);
  cfg.base.amortized = false;
  cfg.base.width = 1;
  EXPECT_THROW(cfg.validate(), InvalidArgument);
  cfg.base.width = 16;
  cfg.outer = 0;
  EXPECT_THROW(cfg.validate(), InvalidArgument);
}

// The start side of a simulated transport is a fresh marginal draw, never propagated.
TEST(Simulate, StartSideIsExactMarginalDraw) {
  Bm2Config cfg = base_config();
  RngStream init(8);
  DriftNet<float> net(NetShape{1, 16, 2, false}, init);
  RngStream prng(9);
  for (auto& w : net.params()) w = static_cast<float>(0.2 * prng.normal());
  Problem p;
  p.dim = 1;
  p.dyn = RefDynamics(1.0);
  p.psi0 = [](Eigen::Index n, RngStream& rng) { return standard_normal(n, 1, rng); };
  p.psi1 = [](Eigen::Index n, RngStream& rng) { return Samples(3.0 + standard_normal(n, 1, rng).array()); };
  RngStream a(10), a_copy(10);
  const EndpointPairs fwd = simulate(net, Direction::forward, 500, 20, p, a);
  EXPECT_EQ(fwd.x0, p.psi0(500, a_copy));
  RngStream b(11), b_copy(11);
  const EndpointPairs bwd = simulate(net, Direction::backward, 500, 20, p, b);
  EXPECT_EQ(bwd.x1, p.psi1(500, b_copy));
}
