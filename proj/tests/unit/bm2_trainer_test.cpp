#include "bm2/bm2_trainer.hpp"
#include "bm2/linalg.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

using namespace bm2;

namespace {

Problem standard_problem(int dim, double sigma, double var1 = 1.0) {
  Problem p;
  p.dim = dim;
  p.dyn = RefDynamics(sigma);
  p.psi0 = [dim](Eigen::Index n, RngStream& rng) {
    return gaussian_sample(GaussianSpec::isotropic(Vector::Zero(dim), 1.0), n, rng);
  };
  p.psi1 = [dim, var1](Eigen::Index n, RngStream& rng) {
    return gaussian_sample(GaussianSpec::isotropic(Vector::Zero(dim), var1), n, rng);
  };
  return p;
}

Bm2Config small_config() {
  Bm2Config c;
  c.batch = 64;
  c.steps = 20;
  c.cache_capacity = 256;
  c.cache_refresh = 10;
  c.grid_steps = 50;
  c.width = 16;
  c.hidden_layers = 2;
  c.adam.lr = 1e-3;
  c.seed = 3;
  return c;
}

template <typename S>
bool same_bits(std::span<const S> a, std::span<const S> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(S)) == 0;
}

}  // namespace

TEST(RefreshCache, ZeroDriftGivesReferenceMarginals) {
  Bm2Config cfg = small_config();
  cfg.cache_capacity = 40000;
  cfg.batch = 64;
  const Problem p = standard_problem(1, 1.0);
  RngStream init(1);
  const DriftNet<double> net(cfg.shape(1), init);
  EndpointCache cache;
  RngStream rng(2);
  refresh_cache(cache, net, p, cfg, rng);
  ASSERT_EQ(cache.f_x0.rows(), 40000);
  ASSERT_EQ(cache.b_x1.rows(), 40000);
  const double se = 2.0 * std::sqrt(2.0 / 40000);
  EXPECT_LT(std::abs(linalg::sample_covariance(cache.f_x1)(0, 0) - 2.0), 5.0 * se);
  EXPECT_LT(std::abs(linalg::sample_covariance(cache.b_x0)(0, 0) - 2.0), 5.0 * se);
  EXPECT_LT(std::abs(linalg::sample_covariance(cache.f_x0)(0, 0) - 1.0), 5.0 * std::sqrt(2.0 / 40000));
  EXPECT_EQ(cache.age, 0);
  EXPECT_TRUE(cache.f_sigma.empty());
}

TEST(RefreshCache, CapacityHonoredExactly) {
  Bm2Config cfg = small_config();
  cfg.cache_capacity = 5000;
  const Problem p = standard_problem(3, 1.0);
  RngStream init(1);
  const DriftNet<float> net(cfg.shape(3), init);
  EndpointCache cache;
  for (int r = 0; r < 2; ++r) {
    RngStream rng = RngStream(4).split("r", static_cast<std::uint64_t>(r));
    refresh_cache(cache, net, p, cfg, rng);
    EXPECT_EQ(cache.capacity, 5000);
    EXPECT_EQ(cache.f_x0.rows(), 5000);
    EXPECT_EQ(cache.f_x1.rows(), 5000);
    EXPECT_EQ(cache.b_x0.rows(), 5000);
    EXPECT_EQ(cache.b_x1.rows(), 5000);
    EXPECT_EQ(cache.f_x0.cols(), 3);
  }
}

TEST(RefreshCache, AmortizedEntriesCarryOwnSigma) {
  Bm2Config cfg = small_config();
  cfg.amortized = true;
  cfg.cache_capacity = 2000;
  const Problem p = standard_problem(1, 1.0);
  RngStream init(1);
  const DriftNet<float> net(cfg.shape(1), init);
  EndpointCache cache;
  RngStream rng(5);
  refresh_cache(cache, net, p, cfg, rng);
  ASSERT_EQ(cache.f_sigma.size(), 2000U);
  ASSERT_EQ(cache.b_sigma.size(), 2000U);
  double lo = 10, hi = 0;
  for (double s : cache.f_sigma) {
    lo = std::min(lo, s);
    hi = std::max(hi, s);
  }
  EXPECT_GE(lo, 0.1);
  EXPECT_LE(hi, 4.0);
  EXPECT_LT(lo, 0.2);
  EXPECT_GT(hi, 3.9);
  // Zero drift: x1 - x0 = sigma_i xi, so (x1 - x0) / sigma_i is standard normal.
  Samples z(2000, 1);
  for (Eigen::Index i = 0; i < 2000; ++i) z(i, 0) = (cache.f_x1(i, 0) - cache.f_x0(i, 0)) / cache.f_sigma[static_cast<std::size_t>(i)];
  EXPECT_NEAR(linalg::sample_covariance(z)(0, 0), 1.0, 5.0 * std::sqrt(2.0 / 2000));
}

TEST(MakeBatch, TimesStayInsideClippedInterval) {
  Bm2Config cfg = small_config();
  const Problem p = standard_problem(1, 1.0);
  RngStream init(1);
  const DriftNet<float> net(cfg.shape(1), init);
  EndpointCache cache;
  RngStream rng(6);
  refresh_cache(cache, net, p, cfg, rng);
  double lo = 1, hi = 0;
  for (int k = 0; k < 200; ++k) {
    RngStream brng = RngStream(7).split("b", static_cast<std::uint64_t>(k));
    const RegressionBatch b = make_bm2_batch(cache, p.dyn, cfg, brng);
    ASSERT_EQ(b.fwd_t.size(), static_cast<std::size_t>(cfg.batch));
    ASSERT_EQ(b.fwd_t, b.bwd_t);
    for (double t : b.fwd_t) {
      lo = std::min(lo, t);
      hi = std::max(hi, t);
    }
  }
  EXPECT_GE(lo, cfg.time_eps);
  EXPECT_LE(hi, 1.0 - cfg.time_eps);
}

TEST(SampleLoss, DeterministicForFixedCacheAndSeed) {
  Bm2Config cfg = small_config();
  const Problem p = standard_problem(2, 1.0);
  RngStream init(1);
  DriftNet<float> net(cfg.shape(2), init);
  RngStream prng(11);
  for (auto& w : net.params()) w = static_cast<float>(0.1 * prng.normal());
  EndpointCache cache;
  RngStream rng(8);
  refresh_cache(cache, net, p, cfg, rng);
  RngStream a(9), b(9);
  const auto la = sample_loss(cache, net, p.dyn, cfg, a);
  const auto lb = sample_loss(cache, net, p.dyn, cfg, b);
  EXPECT_EQ(la.loss, lb.loss);
  EXPECT_TRUE(same_bits<float>(la.grad, lb.grad));
}

// Gradients depend on the cache contents only, not on how the cache was produced.
TEST(SampleLoss, InjectedCacheGivesIdenticalGradient) {
  Bm2Config cfg = small_config();
  const Problem p = standard_problem(2, 1.0);
  RngStream init(1);
  DriftNet<double> net(cfg.shape(2), init);
  RngStream prng(12);
  for (auto& w : net.params()) w = 0.1 * prng.normal();
  EndpointCache simulated;
  RngStream rng(10);
  refresh_cache(simulated, net, p, cfg, rng);

  EndpointCache injected;
  injected.f_x0 = Samples(simulated.f_x0);
  injected.f_x1 = Samples(simulated.f_x1);
  injected.b_x0 = Samples(simulated.b_x0);
  injected.b_x1 = Samples(simulated.b_x1);
  injected.capacity = simulated.capacity;

  RngStream a(13), b(13);
  const auto la = sample_loss(simulated, net, p.dyn, cfg, a);
  const auto lb = sample_loss(injected, net, p.dyn, cfg, b);
  EXPECT_EQ(la.loss, lb.loss);
  EXPECT_TRUE(same_bits<double>(la.grad, lb.grad));

  injected.f_x1.array() += 0.5;
  RngStream c(13);
  EXPECT_NE(sample_loss(injected, net, p.dyn, cfg, c).loss, la.loss);
}

TEST(Train, SameSeedBitwiseIdentical) {
  const Bm2Config cfg = small_config();
  const Problem p = standard_problem(2, 1.0, 2.0);
  const auto a = train<float>(cfg, p);
  const auto b = train<float>(cfg, p);
  EXPECT_TRUE(same_bits<float>(a.ema_net.params(), b.ema_net.params()));
  ASSERT_EQ(a.log.size(), 20U);
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].loss, b.log[i].loss);
}

TEST(Train, SnapshotHookCadence) {
  Bm2Config cfg = small_config();
  cfg.steps = 25;
  cfg.snapshot_every = 10;
  std::vector<int> seen;
  train<float>(cfg, standard_problem(1, 1.0), [&](int step, const DriftNet<float>&) { seen.push_back(step); });
  EXPECT_EQ(seen, (std::vector<int>{10, 20, 25}));
}

TEST(Train, TrivialProblemLearnsNullDrift) {
  Bm2Config cfg = small_config();
  cfg.steps = 1500;
  cfg.batch = 128;
  cfg.cache_capacity = 512;
  cfg.cache_refresh = 100;
  cfg.width = 32;
  // A 0.999 EMA lags too far behind at this budget.
  cfg.ema_decay = 0.99;
  const double sigma = 1.0;
  const GaussianSbInstance inst = trivial_sb_instance(1, sigma);
  const auto res = train<float>(cfg, problem_from(inst));
  // E |mu_f|^2 over S-distributed (x_t, t).
  RngStream rng(14);
  double acc = 0.0;
  int count = 0;
  for (double t : {0.05, 0.25, 0.5, 0.75, 0.95}) {
    const PathPoints pts = sample_sb_path_points(inst, 2000, t, rng);
    const Samples mu = head_drift(res.ema_net, true)(pts.xt, t);
    acc += mu.squaredNorm();
    count += static_cast<int>(mu.rows());
  }
  EXPECT_LT(acc / count, 0.01);
  // Forward terminal law stays N(0, 1 + sigma^2).
  RngStream srng(15);
  const EndpointPairs e = simulate(res.ema_net, Direction::forward, 20000, 100, problem_from(inst), srng);
  EXPECT_NEAR(linalg::sample_covariance(e.x1)(0, 0), 2.0, 0.15);
}

TEST(Train, AmortizedOutputsDependOnSigma) {
  Bm2Config cfg = small_config();
  cfg.amortized = true;
  cfg.steps = 100;
  const auto res = train<float>(cfg, standard_problem(1, 1.0, 3.0));
  Samples x(1, 1);
  x << 0.5;
  const std::vector<double> t{0.5};
  const std::vector<double> lo{0.3}, hi{3.0};
  const DriftHeads a = res.ema_net.forward(x, t, lo);
  const DriftHeads b = res.ema_net.forward(x, t, hi);
  EXPECT_NE(a.mu_f(0, 0), b.mu_f(0, 0));
}

TEST(Train, DivergenceGuardAborts) {
  Bm2Config cfg = small_config();
  cfg.divergence_threshold = 1e-30;
  EXPECT_THROW(train<float>(cfg, standard_problem(1, 1.0, 4.0)), NumericalError);
}

TEST(Train, RejectsInvalidConfig) {
  Bm2Config cfg = small_config();
  cfg.batch = cfg.cache_capacity + 1;
  EXPECT_THROW(train<float>(cfg, standard_problem(1, 1.0)), InvalidArgument);
  cfg = small_config();
  cfg.time_eps = 0.0;
  EXPECT_THROW(cfg.validate(), InvalidArgument);
}

TEST(Simulate, EmptyRequest) {
  const Bm2Config cfg = small_config();
  RngStream init(1);
  const DriftNet<float> net(cfg.shape(2), init);
  RngStream rng(1);
  const EndpointPairs e = simulate(net, Direction::backward, 0, 10, standard_problem(2, 1.0), rng);
  EXPECT_EQ(e.x0.rows(), 0);
  EXPECT_EQ(e.x1.rows(), 0);
}

TEST(Simulate, ZeroDriftFromPointMass) {
  const Bm2Config cfg = small_config();
  RngStream init(1);
  const DriftNet<float> net(cfg.shape(2), init);
  RngStream rng(16);
  const double sigma = 0.7;
  const Samples x1 = simulate_from(net, Samples::Zero(50000, 2), 20, RefDynamics(sigma), rng);
  const Matrix c = linalg::sample_covariance(x1);
  const double se = sigma * sigma * std::sqrt(2.0 / 50000);
  EXPECT_LT(std::abs(c(0, 0) - sigma * sigma), 5.0 * se);
  EXPECT_LT(std::abs(c(1, 1) - sigma * sigma), 5.0 * se);
}

TEST(TrainLog, CsvLayout) {
  const auto path = std::filesystem::temp_directory_path() / "bm2_train_log_test.csv";
  write_train_log(path.string(), {TrainLogRow{0, 1.5, 0.5, 2.0, 12.3456}, TrainLogRow{1, 1.0, 0.25, 1.25, 20.0}});
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "step,loss_f,loss_b,loss,wall_ms");
  std::getline(is, line);
  EXPECT_EQ(line, "0,1.5,0.5,2,12.346");
  std::filesystem::remove(path);
}
