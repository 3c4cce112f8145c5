#include "bm2/approximator.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

using namespace bm2;

namespace {

template <typename S>
void randomize(DriftNet<S>& net, RngStream& rng, double scale = 0.5) {
  for (S& p : net.params()) p = static_cast<S>(scale * rng.normal());
}

void fill(Eigen::Index n, int d, RngStream& rng, Samples& x, std::vector<double>& t, Samples& y) {
  x.resize(n, d);
  y.resize(n, d);
  t.clear();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      x(i, j) = rng.normal();
      y(i, j) = rng.normal();
    }
    t.push_back(rng.uniform(0.05, 0.95));
  }
}

RegressionBatch random_batch(int d, RngStream& rng, Eigen::Index nf = 6, Eigen::Index nb = 5) {
  RegressionBatch b;
  fill(nf, d, rng, b.fwd_x, b.fwd_t, b.fwd_target);
  fill(nb, d, rng, b.bwd_x, b.bwd_t, b.bwd_target);
  return b;
}

}  // namespace

TEST(NetShape, FullScaleParameterCount) {
  for (int d : {1, 2, 16, 128}) {
    const std::size_t n = NetShape{d, 768, 3, false}.parameter_count();
    EXPECT_GT(n, 800000u) << d;
    EXPECT_LT(n, 1600000u) << d;
  }
}

TEST(DriftNet, ZeroOutputLayerGivesZeroHeads) {
  RngStream rng(1);
  DriftNet<float> net(NetShape{3, 32, 3, false}, rng);
  Samples x(20, 3);
  std::vector<double> t(20);
  for (int i = 0; i < 20; ++i) {
    for (int j = 0; j < 3; ++j) x(i, j) = 5.0 * rng.normal();
    t[static_cast<std::size_t>(i)] = rng.uniform();
  }
  const DriftHeads h = net.forward(x, t);
  EXPECT_EQ(h.mu_f.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(h.v_b.cwiseAbs().maxCoeff(), 0.0);
}

TEST(DriftNet, BatchRowsMatchSingleRows) {
  RngStream rng(2);
  DriftNet<double> net(NetShape{2, 33, 3, true}, rng);
  randomize(net, rng, 0.3);
  constexpr Eigen::Index n = 17;
  Samples x(n, 2);
  std::vector<double> t(n), s(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    x(i, 0) = rng.normal();
    x(i, 1) = rng.normal();
    t[static_cast<std::size_t>(i)] = rng.uniform();
    s[static_cast<std::size_t>(i)] = rng.uniform(0.1, 4.0);
  }
  const DriftHeads all = net.forward(x, t, s);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    const DriftHeads one = net.forward(Samples(x.row(i)), std::vector<double>{t[k]}, std::vector<double>{s[k]});
    for (int j = 0; j < 2; ++j) {
      EXPECT_EQ(one.mu_f(0, j), all.mu_f(i, j));
      EXPECT_EQ(one.v_b(0, j), all.v_b(i, j));
    }
  }
}

TEST(DriftNet, ShapeMismatchRejected) {
  RngStream rng(3);
  DriftNet<float> net(NetShape{2, 8, 2, false}, rng);
  EXPECT_THROW(net.forward(Samples::Zero(3, 3), std::vector<double>(3, 0.5)), InvalidArgument);
  EXPECT_THROW(net.forward(Samples::Zero(3, 2), std::vector<double>(2, 0.5)), InvalidArgument);
  EXPECT_THROW(net.forward(Samples::Zero(3, 2), std::vector<double>(3, 0.5), std::vector<double>(3, 1.0)),
               InvalidArgument);
}

TEST(LossAndGrad, ZeroAtTargetsEqualOutputs) {
  RngStream rng(4);
  DriftNet<double> net(NetShape{2, 8, 3, false}, rng);
  randomize(net, rng);
  RegressionBatch b = random_batch(2, rng);
  b.fwd_target = net.forward(b.fwd_x, b.fwd_t).mu_f;
  b.bwd_target = net.forward(b.bwd_x, b.bwd_t).v_b;
  const LossGrad<double> lg = loss_and_grad(net, b);
  EXPECT_EQ(lg.loss, 0.0);
  for (double g : lg.grad) EXPECT_EQ(g, 0.0);
}

TEST(LossAndGrad, FiniteDifferencesWidth4) {
  RngStream rng(5);
  DriftNet<double> net(NetShape{2, 4, 3, false}, rng);
  randomize(net, rng);
  const RegressionBatch b = random_batch(2, rng);
  const LossGrad<double> lg = loss_and_grad(net, b);
  ASSERT_EQ(lg.grad.size(), net.params().size());
  constexpr double h = 1e-4;
  for (std::size_t i = 0; i < lg.grad.size(); ++i) {
    const double saved = net.params()[i];
    net.params()[i] = saved + h;
    const double up = loss_and_grad(net, b).loss;
    net.params()[i] = saved - h;
    const double down = loss_and_grad(net, b).loss;
    net.params()[i] = saved;
    const double fd = (up - down) / (2.0 * h);
    const double rel = std::abs(fd - lg.grad[i]) / std::max({std::abs(fd), std::abs(lg.grad[i]), 1e-6});
    EXPECT_LT(rel, 1e-5) << "parameter " << i << " analytic " << lg.grad[i] << " fd " << fd;
  }
}

TEST(LossAndGrad, QuadraticScaling) {
  RngStream rng(6);
  DriftNet<double> net(NetShape{2, 8, 2, false}, rng);
  RegressionBatch b = random_batch(2, rng);
  const double base = loss_and_grad(net, b).loss;
  b.fwd_target *= 2.0;
  b.bwd_target *= 2.0;
  EXPECT_NEAR(loss_and_grad(net, b).loss, 4.0 * base, 1e-12 * base);
}

TEST(LossAndGrad, HalvedMeanSquaredError) {
  RngStream rng(7);
  DriftNet<double> net(NetShape{1, 4, 1, false}, rng);
  RegressionBatch b;
  b.fwd_x = Samples::Zero(2, 1);
  b.fwd_t = {0.3, 0.6};
  b.fwd_target.resize(2, 1);
  b.fwd_target << 1.0, 3.0;
  b.bwd_x = Samples::Zero(1, 1);
  b.bwd_t = {0.5};
  b.bwd_target = Samples::Constant(1, 1, 2.0);
  const LossGrad<double> lg = loss_and_grad(net, b);
  EXPECT_DOUBLE_EQ(lg.loss_f, 0.5 * (1.0 + 9.0) / 2.0);
  EXPECT_DOUBLE_EQ(lg.loss_b, 0.5 * 4.0);
  EXPECT_DOUBLE_EQ(lg.loss, lg.loss_f + lg.loss_b);
}

TEST(LossAndGrad, NonFiniteNamesSample) {
  RngStream rng(8);
  DriftNet<double> net(NetShape{1, 4, 1, false}, rng);
  RegressionBatch b = random_batch(1, rng, 4, 3);
  b.bwd_target(2, 0) = std::numeric_limits<double>::infinity();
  try {
    loss_and_grad(net, b);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find('2'), std::string::npos) << e.what();
  }
}

TEST(LossAndGrad, Deterministic) {
  RngStream rng(9);
  DriftNet<float> net(NetShape{3, 16, 3, false}, rng);
  randomize(net, rng, 0.2);
  const RegressionBatch b = random_batch(3, rng, 40, 30);
  const LossGrad<float> a = loss_and_grad(net, b);
  const LossGrad<float> c = loss_and_grad(net, b);
  EXPECT_EQ(a.loss, c.loss);
  EXPECT_EQ(0, std::memcmp(a.grad.data(), c.grad.data(), a.grad.size() * sizeof(float)));
}

// A forward-only batch never touches the backward head's block of the output layer, and vice versa.
TEST(LossAndGrad, HeadsUseDisjointOutputBlocks) {
  const int d = 2;
  RngStream rng(10);
  DriftNet<double> net(NetShape{d, 8, 2, false}, rng);
  randomize(net, rng);
  RegressionBatch fwd_only = random_batch(d, rng, 5, 0);
  RegressionBatch bwd_only = random_batch(d, rng, 0, 5);
  const int last = net.layer_count() - 1;
  const int in = net.layer_in(last);
  auto head_block_zero = [&](const std::vector<double>& g, int first_row) {
    for (int r = first_row; r < first_row + d; ++r) {
      for (int c = 0; c < in; ++c) {
        if (g[net.weight_offset(last) + static_cast<std::size_t>(r * in + c)] != 0.0) return false;
      }
      if (g[net.bias_offset(last) + static_cast<std::size_t>(r)] != 0.0) return false;
    }
    return true;
  };
  EXPECT_TRUE(head_block_zero(loss_and_grad(net, fwd_only).grad, d));
  EXPECT_TRUE(head_block_zero(loss_and_grad(net, bwd_only).grad, 0));
}

TEST(AdamW, ZeroGradientNoDecayIsFixedPoint) {
  AdamW<double> opt(AdamWConfig{1e-3, 0.9, 0.999, 1e-8, 0.0}, 3);
  std::vector<double> theta{1.0, -2.0, 0.5};
  const std::vector<double> before = theta;
  const std::vector<double> grad(3, 0.0);
  for (int i = 0; i < 10; ++i) opt.step(theta, grad);
  EXPECT_EQ(theta, before);
}

TEST(AdamW, DecayOnlyStep) {
  AdamW<double> opt(AdamWConfig{1e-4, 0.9, 0.999, 1e-8, 0.01}, 2);
  std::vector<double> theta{1.0, -3.0};
  opt.step(theta, std::vector<double>{0.0, 0.0});
  EXPECT_EQ(theta[0], 1.0 * (1.0 - 1e-4 * 0.01));
  EXPECT_EQ(theta[1], -3.0 * (1.0 - 1e-4 * 0.01));
  EXPECT_NEAR(theta[0], 1.0 - 1e-6, 1e-18);
}

// Independent scalar Adam on f = theta^2 / 2; the library must follow the same trajectory.
TEST(AdamW, QuadraticMatchesScalarSimulation) {
  const AdamWConfig cfg{1e-2, 0.9, 0.999, 1e-8, 0.0};
  AdamW<double> opt(cfg, 1);
  std::vector<double> theta{1.0};
  double ref = 1.0, m = 0.0, v = 0.0;
  double prev = 1.0;
  bool monotone = true;
  for (int k = 1; k <= 3000; ++k) {
    const double g = theta[0];
    opt.step(theta, std::vector<double>{g});
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * ref;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * ref * ref;
    const double mhat = m / (1.0 - std::pow(cfg.beta1, k));
    const double vhat = v / (1.0 - std::pow(cfg.beta2, k));
    ref -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    ASSERT_NEAR(theta[0], ref, 1e-12) << "step " << k;
    if (std::abs(prev) > 0.1 && std::abs(theta[0]) > std::abs(prev)) monotone = false;
    prev = theta[0];
  }
  EXPECT_TRUE(monotone);
  EXPECT_LT(std::abs(theta[0]), 0.05);
}

TEST(Ema, ZeroDecayCopies) {
  const std::vector<float> start{0.0f, 0.0f};
  Ema<float> ema(0.0, start);
  const std::vector<float> theta{1.5f, -2.5f};
  ema.update(theta);
  EXPECT_EQ(ema.shadow()[0], 1.5f);
  EXPECT_EQ(ema.shadow()[1], -2.5f);
}

TEST(Ema, GeometricConvergence) {
  Ema<double> ema(0.999, std::vector<double>{0.0});
  const std::vector<double> theta{1.0};
  for (int k = 1; k <= 3000; ++k) {
    ema.update(theta);
    if (k % 1000 == 0) EXPECT_NEAR(1.0 - ema.shadow()[0], std::pow(0.999, k), 1e-12);
  }
}

TEST(Ema, SamplingViewLeavesLiveParameters) {
  RngStream rng(11);
  DriftNet<float> net(NetShape{2, 8, 2, false}, rng);
  randomize(net, rng);
  Ema<float> ema(0.9, net.params());
  std::vector<float> other(net.params().size(), 0.25f);
  ema.update(other);
  const std::vector<float> before(net.params().begin(), net.params().end());
  const DriftNet<float> view = with_ema(net, ema);
  EXPECT_TRUE(std::equal(before.begin(), before.end(), net.params().begin()));
  EXPECT_TRUE(std::equal(view.params().begin(), view.params().end(), ema.shadow().begin()));
}

TEST(Checkpoint, RoundTripAndHeader) {
  RngStream rng(12);
  DriftNet<double> net(NetShape{3, 10, 2, true}, rng);
  randomize(net, rng);
  const auto path = std::filesystem::temp_directory_path() / "bm2_ckpt_test.bin";
  save_checkpoint(path, net);
  const DriftNet<float> back = load_checkpoint<float>(path);
  EXPECT_EQ(back.shape().dim, 3);
  EXPECT_EQ(back.shape().width, 10);
  EXPECT_EQ(back.shape().hidden_layers, 2);
  EXPECT_TRUE(back.shape().sigma_conditioned);
  for (std::size_t i = 0; i < net.params().size(); ++i) {
    EXPECT_EQ(back.params()[i], static_cast<float>(net.params()[i]));
  }
  std::ifstream is(path, std::ios::binary);
  char magic[4];
  is.read(magic, 4);
  EXPECT_EQ(std::string(magic, 4), "BM2N");
  is.close();
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE and some more bytes to fill a header.....";
  }
  EXPECT_THROW(load_checkpoint<float>(path), InvalidArgument);
  std::filesystem::remove(path);
}
