#include "bm2/benchmark_oracle.hpp"
#include "bm2/rng.hpp"
#include "bm2/sinkhorn_flow.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace bm2;

namespace {

double log_normal(double x, double m, double v) { return -0.5 * std::log(2.0 * M_PI * v) - 0.5 * (x - m) * (x - m) / v; }

const FlowProblem kFigure{-2.0, 1.0, 2.0, 1.0, 1.0};

}  // namespace

TEST(FlowRhs, AnalyticStateIsFixedPoint) {
  for (const FlowProblem& p : {kFigure, FlowProblem{0.5, 2.0, -1.0, 0.5, 0.7}, FlowProblem{1.0, 0.3, 3.0, 1.5, 1.5}}) {
    const GaussFlowState s = flow_analytic_state(p);
    EXPECT_LT(flow_rhs(s, p).max_abs(), 1e-8);
    EXPECT_LT(flow_heldout_residual(s, p), 1e-8);
  }
}

TEST(FlowRhs, AnalyticStateMatchesCouplingConditionals) {
  const FlowProblem p{0.5, 2.0, -1.0, 0.5, 0.7};
  const GaussianSbInstance inst = gaussian_sb_coupling(GaussianSpec{Vector::Constant(1, p.mu0), Matrix::Constant(1, 1, p.var0)},
                                                       GaussianSpec{Vector::Constant(1, p.mu1), Matrix::Constant(1, 1, p.var1)},
                                                       p.sigma * p.sigma);
  const GaussFlowState s = flow_analytic_state(p);
  const double c = inst.cross()(0, 0);
  EXPECT_NEAR(s.A_f, c / p.var0, 1e-12);
  EXPECT_NEAR(s.v_f, p.var1 - c * c / p.var0, 1e-12);
  EXPECT_NEAR(s.A_b, c / p.var1, 1e-12);
  EXPECT_NEAR(s.v_b, p.var0 - c * c / p.var1, 1e-12);
}

TEST(FlowRhs, HeldOutResidualAtRandomStates) {
  RngStream rng(1);
  for (int i = 0; i < 10; ++i) {
    GaussFlowState s{0.5 + rng.uniform(), rng.normal(), 0.3 + rng.uniform(), 0.5 + rng.uniform(), rng.normal(),
                     0.3 + rng.uniform()};
    EXPECT_LT(flow_heldout_residual(s, kFigure), 1e-8);
  }
}

// Independent oracle: K(x) = int p(y|x) log(p(y|x) / q(y|x)) dy by trapezoid, with
// q(y|x) = N(x; B y + b, w) N(y; mu_y, var_y). The equation's rhs at (x, y) is -log p + log q + K(x).
TEST(FlowRhs, KlTermMatchesQuadrature) {
  RngStream rng(2);
  for (int i = 0; i < 10; ++i) {
    const GaussFlowState s{0.5 + rng.uniform(), rng.normal(), 0.3 + rng.uniform(), 0.5 + rng.uniform(), rng.normal(),
                           0.3 + rng.uniform()};
    const double x0 = kFigure.mu0 + rng.normal();
    const double m = s.A_f * x0 + s.a_f;
    const double sd = std::sqrt(s.v_f);
    auto log_q = [&](double y) { return log_normal(x0, s.A_b * y + s.a_b, s.v_b) + log_normal(y, kFigure.mu1, kFigure.var1); };
    constexpr int kNodes = 40001;
    const double lo = m - 14.0 * sd, h = 28.0 * sd / (kNodes - 1);
    double k = 0.0;
    for (int j = 0; j < kNodes; ++j) {
      const double y = lo + h * j;
      const double lp = log_normal(y, m, s.v_f);
      k += ((j == 0 || j == kNodes - 1) ? 0.5 : 1.0) * h * std::exp(lp) * (lp - log_q(y));
    }
    const double y = m + 0.4 * sd;
    const double expected = -log_normal(y, m, s.v_f) + log_q(y) + k;
    EXPECT_NEAR(flow_equation_rhs(s, kFigure, true, x0, y), expected, 1e-8) << i;
  }
}

// The flow preserves normalization: E_f[d log f / dl] = 0 for every x0.
TEST(FlowRhs, PreservesNormalization) {
  const GaussFlowState s = kFigure.initial_state();
  const FlowDerivative d = flow_rhs(s, kFigure);
  for (double x0 : {-3.0, -2.0, 0.0}) {
    double acc = 0.0;
    const double m = s.A_f * x0 + s.a_f, sd = std::sqrt(s.v_f);
    constexpr int kNodes = 20001;
    const double lo = m - 12.0 * sd, h = 24.0 * sd / (kNodes - 1);
    for (int j = 0; j < kNodes; ++j) {
      const double y = lo + h * j;
      acc += h * std::exp(log_normal(y, m, s.v_f)) * flow_equation_lhs(s, d, true, x0, y);
    }
    EXPECT_NEAR(acc, 0.0, 1e-9);
  }
}

TEST(FlowRhs, NonIntegrableStateAborts) {
  GaussFlowState s = kFigure.initial_state();
  s.v_b = -1.0;
  EXPECT_THROW(flow_rhs(s, kFigure), NumericalError);
  s.v_b = 1.0;
  s.v_f = NAN;
  EXPECT_THROW(flow_rhs(s, kFigure), NumericalError);
}

TEST(FlowIntegrate, InitialMomentsAreReferenceProcess) {
  const FlowProblem p{0.5, 2.0, -1.0, 0.5, 0.7};
  const auto rows = flow_integrate(p, 0.01, 1e-3);
  ASSERT_FALSE(rows.empty());
  EXPECT_EQ(rows.front().l, 0.0);
  EXPECT_DOUBLE_EQ(rows.front().mean_x1, p.mu0);
  EXPECT_DOUBLE_EQ(rows.front().var_x1, p.var0 + p.sigma * p.sigma);
  EXPECT_DOUBLE_EQ(rows.front().cov_x0x1, p.var0);
}

TEST(FlowIntegrate, SymmetricProblemStaysSymmetric) {
  const auto rows = flow_integrate(kFigure, 5.0, 1e-3);
  for (std::size_t i = 0; i < rows.size(); i += 97) {
    const auto& s = rows[i].state;
    EXPECT_NEAR(s.a_f, -s.a_b, 1e-10) << rows[i].l;
    EXPECT_NEAR(s.A_f, s.A_b, 1e-10) << rows[i].l;
    EXPECT_NEAR(s.v_f, s.v_b, 1e-10) << rows[i].l;
  }
}

TEST(FlowIntegrate, ConvergesToAnalyticCoupling) {
  const auto rows = flow_integrate(kFigure, 30.0, 1e-3);
  const FlowRow& last = rows.back();
  EXPECT_NEAR(last.l, 30.0, 1e-9);
  EXPECT_NEAR(last.mean_x1, 2.0, 1e-3);
  EXPECT_NEAR(last.var_x1, 1.0, 1e-3);
  EXPECT_NEAR(last.cov_x0x1, (std::sqrt(5.0) - 1.0) / 2.0, 1e-3);
}

TEST(FlowIntegrate, StepHalvingIsFourthOrderAccurate) {
  const FlowRow a = flow_integrate(kFigure, 5.0, 1e-2).back();
  const FlowRow b = flow_integrate(kFigure, 5.0, 5e-3).back();
  EXPECT_LT(std::abs(a.mean_x1 - b.mean_x1), 1e-6);
  EXPECT_LT(std::abs(a.var_x1 - b.var_x1), 1e-6);
  EXPECT_LT(std::abs(a.cov_x0x1 - b.cov_x0x1), 1e-6);
}

TEST(FlowIntegrate, MeanApproachIsMonotoneAfterTransient) {
  const auto rows = flow_integrate(kFigure, 30.0, 1e-2);
  std::size_t start = rows.size() / 10;
  for (std::size_t i = start + 1; i < rows.size(); ++i) {
    EXPECT_LE(std::abs(rows[i].mean_x1 - 2.0), std::abs(rows[i - 1].mean_x1 - 2.0) + 1e-12) << rows[i].l;
  }
}

TEST(FlowIntegrate, RejectsBadInput) {
  EXPECT_THROW(flow_integrate(kFigure, 1.0, 0.0), InvalidArgument);
  EXPECT_THROW(flow_integrate(FlowProblem{0, -1, 0, 1, 1}, 1.0, 1e-3), InvalidArgument);
}

TEST(FlowCsv, StrideKeepsLastRow) {
  const auto rows = flow_integrate(kFigure, 0.105, 1e-3);
  const auto path = std::filesystem::temp_directory_path() / "bm2_flow_test.csv";
  write_flow_csv(path.string(), rows, 50);
  std::ifstream is(path);
  std::string line;
  int count = 0;
  std::string last;
  std::getline(is, line);
  EXPECT_EQ(line, "l,A_f,a_f,v_f,A_b,a_b,v_b,E_F_X1,V_F_X1,C_F_X0X1");
  while (std::getline(is, line)) {
    ++count;
    last = line;
  }
  EXPECT_EQ(count, 4);  // rows 0, 50, 100 and 105
  EXPECT_EQ(last.substr(0, 5), "0.105");
  std::filesystem::remove(path);
}
